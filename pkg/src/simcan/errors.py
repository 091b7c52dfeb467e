"""Exception hierarchy.

Every error carries a stable ``code`` string so logs, reports and other
implementations can refer to failures without depending on class names.
"""


class SimcanError(Exception):
    code = "SIMCAN_ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class InvalidPeerKey(SimcanError):
    code = "INVALID_PEER_KEY"


class KeyLenError(SimcanError):
    code = "KEY_LEN_ERROR"


class AlgoMismatch(SimcanError):
    code = "ALGO_MISMATCH"


class DecryptError(SimcanError):
    code = "DECRYPT_ERROR"


class FrameTooLong(SimcanError):
    code = "FRAME_TOO_LONG"


class FrameTooShort(SimcanError):
    code = "FRAME_TOO_SHORT"


class MalformedFrame(SimcanError):
    code = "MALFORMED_FRAME"


class BusOverload(SimcanError):
    code = "BUS_OVERLOAD"


class ZeroWindow(SimcanError):
    code = "ZERO_WINDOW"


class CapacityError(SimcanError):
    code = "CAPACITY_ERROR"


class NoSuchLevel(SimcanError):
    code = "NO_SUCH_LEVEL"


class DoubleDeprecate(SimcanError):
    code = "DOUBLE_DEPRECATE"


class PrivilegeViolation(SimcanError):
    code = "PRIVILEGE_VIOLATION"


class ModeUnavailable(SimcanError):
    code = "MODE_UNAVAILABLE"


class EmptyNetwork(SimcanError):
    code = "EMPTY_NETWORK"


class DuplicateNode(SimcanError):
    code = "DUPLICATE_NODE"


class NotProvisioned(SimcanError):
    code = "NOT_PROVISIONED"


class NoMembers(SimcanError):
    code = "NO_MEMBERS"


class NoLog(SimcanError):
    code = "NO_LOG"


class ScenarioError(SimcanError):
    """Scenario file failed to parse or validate.

    ``diagnostics`` holds ``(line, message)`` pairs; line is 1-based or None.
    """

    code = "SCENARIO_ERROR"

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        text = "; ".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.diagnostics)
        super().__init__(text)
