"""Wire formats for the public (signed) and secure (encrypted) CAN-FD frames.

Public payload layout::

    [counter:2 big-endian][data:N][digest:D]      26 <= 2 + N + D <= 64

Secure payload layout::

    cleartext types:  [msg_type:1][sender:1][body]
    encrypted types:  [msg_type:1][sender:1][iv:16][AES-256-CBC(body)][tag:16]

``tag`` is a CMAC over header and ciphertext under the same key. The header
stays in clear so receivers can route a frame before choosing a key.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

from simcan import crypto
from simcan.crypto import CMAC_128, KeyMaterial
from simcan.errors import DecryptError, FrameTooLong, FrameTooShort, MalformedFrame

PUBLIC_MIN = 26
PUBLIC_MAX = 64
COUNTER_LEN = 2
COUNTER_MOD = 1 << 16

SECURE_HEADER = 2
SECURE_IV = 16
SECURE_TAG = 16
# bytes after the cleartext header; ciphertext + tag, or a cleartext body
SECURE_MAX_BODY = 64


class Bus(enum.Enum):
    PUBLIC = "PUBLIC"
    SECURE = "SECURE"


@dataclass(frozen=True, order=True)
class FrameId:
    raw: int
    bus: Bus = Bus.PUBLIC
    extended: bool = False

    def __post_init__(self):
        limit = 1 << (29 if self.extended else 11)
        if not 0 <= self.raw < limit:
            raise ValueError(f"frame id {self.raw:#x} out of range")

    def __str__(self) -> str:
        return f"0x{self.raw:03x}"


class MsgType(enum.IntEnum):
    DISCOVERY = 0
    PUBKEY_G = 1
    PUBKEY_N = 2
    SECRET_G = 3
    SECRET_N = 4
    KEY_DELIVERY = 5
    KEY_ROLL = 6
    DEPRECATE = 7
    SHORT_KEY = 8
    CHALLENGE = 9
    CHALLENGE_SHARE = 10
    CHALLENGE_RESP = 11


CLEARTEXT_TYPES = frozenset({MsgType.DISCOVERY, MsgType.PUBKEY_G, MsgType.PUBKEY_N})

SELECTOR_BITS = 7
BROADCAST = 0x7F


def secure_id(msg_type: MsgType, selector: int) -> FrameId:
    """Secure-bus arbitration id: message type in the high bits, then the
    destination node id or privilege level. Lower types win arbitration."""
    if not 0 <= selector <= BROADCAST:
        raise ValueError(f"selector {selector} out of range")
    return FrameId((int(msg_type) << SELECTOR_BITS) | selector, Bus.SECURE)


def split_secure_id(frame_id: FrameId | int) -> tuple[MsgType, int]:
    raw = frame_id.raw if isinstance(frame_id, FrameId) else frame_id
    return MsgType(raw >> SELECTOR_BITS), raw & BROADCAST


@dataclass(frozen=True)
class PublicFrame:
    id: FrameId
    counter: int
    data: bytes
    digest: bytes

    def payload_len(self) -> int:
        return COUNTER_LEN + len(self.data) + len(self.digest)


def mac_input(data: bytes, counter: int) -> bytes:
    return data + (counter % COUNTER_MOD).to_bytes(COUNTER_LEN, "big")


def sign_public(frame_id: FrameId, counter: int, data: bytes,
                algo: crypto.MacAlgo, key: KeyMaterial | bytes) -> PublicFrame:
    digest = crypto.mac(algo, key, mac_input(data, counter))
    return PublicFrame(frame_id, counter % COUNTER_MOD, data, digest)


def encode_public(frame: PublicFrame) -> bytes:
    if not 0 <= frame.counter < COUNTER_MOD:
        raise ValueError("counter must fit 16 bits")
    n = frame.payload_len()
    if n > PUBLIC_MAX:
        raise FrameTooLong(f"public payload {n} > {PUBLIC_MAX}")
    if n < PUBLIC_MIN:
        raise FrameTooShort(f"public payload {n} < {PUBLIC_MIN}")
    return frame.counter.to_bytes(COUNTER_LEN, "big") + frame.data + frame.digest


def decode_public(raw: bytes, digest_len_bits: int, frame_id: FrameId | int = 0) -> PublicFrame:
    """Split a payload into fields; no cryptographic check happens here."""
    if not PUBLIC_MIN <= len(raw) <= PUBLIC_MAX:
        raise MalformedFrame(f"public payload length {len(raw)} outside [{PUBLIC_MIN}, {PUBLIC_MAX}]")
    dlen = digest_len_bits // 8
    if len(raw) < COUNTER_LEN + dlen:
        raise MalformedFrame("payload shorter than counter + digest")
    if not isinstance(frame_id, FrameId):
        frame_id = FrameId(frame_id)
    split = len(raw) - dlen
    return PublicFrame(
        frame_id,
        int.from_bytes(raw[:COUNTER_LEN], "big"),
        raw[COUNTER_LEN:split],
        raw[split:],
    )


@dataclass(frozen=True)
class SecureFrame:
    """A secure-bus message. ``body`` is the plaintext; ``iv`` is unused for
    cleartext message types."""

    id: FrameId
    sender: int
    msg_type: MsgType
    body: bytes
    iv: bytes = bytes(SECURE_IV)


def peek_header(raw: bytes) -> tuple[MsgType, int]:
    if len(raw) < SECURE_HEADER:
        raise MalformedFrame("secure frame shorter than its header")
    try:
        return MsgType(raw[0]), raw[1]
    except ValueError as exc:
        raise MalformedFrame(f"unknown msg type {raw[0]}") from exc


def encode_secure(frame: SecureFrame, key: KeyMaterial | bytes | None = None) -> bytes:
    if not 0 <= frame.sender <= 0xFF:
        raise ValueError("sender must fit one byte")
    header = bytes([int(frame.msg_type), frame.sender])
    if frame.msg_type in CLEARTEXT_TYPES:
        wire = frame.body
    else:
        if key is None:
            raise DecryptError(f"{frame.msg_type.name} requires a key")
        ct = crypto.aes_cbc_encrypt(key, frame.iv, frame.body)
        tag = crypto.mac(CMAC_128, key, header + frame.iv + ct)
        header += frame.iv
        wire = ct + tag
    if len(wire) > SECURE_MAX_BODY:
        raise FrameTooLong(f"secure body {len(wire)} > {SECURE_MAX_BODY}")
    return header + wire


def decode_secure(raw: bytes, key: KeyMaterial | bytes | None = None,
                  frame_id: FrameId | None = None) -> SecureFrame:
    msg_type, sender = peek_header(raw)
    if frame_id is None:
        frame_id = secure_id(msg_type, BROADCAST)
    if msg_type in CLEARTEXT_TYPES:
        return SecureFrame(frame_id, sender, msg_type, raw[SECURE_HEADER:])
    if key is None:
        raise DecryptError(f"{msg_type.name} requires a key")
    start = SECURE_HEADER + SECURE_IV
    if len(raw) < start + crypto.BLOCK + SECURE_TAG:
        raise DecryptError("secure frame too short")
    iv = raw[SECURE_HEADER:start]
    ct, tag = raw[start:-SECURE_TAG], raw[-SECURE_TAG:]
    expected = crypto.mac(CMAC_128, key, raw[:start] + ct)
    if not crypto.digest_equal(expected, tag):
        raise DecryptError("secure frame tag mismatch")
    body = crypto.aes_cbc_decrypt(key, iv, ct)
    return SecureFrame(frame_id, sender, msg_type, body, iv)


def secure_wire_len(msg_type: MsgType, body_len: int) -> int:
    """Encoded length of a secure frame carrying ``body_len`` plaintext bytes."""
    if msg_type in CLEARTEXT_TYPES:
        return SECURE_HEADER + body_len
    return SECURE_HEADER + SECURE_IV + (body_len // crypto.BLOCK + 1) * crypto.BLOCK + SECURE_TAG


# -- frame dump log ---------------------------------------------------------

class DumpRecord(NamedTuple):
    time_us: int
    bus: str
    frame_id: int
    payload: bytes
    label: str | None = None


def dump_line(time_us: int, bus: str, frame_id: int, payload: bytes, label: str | None = None) -> str:
    fields = [str(time_us), bus, f"0x{frame_id:03x}", payload.hex()]
    if label is not None:
        fields.append(label)
    return "\t".join(fields)


def parse_dump_line(line: str) -> DumpRecord:
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (4, 5):
        raise MalformedFrame(f"dump line has {len(fields)} fields")
    label = fields[4] if len(fields) == 5 else None
    return DumpRecord(int(fields[0]), fields[1], int(fields[2], 16), bytes.fromhex(fields[3]), label)
