"""Distributed challenge-response check that every node carries the
carmaker secret K_apk.

Per level, the gateway picks a target, sends it a nonce ``r`` (CHALLENGE)
and shares the same nonce with the other members of the level
(CHALLENGE_SHARE), both under the level key. The target answers with
``AES-256(K_apk, r)`` to the whole level (CHALLENGE_RESP). Every member and
the gateway verify the answer independently; a single FAIL is a violation.
Verifiers also watch the gateway: no key deprecation after a FAIL, or a node
that is never challenged, marks the gateway itself as suspect.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from simcan import crypto
from simcan.crypto import KeyMaterial, RandomSource
from simcan.errors import DecryptError, NoMembers, SimcanError
from simcan.frames import MsgType, decode_secure
from simcan.keys import KeyStatus, KeyStore
from simcan.provisioning import GatewayAgent, NodeAgent, wrap_key

log = logging.getLogger(__name__)


class Response(enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    TIMEOUT = "TIMEOUT"


class HwVerdict(enum.Enum):
    AUTHENTIC = "AUTHENTIC"
    VIOLATION = "VIOLATION"
    SGTW_SUSPECT = "SGTW_SUSPECT"


@dataclass
class Challenge:
    cid: int
    r: bytes
    target: int
    level: int
    issued_us: int
    deadline_us: int

    def body(self) -> bytes:
        return bytes([self.level]) + self.cid.to_bytes(2, "big") + bytes([self.target]) + self.r

    @classmethod
    def parse(cls, body: bytes) -> tuple[int, int, int, bytes]:
        if len(body) != 20:
            raise DecryptError("challenge body has the wrong size")
        return body[0], int.from_bytes(body[1:3], "big"), body[3], body[4:]


@dataclass
class ChallengeOutcome:
    challenge: Challenge
    responses: dict[int, Response] = field(default_factory=dict)
    verdict: Optional[HwVerdict] = None

    def decide(self) -> HwVerdict:
        if any(r is not Response.PASS for r in self.responses.values()):
            self.verdict = HwVerdict.VIOLATION
        else:
            self.verdict = HwVerdict.AUTHENTIC
        return self.verdict

    def culprits(self, authority: int) -> list[int]:
        """Who to isolate for a violation.

        Normally the target. When the authority's own check passed, a peer
        that reports FAIL on a correct answer cannot hold K_apk itself, so
        the dissenting peers are blamed instead.
        """
        if self.responses.get(authority) is Response.PASS:
            return sorted(v for v, r in self.responses.items() if r is Response.FAIL and v != authority)
        return [self.challenge.target]


def expected_response(k_apk: KeyMaterial, r: bytes) -> bytes:
    return crypto.aes_encrypt_block(k_apk, r)


def _open(store: KeyStore, level: int, raw: bytes, now: int):
    """Decrypt a level broadcast with the current or a grace-window key."""
    keys = []
    if level in store.pl_keys:
        keys.append(store.pl_keys[level])
    g = store.grace.get((level, False))
    if g is not None and now <= g[1]:
        keys.append(g[0])
    for entry in keys:
        try:
            return decode_secure(raw, wrap_key(entry))
        except DecryptError:
            continue
    raise DecryptError(f"no level {level} key opens the frame")


class HwSigLog:
    """Simulation-side collector of outcomes; not part of the protocol."""

    def __init__(self):
        self.outcomes: dict[int, ChallengeOutcome] = {}
        self.audit: list[dict] = []
        self.suspects: list[tuple[int, int, str]] = []   # (time, verifier, why)
        self.nonces: list[bytes] = []

    def outcome(self, ch: Challenge) -> ChallengeOutcome:
        return self.outcomes.setdefault(ch.cid, ChallengeOutcome(ch))

    def finalize(self, ch: Challenge, now: int, authority: int) -> ChallengeOutcome:
        out = self.outcome(ch)
        verdict = out.decide()
        self.audit.append({"time_us": now, "level": ch.level, "target": ch.target,
                           "verdict": verdict.value,
                           "culprits": out.culprits(authority) if verdict is HwVerdict.VIOLATION else [],
                           "verifiers": {str(k): v.value for k, v in sorted(out.responses.items())}})
        return out

    def verdicts_for(self, node: int) -> list[HwVerdict]:
        return [o.verdict for o in self.outcomes.values() if o.challenge.target == node and o.verdict]


class SelectionMonitor:
    """Per-verifier record of when each level peer was last challenged."""

    def __init__(self, members: list[int], threshold_us: int, start_us: int = 0):
        self.threshold_us = threshold_us
        self.last: dict[int, int] = {m: start_us for m in members}
        self.counts: dict[int, int] = {m: 0 for m in members}

    def seen(self, target: int, now: int) -> None:
        if target in self.last:
            self.last[target] = now
            self.counts[target] += 1

    def forget(self, node: int) -> None:
        self.last.pop(node, None)
        self.counts.pop(node, None)

    def starved(self, now: int) -> list[int]:
        return sorted(n for n, t in self.last.items() if now - t > self.threshold_us)


class ChallengeInitiator:
    """Gateway side: periodic rounds, one challenge at a time per level."""

    def __init__(self, gateway: GatewayAgent, k_apk: KeyMaterial, rng: RandomSource,
                 hwlog: HwSigLog, period_us: int = 100_000, response_timeout_us: int = 10_000,
                 react: bool = True, on_violation: Optional[Callable[[int, int], None]] = None):
        self.gw = gateway
        self.k_apk = k_apk
        self.rng = rng
        self.log = hwlog
        self.period_us = period_us
        self.response_timeout_us = response_timeout_us
        self.react = react
        self.on_violation = on_violation
        self.pending: dict[int, Challenge] = {}
        self._queues: dict[int, list[int]] = {}
        self._busy: set[int] = set()
        self._next_cid = 0
        self._running = False
        self.rounds = 0
        self._on_wire: dict[bytes, Challenge] = {}
        gateway.handlers[MsgType.CHALLENGE_RESP] = self._on_response
        gateway.bus.on_tx_complete(gateway.node_id, self._on_tx_complete)

    @property
    def now(self) -> int:
        return self.gw.now

    def members(self, level: int) -> list[int]:
        return self.gw.authority.level_members(level)

    def issue_challenge(self, level: int, candidates: Optional[list[int]] = None) -> Optional[Challenge]:
        """Challenge one member of ``level`` chosen uniformly from ``candidates``.

        Returns None while the level key is deprecated.
        """
        members = self.members(level) if candidates is None else sorted(candidates)
        if not members:
            raise NoMembers(f"level {level} has no members to challenge")
        store = self.gw.data_store
        if store.get(level).status is KeyStatus.DEPRECATED:
            return None
        target = members[self.rng.randrange(len(members))]
        r = self.rng.nonce()
        # the deadline is armed once the challenge has left the wire
        ch = Challenge(self._next_cid, r, target, level, self.now, -1)
        self._next_cid = (self._next_cid + 1) % 65536
        self.pending[ch.cid] = ch
        self.log.nonces.append(r)
        self.log.outcome(ch)
        key = wrap_key(store.get(level))
        raw = self.gw.send_msg(MsgType.CHALLENGE, target, ch.body(), key, self.gw.timing.proc_us)
        self.gw.send_msg(MsgType.CHALLENGE_SHARE, level, ch.body(), key, self.gw.timing.proc_us)
        self._on_wire[raw] = ch
        return ch

    def _on_tx_complete(self, ev) -> None:
        ch = self._on_wire.pop(ev.payload, None)
        if ch is not None:
            ch.deadline_us = self.now + self.response_timeout_us
            self.gw.bus.loop.call_at(ch.deadline_us, self._deadline, ch)

    # periodic rounds ---------------------------------------------------------

    def start(self, offset_us: int = 0) -> None:
        self._running = True
        self.gw.bus.loop.call_later(offset_us, self._round)

    def stop(self) -> None:
        self._running = False

    def _round(self) -> None:
        if not self._running:
            return
        self.rounds += 1
        levels = list(range(2, self.gw.authority.hierarchy.n_levels + 1))
        # spread the levels over the period to keep the secure bus quiet
        step = self.period_us // max(1, len(levels))
        for i, level in enumerate(levels):
            self.gw.bus.loop.call_later(i * step, self._start_level, level)
        self.gw.bus.loop.call_later(self.period_us, self._round)

    def _start_level(self, level: int) -> None:
        self._queues[level] = self.members(level)
        if level not in self._busy:
            self._advance(level)

    def _advance(self, level: int) -> None:
        queue = [n for n in self._queues.get(level, []) if n in self.members(level)]
        self._queues[level] = queue
        if not queue:
            self._busy.discard(level)
            return
        ch = self.issue_challenge(level, queue)
        if ch is None:
            self._busy.discard(level)
            return
        queue.remove(ch.target)
        self._busy.add(level)

    def _on_response(self, ev, msg_type, selector, sender) -> None:
        frame = _open(self.gw.data_store, selector, ev.payload, self.now)
        level, cid, target, resp = Challenge.parse(frame.body)
        ch = self.pending.get(cid)
        if ch is None or sender != ch.target or level != ch.level:
            return
        ok = crypto.digest_equal(resp, expected_response(self.k_apk, ch.r))
        self.log.outcome(ch).responses[self.gw.node_id] = Response.PASS if ok else Response.FAIL

    def _deadline(self, ch: Challenge) -> None:
        self.pending.pop(ch.cid, None)
        out = self.log.outcome(ch)
        out.responses.setdefault(self.gw.node_id, Response.TIMEOUT)
        # verifiers that never saw an answer time out as well
        for v, r in list(out.responses.items()):
            if r is None:
                out.responses[v] = Response.TIMEOUT
        outcome = self.log.finalize(ch, self.now, self.gw.node_id)
        if outcome.verdict is HwVerdict.VIOLATION:
            if self.react:
                for node in outcome.culprits(self.gw.node_id):
                    self.verify_and_react(ch, node)
            else:
                log.info("gateway suppresses reaction to violation by %#x", ch.target)
        self._advance(ch.level)

    def verify_and_react(self, ch: Challenge, node: Optional[int] = None) -> None:
        node = ch.target if node is None else node
        log.info("hardware violation: node %#x at level %d", node, ch.level)
        if self.on_violation is not None:
            self.on_violation(node, ch.level)
        else:
            self.gw.deprecate_node(node, ch.level)


class ChallengeResponder:
    """Node side: answers its own challenges and verifies its peers'."""

    def __init__(self, node: NodeAgent, k_apk: Optional[KeyMaterial], hwlog: HwSigLog,
                 peers: list[int], starvation_us: int = 0, react_timeout_us: int = 50_000,
                 response_timeout_us: int = 10_000, silent: bool = False):
        self.node = node
        self.k_apk = k_apk
        self.log = hwlog
        self.silent = silent
        self.react_timeout_us = react_timeout_us
        self.response_timeout_us = response_timeout_us
        self.shares: dict[int, Challenge] = {}
        self.suspect = False
        self.deprecations_seen = 0
        self.monitor = SelectionMonitor([p for p in peers if p != node.node_id], starvation_us,
                                        node.now) if starvation_us else None
        node.handlers[MsgType.CHALLENGE] = self._on_challenge
        node.handlers[MsgType.CHALLENGE_SHARE] = self._on_share
        node.handlers[MsgType.CHALLENGE_RESP] = self._on_response
        deprecate_handler = node.handlers[MsgType.DEPRECATE]

        def on_deprecate(ev, msg_type, selector, sender):
            deprecate_handler(ev, msg_type, selector, sender)
            if selector == node.node_id and sender == node.gw_id:
                self.deprecations_seen += 1
        node.handlers[MsgType.DEPRECATE] = on_deprecate

    @property
    def now(self) -> int:
        return self.node.now

    def respond(self, ch_body: bytes) -> Optional[bytes]:
        level, cid, target, r = Challenge.parse(ch_body)
        if self.silent:
            return None
        if self.k_apk is None:
            resp = self.node.rng.bytes(16)
        else:
            resp = expected_response(self.k_apk, r)
        return bytes([level]) + cid.to_bytes(2, "big") + bytes([target]) + resp

    def _on_challenge(self, ev, msg_type, selector, sender) -> None:
        if selector != self.node.node_id or sender != self.node.gw_id:
            return
        level = self.node.level
        frame = _open(self.node.store, level, ev.payload, self.now)
        body = self.respond(frame.body)
        if body is None:
            return
        self.node.send_msg(MsgType.CHALLENGE_RESP, level, body,
                           wrap_key(self.node.store.get(level)), self.node.timing.proc_us)

    def _on_share(self, ev, msg_type, selector, sender) -> None:
        if selector != self.node.level or sender != self.node.gw_id:
            return
        frame = _open(self.node.store, selector, ev.payload, self.now)
        level, cid, target, r = Challenge.parse(frame.body)
        if target == self.node.node_id:
            return
        ch = Challenge(cid, r, target, level, self.now, self.now + self.response_timeout_us)
        self.shares[cid] = ch
        if self.monitor is not None:
            self.monitor.seen(target, self.now)
        outcome = self.log.outcomes.get(cid)
        if outcome is not None:
            outcome.responses.setdefault(self.node.node_id, None)
        self.node.bus.loop.call_at(ch.deadline_us, self._share_deadline, ch)

    def _on_response(self, ev, msg_type, selector, sender) -> None:
        if selector != self.node.level:
            return
        frame = _open(self.node.store, selector, ev.payload, self.now)
        level, cid, target, resp = Challenge.parse(frame.body)
        ch = self.shares.get(cid)
        if ch is None or sender != ch.target:
            return
        if self.k_apk is None:
            ok = False
        else:
            ok = crypto.digest_equal(resp, expected_response(self.k_apk, ch.r))
        self._record(ch, Response.PASS if ok else Response.FAIL)

    def _record(self, ch: Challenge, result: Response) -> None:
        self.shares.pop(ch.cid, None)
        outcome = self.log.outcomes.get(ch.cid)
        if outcome is not None:
            outcome.responses[self.node.node_id] = result
        if result is not Response.PASS:
            mark = self.deprecations_seen
            self.node.bus.loop.call_later(self.react_timeout_us, self._check_reaction, mark, ch)

    def _share_deadline(self, ch: Challenge) -> None:
        if ch.cid in self.shares:
            self._record(ch, Response.TIMEOUT)

    def _check_reaction(self, mark: int, ch: Challenge) -> None:
        if self.deprecations_seen == mark:
            self.raise_suspect(f"no deprecation after violation by {ch.target:#x}")

    def start_monitor(self, every_us: int) -> None:
        def tick():
            self.check_selection()
            self.node.bus.loop.call_later(every_us, tick)
        self.node.bus.loop.call_later(every_us, tick)

    def check_selection(self) -> list[int]:
        if self.monitor is None:
            return []
        starved = self.monitor.starved(self.now)
        if starved:
            self.raise_suspect(f"nodes {starved} never challenged")
        return starved

    def raise_suspect(self, why: str) -> None:
        if not self.suspect:
            log.warning("node %#x suspects the gateway: %s", self.node.node_id, why)
        self.suspect = True
        self.log.suspects.append((self.now, self.node.node_id, why))
