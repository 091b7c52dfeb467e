"""Key provisioning over the secure bus.

Flow per node, driven by the gateway (SGTW):

1. network discovery (broadcast, nodes answer with their level)
2. the gateway generates the first set of level keys
3-5. fresh X25519 key pairs; public keys exchanged in clear
6-7. each side sends a nonce encrypted under a transport key derived from
     the ECDH secret
8. both sides derive the shared key K_SH from the two secrets
9. level keys ``node_level..N`` delivered under K_SH, node acknowledges
10. periodic rolls: one broadcast per level under the previous level key

The ``GatewaySession`` / ``NodeSession`` classes are pure state machines
(frames in, frames out). ``GatewayAgent`` / ``NodeAgent`` bind them to a
:class:`~simcan.bus.VirtualBus` with timers and retries.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from simcan import crypto
from simcan.bus import BusEvent, VirtualBus
from simcan.crypto import KeyKind, KeyMaterial, MacAlgo, MacVariant, RandomSource
from simcan.errors import (
    DecryptError, DuplicateNode, EmptyNetwork, InvalidPeerKey, MalformedFrame,
    NotProvisioned, PrivilegeViolation, SimcanError,
)
from simcan.frames import (
    BROADCAST, CLEARTEXT_TYPES, MsgType, SecureFrame, decode_secure, encode_secure,
    peek_header, secure_id, split_secure_id,
)
from simcan.keys import KeyAuthority, KeyStatus, KeyStore, PLKeyEntry

log = logging.getLogger(__name__)

SGTW_ID = 0x01

# entry flags
F_SHORT = 0x01
F_LAST = 0x02
F_REPLACE = 0x04

# node -> gateway control opcodes carried in KEY_DELIVERY bodies
OP_ACK = 0xFF
OP_RESYNC = 0xFE

LABEL_TRANSPORT = b"TRANSPORT"
LABEL_KSH = b"KSH"
LABEL_WRAP = b"LEVELWRAP"

UNICAST_TYPES = frozenset({
    MsgType.PUBKEY_G, MsgType.PUBKEY_N, MsgType.SECRET_G, MsgType.SECRET_N,
    MsgType.KEY_DELIVERY, MsgType.DEPRECATE, MsgType.CHALLENGE, MsgType.CHALLENGE_RESP,
})


class SessionState(enum.IntEnum):
    IDLE = 0
    DISCOVERED = 1
    KEYPAIR_SENT = 2
    PEER_KEY_RECEIVED = 3
    SECRETS_EXCHANGED = 4
    KSH_ESTABLISHED = 5
    KEYS_DELIVERED = 6
    FAILED = 99


@dataclass(frozen=True)
class DiscoveryRecord:
    node: int
    declared_level: int
    is_sub_domain_member: bool = False


@dataclass(frozen=True)
class Timing:
    proc_us: int = 100
    ecdh_us: int = 300
    step_timeout_us: int = 5_000
    backoff_us: tuple = (10_000, 20_000, 40_000)
    discovery_quiet_us: int = 1_000

    @property
    def attempts(self) -> int:
        return len(self.backoff_us)


# -- encodings ----------------------------------------------------------------

def algo_code(algo: MacAlgo) -> int:
    v = 0 if algo.variant is MacVariant.CMAC_AES256 else 1
    return (v << 4) | (algo.digest_len_bits // 64)


def algo_from_code(code: int) -> MacAlgo:
    variant = MacVariant.CMAC_AES256 if code >> 4 == 0 else MacVariant.HASH_MAC_256
    algo = MacAlgo(variant, (code & 0x0F) * 64)
    algo.check()
    return algo


def encode_entry(entry: PLKeyEntry, flags: int = 0) -> bytes:
    flags |= F_SHORT if entry.short else 0
    return (bytes([entry.level, flags]) + entry.epoch.to_bytes(4, "big")
            + bytes([algo_code(entry.algo), entry.key_len]) + entry.key.data)


def decode_entry(body: bytes) -> tuple[PLKeyEntry, int]:
    if len(body) < 8:
        raise MalformedFrame("key entry too short")
    level, flags = body[0], body[1]
    epoch = int.from_bytes(body[2:6], "big")
    algo = algo_from_code(body[6])
    n = body[7]
    if len(body) != 8 + n:
        raise MalformedFrame("key entry length mismatch")
    key = KeyMaterial(body[8:], KeyKind.PL_KEY)
    return PLKeyEntry(level, key, epoch, KeyStatus.ACTIVE, 0, bool(flags & F_SHORT), algo), flags


def wrap_key(entry: PLKeyEntry) -> KeyMaterial:
    """AES-256 key protecting secure-bus broadcasts to one level."""
    return crypto.kdf([entry.key.data, bytes([entry.level, entry.short])], LABEL_WRAP)


def transport_key(shared: bytes, kg_pub: KeyMaterial, kn_pub: KeyMaterial) -> KeyMaterial:
    return crypto.kdf([shared, kg_pub.data, kn_pub.data], LABEL_TRANSPORT)


def derive_ksh(ss_g: bytes, ss_sn: bytes, kg_pub: KeyMaterial, kn_pub: KeyMaterial) -> KeyMaterial:
    return crypto.kdf([ss_g, ss_sn, kg_pub.data, kn_pub.data], LABEL_KSH)


def collect_discovery(responses: list[tuple[int, bytes]]) -> list[DiscoveryRecord]:
    """Turn raw ``(sender, body)`` discovery answers into records."""
    seen: dict[int, DiscoveryRecord] = {}
    for sender, body in responses:
        if sender == SGTW_ID:
            continue
        if len(body) < 2:
            raise MalformedFrame("discovery answer too short")
        if sender in seen:
            raise DuplicateNode(f"node {sender:#x} answered discovery twice")
        seen[sender] = DiscoveryRecord(sender, body[0], bool(body[1] & 1))
    if not seen:
        raise EmptyNetwork("no secure node answered discovery")
    return [seen[n] for n in sorted(seen)]


@dataclass
class TranscriptEntry:
    step: int
    direction: str
    msg_type: str
    len: int


_STEP = {
    MsgType.DISCOVERY: 1, MsgType.PUBKEY_G: 4, MsgType.PUBKEY_N: 5,
    MsgType.SECRET_G: 6, MsgType.SECRET_N: 7, MsgType.KEY_DELIVERY: 9,
}


# -- pure session state machines -------------------------------------------

class _Session:
    def __init__(self, rng: RandomSource):
        self.rng = rng
        self.state = SessionState.IDLE
        self.history: list[SessionState] = [self.state]
        self.transcript: list[TranscriptEntry] = []
        self.error: Optional[str] = None
        self.k_sh: Optional[KeyMaterial] = None

    def _go(self, state: SessionState) -> None:
        if state is not SessionState.FAILED and state < self.state:
            raise RuntimeError(f"illegal transition {self.state.name} -> {state.name}")
        self.state = state
        self.history.append(state)

    def fail(self, reason: str) -> None:
        self.error = reason
        if self.state is not SessionState.FAILED:
            self._go(SessionState.FAILED)

    def _note(self, frame_type: MsgType, direction: str, raw: bytes) -> None:
        self.transcript.append(TranscriptEntry(_STEP.get(frame_type, 0), direction,
                                               frame_type.name, len(raw)))

    def _frame(self, msg_type: MsgType, selector: int, sender: int, body: bytes,
               key: Optional[KeyMaterial]) -> tuple:
        iv = bytes(16) if msg_type in CLEARTEXT_TYPES else self.rng.bytes(16)
        f = SecureFrame(secure_id(msg_type, selector), sender, msg_type, body, iv)
        raw = encode_secure(f, key)
        return f.id, raw


class GatewaySession(_Session):
    def __init__(self, node: int, node_level: int, rng: RandomSource, gw_id: int = SGTW_ID):
        super().__init__(rng)
        self.node = node
        self.node_level = node_level
        self.gw_id = gw_id
        self.kg_priv: Optional[KeyMaterial] = None
        self.kg_pub: Optional[KeyMaterial] = None
        self.kn_pub: Optional[KeyMaterial] = None
        self.transport: Optional[KeyMaterial] = None
        self.nonce_g = b""
        self.ss_g = self.ss_sn = None
        self.deadline_us = 0
        self._go(SessionState.DISCOVERED)

    def out(self, msg_type, body, key=None):
        fid, raw = self._frame(msg_type, self.node, self.gw_id, body, key)
        self._note(msg_type, "G->N", raw)
        return fid, raw

    def start(self) -> list:
        # fresh pair for every node and every attempt
        self.kg_priv, self.kg_pub = crypto.ecdh_keypair(self.rng)
        self._go(SessionState.KEYPAIR_SENT)
        return [self.out(MsgType.PUBKEY_G, self.kg_pub.data)]

    def on_frame(self, raw: bytes) -> list:
        msg_type, _ = peek_header(raw)
        self._note(msg_type, "N->G", raw)
        if msg_type is MsgType.PUBKEY_N and self.state is SessionState.KEYPAIR_SENT:
            body = decode_secure(raw).body
            try:
                self.kn_pub = KeyMaterial(body, KeyKind.ECC_PUBLIC)
                shared = crypto.ecdh_shared(self.kg_priv, self.kn_pub)
            except (InvalidPeerKey, SimcanError) as exc:
                self.fail(getattr(exc, "code", "INVALID_PEER_KEY"))
                raise
            self.transport = transport_key(shared, self.kg_pub, self.kn_pub)
            self._shared = shared
            self._go(SessionState.PEER_KEY_RECEIVED)
            self.nonce_g = self.rng.nonce()
            return [self.out(MsgType.SECRET_G, self.nonce_g, self.transport)]
        if msg_type is MsgType.SECRET_N and self.state is SessionState.PEER_KEY_RECEIVED:
            try:
                nonce_sn = decode_secure(raw, self.transport).body
            except DecryptError:
                self.fail("DECRYPT_ERROR")
                raise
            self.ss_g = self._shared + self.nonce_g
            self.ss_sn = self._shared + nonce_sn
            self._go(SessionState.SECRETS_EXCHANGED)
            self.k_sh = derive_ksh(self.ss_g, self.ss_sn, self.kg_pub, self.kn_pub)
            self._go(SessionState.KSH_ESTABLISHED)
            return []
        if msg_type is MsgType.KEY_DELIVERY and self.state is SessionState.KSH_ESTABLISHED:
            try:
                body = decode_secure(raw, self.k_sh).body
            except DecryptError:
                self.fail("DECRYPT_ERROR")
                raise
            if body[:1] == bytes([OP_ACK]):
                self._go(SessionState.KEYS_DELIVERED)
            return []
        return []

    def deliver_pl_keys(self, entries: list[PLKeyEntry]) -> list:
        if self.state is not SessionState.KSH_ESTABLISHED:
            raise NotProvisioned(f"node {self.node:#x} has no shared key yet")
        bad = [e.level for e in entries if e.level < self.node_level]
        if bad:
            raise PrivilegeViolation(
                f"level {min(bad)} key must not reach a level {self.node_level} node")
        # lowest privilege first, as keys are needed from the node's level down
        order = sorted(entries, key=lambda e: (e.level, e.short))
        out = []
        for i, e in enumerate(order):
            flags = F_LAST if i == len(order) - 1 else 0
            out.append(self.out(MsgType.KEY_DELIVERY, encode_entry(e, flags), self.k_sh))
        return out


class NodeSession(_Session):
    def __init__(self, node: int, level: int, rng: RandomSource, gw_id: int = SGTW_ID):
        super().__init__(rng)
        self.node = node
        self.level = level
        self.gw_id = gw_id
        self.kn_priv = self.kn_pub = self.kg_pub = None
        self.transport = None
        self.delivered: list[PLKeyEntry] = []
        self._go(SessionState.DISCOVERED)

    def out(self, msg_type, body, key=None):
        fid, raw = self._frame(msg_type, self.gw_id, self.node, body, key)
        self._note(msg_type, "N->G", raw)
        return fid, raw

    def on_frame(self, raw: bytes) -> list:
        msg_type, _ = peek_header(raw)
        self._note(msg_type, "G->N", raw)
        if msg_type is MsgType.PUBKEY_G:
            self.kg_pub = KeyMaterial(decode_secure(raw).body, KeyKind.ECC_PUBLIC)
            self.kn_priv, self.kn_pub = crypto.ecdh_keypair(self.rng)
            try:
                shared = crypto.ecdh_shared(self.kn_priv, self.kg_pub)
            except InvalidPeerKey:
                self.fail("INVALID_PEER_KEY")
                raise
            self._shared = shared
            self.transport = transport_key(shared, self.kg_pub, self.kn_pub)
            self._go(SessionState.KEYPAIR_SENT)
            return [self.out(MsgType.PUBKEY_N, self.kn_pub.data)]
        if msg_type is MsgType.SECRET_G and self.state is SessionState.KEYPAIR_SENT:
            try:
                nonce_g = decode_secure(raw, self.transport).body
            except DecryptError:
                self.fail("DECRYPT_ERROR")
                raise
            nonce_sn = self.rng.nonce()
            self.ss_g = self._shared + nonce_g
            self.ss_sn = self._shared + nonce_sn
            self._go(SessionState.SECRETS_EXCHANGED)
            self.k_sh = derive_ksh(self.ss_g, self.ss_sn, self.kg_pub, self.kn_pub)
            self._go(SessionState.KSH_ESTABLISHED)
            return [self.out(MsgType.SECRET_N, nonce_sn, self.transport)]
        if msg_type is MsgType.KEY_DELIVERY and self.state is SessionState.KSH_ESTABLISHED:
            try:
                body = decode_secure(raw, self.k_sh).body
            except DecryptError:
                self.fail("DECRYPT_ERROR")
                raise
            entry, flags = decode_entry(body)
            self.delivered.append(entry)
            if flags & F_LAST:
                self._go(SessionState.KEYS_DELIVERED)
                return [self.out(MsgType.KEY_DELIVERY, bytes([OP_ACK, len(self.delivered)]), self.k_sh)]
        return []


def establish_root_of_trust(gw: GatewaySession, node: NodeSession,
                            tamper: Optional[Callable[[MsgType, bytes], bytes]] = None) -> KeyMaterial:
    """Run steps 3-8 in memory. ``tamper`` may rewrite any frame in flight."""
    tamper = tamper or (lambda t, raw: raw)
    queue = [("N", raw) for _, raw in gw.start()]
    while queue:
        dest, raw = queue.pop(0)
        raw = tamper(MsgType(raw[0]), raw)
        if dest == "N":
            queue += [("G", r) for _, r in node.on_frame(raw)]
        else:
            queue += [("N", r) for _, r in gw.on_frame(raw)]
    if gw.k_sh is None:
        raise NotProvisioned("gateway did not derive a shared key")
    return gw.k_sh


# -- bus agents -------------------------------------------------------------

class _Agent:
    def __init__(self, node_id: int, bus: VirtualBus, rng: RandomSource, timing: Timing):
        self.node_id = node_id
        self.bus = bus
        self.rng = rng
        self.timing = timing
        self.handlers: dict[MsgType, Callable[[BusEvent, MsgType, int, int], None]] = {}
        self.rx_errors = 0
        self.online = True
        bus.subscribe(node_id, self._on_bus)

    @property
    def now(self) -> int:
        return self.bus.loop.now

    def send(self, frames: list, delay_us: int = 0) -> None:
        for fid, raw in frames:
            self.bus.submit(self.node_id, fid.raw, raw, self.now + delay_us)

    def send_msg(self, msg_type: MsgType, selector: int, body: bytes,
                 key: Optional[KeyMaterial], delay_us: int = 0) -> bytes:
        iv = bytes(16) if msg_type in CLEARTEXT_TYPES else self.rng.bytes(16)
        f = SecureFrame(secure_id(msg_type, selector), self.node_id, msg_type, body, iv)
        raw = encode_secure(f, key)
        self.send([(f.id, raw)], delay_us)
        return raw

    def _on_bus(self, ev: BusEvent) -> None:
        if not self.online:
            return
        try:
            msg_type, selector = split_secure_id(ev.frame_id)
            _, sender = peek_header(ev.payload)
        except (MalformedFrame, ValueError):
            self.rx_errors += 1
            return
        handler = self.handlers.get(msg_type)
        if handler is None:
            return
        try:
            handler(ev, msg_type, selector, sender)
        except SimcanError as exc:
            self.rx_errors += 1
            log.debug("node %#x dropped %s: %s", self.node_id, msg_type.name, exc.code)


class NodeAgent(_Agent):
    """Secure node: answers discovery, runs its provisioning session and
    keeps its key store current."""

    def __init__(self, node_id: int, level: int, bus: VirtualBus, rng: RandomSource,
                 k_apk: Optional[KeyMaterial] = None, sub_member: bool = False,
                 timing: Timing = Timing(), capacity_bytes: int = 256,
                 grace_us: int = 0, gw_id: int = SGTW_ID):
        super().__init__(node_id, bus, rng, timing)
        self.level = level
        self.sub_member = sub_member
        self.gw_id = gw_id
        self.grace_us = grace_us
        self.store = KeyStore(level, capacity_bytes, k_apk)
        self.session: Optional[NodeSession] = None
        self.provisioned_at: Optional[int] = None
        self.key_updates: list[tuple[int, int, int, bool]] = []  # (time, level, epoch, short)
        self.resync_requests = 0
        self.on_keys_changed: list[Callable[[int], None]] = []
        self.handlers.update({
            MsgType.DISCOVERY: self._on_discovery,
            MsgType.PUBKEY_G: self._on_session,
            MsgType.SECRET_G: self._on_session,
            MsgType.KEY_DELIVERY: self._on_delivery,
            MsgType.KEY_ROLL: self._on_roll,
            MsgType.DEPRECATE: self._on_deprecate,
            MsgType.SHORT_KEY: self._on_short,
        })

    def _announce_body(self) -> bytes:
        return bytes([self.level, int(self.sub_member)])

    def announce(self) -> None:
        """Unsolicited discovery answer, used for hot-join."""
        self.send_msg(MsgType.DISCOVERY, self.gw_id, self._announce_body(), None, self.timing.proc_us)

    def _on_discovery(self, ev, msg_type, selector, sender) -> None:
        if sender == self.gw_id and selector == BROADCAST:
            self.send_msg(MsgType.DISCOVERY, self.gw_id, self._announce_body(), None, self.timing.proc_us)

    def _for_me(self, selector, sender) -> bool:
        return selector == self.node_id and sender == self.gw_id

    def _on_session(self, ev, msg_type, selector, sender) -> None:
        if not self._for_me(selector, sender):
            return
        if msg_type is MsgType.PUBKEY_G:
            self.session = NodeSession(self.node_id, self.level, self.rng.fork(f"s{self.now}"), self.gw_id)
            delay = self.timing.proc_us + self.timing.ecdh_us
        else:
            delay = self.timing.proc_us
        if self.session is None:
            return
        try:
            out = self.session.on_frame(ev.payload)
        except SimcanError:
            raise
        self.send(out, delay)

    def _install(self, entry: PLKeyEntry, grace_us: int) -> bool:
        changed = self.store.install(entry, self.now, grace_us)
        if changed:
            self.key_updates.append((self.now, entry.level, entry.epoch, entry.short))
            for cb in self.on_keys_changed:
                cb(entry.level)
        return changed

    def _on_delivery(self, ev, msg_type, selector, sender) -> None:
        if not self._for_me(selector, sender):
            return
        s = self.session
        if s is not None and s.state is SessionState.KSH_ESTABLISHED:
            out = s.on_frame(ev.payload)
            entry = s.delivered[-1]
            self._install(entry, 0)
            if s.state is SessionState.KEYS_DELIVERED:
                self.store.k_sh = s.k_sh
                self.provisioned_at = self.now
                self.send(out, self.timing.proc_us)
            return
        if self.store.k_sh is None:
            return
        # resync answer
        entry, _ = decode_entry(decode_secure(ev.payload, self.store.k_sh).body)
        self._install(entry, 0)

    def _held_entry(self, level: int, short: bool) -> Optional[PLKeyEntry]:
        table = self.store.short_keys if short else self.store.pl_keys
        return table.get(level)

    def _on_roll(self, ev, msg_type, selector, sender) -> None:
        if sender != self.gw_id or not self.store.holds(selector):
            return
        # the short flag travels inside the ciphertext, so try both slots
        for short in (False, True):
            cur = self._held_entry(selector, short)
            if cur is None:
                continue
            try:
                body = decode_secure(ev.payload, wrap_key(cur)).body
            except DecryptError:
                continue
            entry, _ = decode_entry(body)
            if entry.level != selector or entry.short != short:
                continue
            if entry.epoch == cur.epoch + 1:
                self._install(entry, self.grace_us)
            elif entry.epoch > cur.epoch + 1:
                self.request_resync(selector, short)
            return
        # nothing we hold opens it: we missed at least one roll
        for short in (False, True):
            if self._held_entry(selector, short) is not None:
                self.request_resync(selector, short)

    def request_resync(self, level: int, short: bool) -> None:
        if self.store.k_sh is None:
            return
        self.resync_requests += 1
        self.send_msg(MsgType.KEY_DELIVERY, self.gw_id, bytes([OP_RESYNC, level, int(short)]),
                      self.store.k_sh, self.timing.proc_us)

    def _on_deprecate(self, ev, msg_type, selector, sender) -> None:
        if not self._for_me(selector, sender) or self.store.k_sh is None:
            return
        entry, _ = decode_entry(decode_secure(ev.payload, self.store.k_sh).body)
        # the old key is no longer trusted: no grace window
        self._install(entry, 0)

    def _on_short(self, ev, msg_type, selector, sender) -> None:
        if sender != self.gw_id or not self.store.holds(selector):
            return
        body = decode_secure(ev.payload, wrap_key(self.store.get(selector))).body
        level, on = body[0], body[1]
        if level != selector:
            return
        if on:
            self.store.enter_short_key_mode({level}, self.now)
        else:
            self.store.exit_short_key_mode(self.now, {level})
        for cb in self.on_keys_changed:
            cb(level)


@dataclass
class NodeProgress:
    record: DiscoveryRecord
    attempts: int = 0
    session: Optional[GatewaySession] = None
    failed: bool = False
    done_at: Optional[int] = None
    sessions: list = field(default_factory=list)


class GatewayAgent(_Agent):
    """SGTW: discovery, node-by-node provisioning, rolling, deprecation."""

    def __init__(self, bus: VirtualBus, authority: KeyAuthority, rng: RandomSource,
                 timing: Timing = Timing(), node_id: int = SGTW_ID):
        super().__init__(node_id, bus, rng, timing)
        self.authority = authority
        self.records: list[DiscoveryRecord] = []
        self.progress: dict[int, NodeProgress] = {}
        self.k_sh: dict[int, KeyMaterial] = {}
        self.discovery_done_at: Optional[int] = None
        self.provisioned_at: Optional[int] = None
        self.discovery_error: Optional[SimcanError] = None
        self._responses: list[tuple[int, bytes]] = []
        self._last_answer = 0
        self._queue: list[int] = []
        self._active: Optional[int] = None
        self._roll_timers: dict[tuple[int, bool], int] = {}
        self.roll_log: list[tuple[int, int, int, bool]] = []  # (time, level, epoch, short)
        self.on_provisioned: list[Callable[[int], None]] = []
        # keys the gateway itself signs and verifies with; a rolled key is
        # only adopted once its broadcast has left the wire
        self.data_store = KeyStore(authority.store.own_level, authority.store.capacity_bytes)
        self._unpublished: dict[bytes, PLKeyEntry] = {}
        bus.on_tx_complete(self.node_id, self._on_tx_complete)
        self.handlers.update({
            MsgType.DISCOVERY: self._on_discovery,
            MsgType.PUBKEY_N: self._on_session,
            MsgType.SECRET_N: self._on_session,
            MsgType.KEY_DELIVERY: self._on_session,
        })

    @property
    def store(self) -> KeyStore:
        return self.authority.store

    # discovery -------------------------------------------------------------

    def start(self) -> None:
        self._responses = []
        self.discovery_done_at = None
        self.send_msg(MsgType.DISCOVERY, BROADCAST, b"", None)
        self._last_answer = self.now
        self.bus.loop.call_later(self.timing.discovery_quiet_us * 2, self._discovery_check)

    def _on_discovery(self, ev, msg_type, selector, sender) -> None:
        if selector != self.node_id:
            return
        body = ev.payload[2:]
        if self.discovery_done_at is None:
            self._responses.append((sender, body))
            self._last_answer = self.now
        elif sender not in self.progress or self.progress[sender].failed:
            # hot-join after discovery has closed
            rec = collect_discovery([(sender, body)])[0]
            self._enqueue(rec)

    def _discovery_check(self) -> None:
        quiet_until = self._last_answer + self.timing.discovery_quiet_us
        if self.now < quiet_until:
            self.bus.loop.call_at(quiet_until, self._discovery_check)
            return
        self.discovery_done_at = self.now
        try:
            self.records = collect_discovery(self._responses)
        except SimcanError as exc:
            self.discovery_error = exc
            log.warning("discovery failed: %s", exc.code)
            return
        if not self.authority.store.pl_keys:
            self.authority.initialize(self.now)
            self._sync_data_store()
        for rec in self.records:
            self._enqueue(rec)

    def _sync_data_store(self) -> None:
        for table in (self.store.pl_keys, self.store.short_keys):
            for e in table.values():
                self.data_store.install(e, self.now)

    def _on_tx_complete(self, ev: BusEvent) -> None:
        entry = self._unpublished.pop(ev.payload, None)
        if entry is not None:
            self.data_store.install(entry, self.now, self.authority.grace_us)

    def _enqueue(self, rec: DiscoveryRecord) -> None:
        self.authority.register(rec.node, rec.declared_level)
        self.progress[rec.node] = NodeProgress(rec)
        self._queue.append(rec.node)
        if self._active is None:
            self._next()

    # node-by-node provisioning ---------------------------------------------

    def _next(self) -> None:
        self._active = None
        while self._queue:
            node = self._queue.pop(0)
            if not self.progress[node].failed and self.progress[node].done_at is None:
                self._attempt(node)
                return
        if all(p.done_at is not None or p.failed for p in self.progress.values()):
            if self.provisioned_at is None:
                self.provisioned_at = self.now

    def _attempt(self, node: int) -> None:
        p = self.progress[node]
        self._active = node
        p.attempts += 1
        p.session = GatewaySession(node, p.record.declared_level,
                                   self.rng.fork(f"{node}:{p.attempts}:{self.now}"), self.node_id)
        p.sessions.append(p.session)
        out = p.session.start()
        self.send(out, self.timing.proc_us + self.timing.ecdh_us)
        self._arm(node, p.session, out)

    def _arm(self, node: int, session: GatewaySession, frames: list = ()) -> None:
        mark = len(session.history)
        # the answer can only come after our own frames are on the wire
        airtime = sum(self.bus.config.tx_duration_us(len(raw)) for _, raw in frames)
        session.deadline_us = self.now + self.timing.step_timeout_us + airtime
        self.bus.loop.call_at(session.deadline_us, self._timeout, node, session, mark)

    def _timeout(self, node: int, session: GatewaySession, mark: int) -> None:
        p = self.progress[node]
        if p.session is not session or len(session.history) != mark:
            return
        if session.state is SessionState.KEYS_DELIVERED:
            return
        self._fail_attempt(node, "TIMEOUT")

    def _fail_attempt(self, node: int, reason: str) -> None:
        p = self.progress[node]
        if p.session is not None and p.session.state is not SessionState.FAILED:
            p.session.fail(reason)
        if p.attempts >= self.timing.attempts:
            p.failed = True
            log.warning("provisioning of node %#x failed after %d attempts", node, p.attempts)
            self._next()
            return
        backoff = self.timing.backoff_us[p.attempts - 1]
        p.session = None
        self.bus.loop.call_later(backoff, self._attempt, node)

    def _on_session(self, ev, msg_type, selector, sender) -> None:
        if selector != self.node_id:
            return
        p = self.progress.get(sender)
        if msg_type is MsgType.KEY_DELIVERY and p is not None and p.done_at is not None:
            self._on_control(sender, ev.payload)
            return
        if p is None or p.session is None or p.session.state is SessionState.FAILED:
            return
        s = p.session
        try:
            out = s.on_frame(ev.payload)
        except SimcanError as exc:
            self._fail_attempt(sender, exc.code)
            return
        delay = self.timing.proc_us + (self.timing.ecdh_us if msg_type is MsgType.PUBKEY_N else 0)
        if s.state is SessionState.KSH_ESTABLISHED and msg_type is MsgType.SECRET_N:
            out = s.deliver_pl_keys(self.authority.entries_for(p.record.declared_level))
        self.send(out, delay)
        if s.state is SessionState.KEYS_DELIVERED:
            self.k_sh[sender] = s.k_sh
            p.done_at = self.now
            for cb in self.on_provisioned:
                cb(sender)
            self._next()
        else:
            self._arm(sender, s, out)

    def _on_control(self, node: int, raw: bytes) -> None:
        if node not in self.k_sh or node in self.authority.isolated:
            return
        body = decode_secure(raw, self.k_sh[node]).body
        if body[:1] == bytes([OP_RESYNC]) and len(body) >= 3:
            level, short = body[1], bool(body[2])
            if level in self.authority.hierarchy.levels_held(self.progress[node].record.declared_level):
                entry = self.store.get(level, short)
                self.send_msg(MsgType.KEY_DELIVERY, node, encode_entry(entry), self.k_sh[node],
                              self.timing.proc_us)

    # rolling -----------------------------------------------------------------

    def start_roll_timers(self, stagger_us: int = 0) -> None:
        h = self.authority.hierarchy
        for i, lv in enumerate(range(2, h.n_levels + 1)):
            for short in (False, True):
                if short and not h.has_short(lv):
                    continue
                period = h.period_for(lv, short)
                if period <= 0:
                    continue
                self._roll_timers[(lv, short)] = period
                self.bus.loop.call_later(period + i * stagger_us, self._roll_tick, lv, short)

    def _roll_tick(self, level: int, short: bool) -> None:
        period = self._roll_timers.get((level, short))
        if period is None:
            return
        self.roll(level, short)
        self.bus.loop.call_later(period, self._roll_tick, level, short)

    def stop_roll_timers(self) -> None:
        self._roll_timers.clear()

    def roll(self, level: int, short: bool = False) -> PLKeyEntry:
        """Roll one level key now (timer expiry or an explicit event)."""
        old = self.store.get(level, short)
        new = self.authority.roll_key(level, short, self.now)
        self.roll_log.append((self.now, level, new.epoch, short))
        self.broadcast_roll(level, new, old)
        return new

    def broadcast_roll(self, level: int, new: PLKeyEntry, old: PLKeyEntry) -> None:
        if old.status is KeyStatus.DEPRECATED:
            # a deprecated key must not protect its successor
            for node in self.authority.holders(level):
                if node in self.k_sh:
                    self.send_msg(MsgType.DEPRECATE, node, encode_entry(new, F_REPLACE),
                                  self.k_sh[node], self.timing.proc_us)
            self.data_store.install(new, self.now, 0)
            return
        frame = SecureFrame(secure_id(MsgType.KEY_ROLL, level), self.node_id, MsgType.KEY_ROLL,
                            encode_entry(new), self.rng.bytes(16))
        raw = encode_secure(frame, wrap_key(old))
        self._unpublished[raw] = new
        self.send([(frame.id, raw)], self.timing.proc_us)

    # deprecation -----------------------------------------------------------

    def deprecate_node(self, node: int, level: Optional[int] = None):
        """Isolate ``node``: every key it held is replaced, delivered to the
        remaining holders under their own K_SH."""
        if level is None:
            level = self.progress[node].record.declared_level
        plan = self.authority.deprecate(level, node, self.now)
        for step in plan.steps:
            for r in step.recipients:
                if r in self.k_sh:
                    self.send_msg(MsgType.DEPRECATE, r, encode_entry(step.entry, F_REPLACE),
                                  self.k_sh[r], self.timing.proc_us)
        self.authority.commit(plan, self.now)
        for step in plan.steps:
            self.data_store.install(step.entry, self.now, 0)
        self.k_sh.pop(node, None)
        return plan

    # short-key mode ----------------------------------------------------------

    def set_short_mode(self, levels, on: bool = True) -> None:
        levels = sorted(levels)
        for store in (self.store, self.data_store):
            if on:
                store.enter_short_key_mode(levels, self.now)
            else:
                store.exit_short_key_mode(self.now, levels)
        for lv in levels:
            self.send_msg(MsgType.SHORT_KEY, lv, bytes([lv, int(on)]),
                          wrap_key(self.store.get(lv)), self.timing.proc_us)
