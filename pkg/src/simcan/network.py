"""A whole vehicle network: buses, gateway, secure and legacy nodes, and the
data-plane pipeline (sign, transmit, verify, account CPU time).

Frames are configured statically: each secure frame id has one sender and
one privilege level. Every node holding that level's key on the same public
segment is an intended receiver.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from simcan import crypto
from simcan.bus import BusConfig, BusEvent, EventKind, EventLoop, VirtualBus
from simcan.crypto import KeyKind, KeyMaterial, RandomSource
from simcan.errors import (
    FrameTooShort, MalformedFrame, NoSuchLevel, NotProvisioned, PrivilegeViolation, SimcanError,
)
from simcan.frames import (
    COUNTER_LEN, COUNTER_MOD, PUBLIC_MIN, Bus, FrameId, PublicFrame, decode_public,
    encode_public, sign_public,
)
from simcan.hwsig import ChallengeInitiator, ChallengeResponder, HwSigLog
from simcan.keys import KeyAuthority, KeyHierarchy, KeyStore, PLKeyEntry
from simcan.provisioning import SGTW_ID, GatewayAgent, NodeAgent, Timing
from simcan.sched import (
    CostModel, CounterState, SpeculationCache, SteadyFrame, TaskSpec, UtilizationReport,
    Verdict, VerifyResult, background_speculate, run_schedule, verify_frame,
)

log = logging.getLogger(__name__)

MAIN = "PUBLIC"
SUB = "SUB"

VERIFY_PRIORITY = 10


class Role(enum.Enum):
    SGTW = "SGTW"
    SECURE_NODE = "SECURE_NODE"
    SUBDOMAIN_GATEWAY = "SUBDOMAIN_GATEWAY"
    NON_SECURE = "NON_SECURE"


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    level: Optional[int] = None
    role: Role = Role.SECURE_NODE
    speculation: bool = False
    segment: str = MAIN
    name: str = ""


@dataclass(frozen=True)
class FrameSpec:
    frame_id: int
    sender: int
    level: Optional[int] = None     # None: unsigned legacy frame
    period_us: int = 10_000         # 0: event-driven only
    data_len: int = 24
    steady: bool = False
    change_prob: float = 0.0        # chance a steady frame's data changes per send
    offset_us: int = 0
    segment: str = MAIN

    @property
    def secure(self) -> bool:
        return self.level is not None


@dataclass(frozen=True)
class RouteSpec:
    """Forward ``frame_id`` across the sub-domain gateway, re-signed at
    ``dst_level`` on the other segment."""

    frame_id: int
    src_segment: str
    dst_level: int


@dataclass
class NetworkConfig:
    nodes: list[NodeSpec]
    frames: list[FrameSpec] = field(default_factory=list)
    hierarchy: KeyHierarchy = field(default_factory=KeyHierarchy)
    public_bus: BusConfig = field(default_factory=lambda: BusConfig(Bus.PUBLIC, 500_000, 2_000_000, name=MAIN))
    secure_bus: BusConfig = field(default_factory=lambda: BusConfig(Bus.SECURE, 500_000, 500_000, name="SECURE"))
    sub_bus: BusConfig = field(default_factory=lambda: BusConfig(Bus.PUBLIC, 500_000, 500_000, name=SUB))
    routes: list[RouteSpec] = field(default_factory=list)
    cost_model: CostModel = field(default_factory=CostModel)
    cmac: bool = True
    rolling_counter: bool = True
    window: int = 8
    task_period_us: int = 25_000
    seed: int = 1
    grace_us: Optional[int] = None
    k_apk: bytes = b""
    timing: Timing = field(default_factory=Timing)


@dataclass(frozen=True)
class RxRecord:
    time_us: int
    segment: str
    receiver: int
    frame_id: int
    origin: int
    seq: int
    accepted: bool
    verdict: str
    reason: Optional[str]
    cost_us: float
    level: Optional[int]
    epoch: Optional[int]


@dataclass(frozen=True)
class TxRecord:
    time_us: int
    segment: str
    sender: int
    frame_id: int
    counter: int
    queued: bool
    payload: bytes


@dataclass(frozen=True)
class Violation:
    time_us: int
    receiver: int
    frame_id: int
    reason: str


class DataNode:
    """Public-bus side of one node: signing, verification, CPU accounting."""

    def __init__(self, net: "Network", spec: NodeSpec, store: Optional[KeyStore]):
        self.net = net
        self.spec = spec
        self.node_id = spec.node_id
        self.store = store
        self.tx_counters: dict[int, int] = {}
        self.counters = CounterState(net.config.window if net.config.rolling_counter else None)
        self.cache: Optional[SpeculationCache] = SpeculationCache() if spec.speculation else None
        self.violations: list[Violation] = []
        self.rt_cost: dict[int, float] = {}     # task activation -> µs of MAC work
        self.bg_cost: dict[int, float] = {}
        self.segments: list[str] = []
        self.compromised_by: Optional[Callable] = None

    @property
    def now(self) -> int:
        return self.net.loop.now

    # -- transmit --------------------------------------------------------------

    def send_signed(self, frame_id: int, data: bytes, segment: Optional[str] = None) -> PublicFrame:
        spec = self.net.registry(segment or self.spec.segment).get(frame_id)
        if spec is None or not spec.secure:
            raise NoSuchLevel(f"frame {frame_id:#x} is not a configured secure frame")
        if self.store is None or not self.store.holds(spec.level):
            raise NotProvisioned(f"node {self.node_id:#x} holds no level {spec.level} key")
        entry = self.store.select_key(spec.level)
        counter = self.tx_counters.get(frame_id, 0)
        data = self._fit(data, entry.algo.digest_len)
        frame = sign_public(FrameId(frame_id), counter, data, entry.algo, entry.key)
        self.tx_counters[frame_id] = (counter + 1) % COUNTER_MOD
        # the sender hears its own id too; a copy of this frame must look stale to it
        self.counters.accept(frame_id, counter)
        self._submit(segment or self.spec.segment, frame_id, encode_public(frame), counter)
        return frame

    def send_plain(self, frame_id: int, data: bytes, segment: Optional[str] = None) -> bytes:
        self._submit(segment or self.spec.segment, frame_id, data, None)
        return data

    @staticmethod
    def _fit(data: bytes, digest_len: int) -> bytes:
        # short digests can push a frame under the minimum payload; pad the data
        short = PUBLIC_MIN - (COUNTER_LEN + len(data) + digest_len)
        return data + bytes(short) if short > 0 else data

    def _submit(self, segment: str, frame_id: int, payload: bytes, counter: Optional[int]) -> None:
        ok = self.net.buses[segment].submit(self.node_id, frame_id, payload)
        self.net.tx_log.append(TxRecord(self.now, segment, self.node_id, frame_id,
                                        -1 if counter is None else counter, ok, payload))

    # -- receive ---------------------------------------------------------------

    def on_frame(self, segment: str, ev: BusEvent) -> None:
        spec = self.net.registry(segment).get(ev.frame_id)
        if spec is None or not spec.secure:
            # plaintext legacy traffic passes through
            self._log(segment, ev, True, "PASS_THROUGH", None, 0.0, None, None)
            return
        if self.store is None or not self.store.holds(spec.level):
            return
        result = self.verify(spec, ev.payload)
        self._account(result.cost_us)
        self._log(segment, ev, result.accepted, result.verdict.value,
                  result.reason.value if result.reason else None, result.cost_us, spec.level,
                  result.key_epoch)
        if not result.accepted:
            v = Violation(self.now, self.node_id, ev.frame_id,
                          result.reason.value if result.reason else "REJECTED")
            self.violations.append(v)
            self.net.violation_log.append(v)
            return
        route = self.net.route_for(segment, ev.frame_id)
        if route is not None and self.spec.role is Role.SUBDOMAIN_GATEWAY:
            self.net.route_subdomain(self, segment, ev.payload, spec, route)

    def candidates(self, level: int) -> list[PLKeyEntry]:
        return self.store.candidates(level, self.now, self.net.grace_us)

    def verify(self, spec: FrameSpec, payload: bytes) -> VerifyResult:
        cfg = self.net.config
        try:
            keys = self.candidates(spec.level)
        except (NoSuchLevel, PrivilegeViolation):
            return VerifyResult(Verdict.REJECTED, 0.0, None)
        if not cfg.cmac:
            # integrity check disabled: only the counter (if any) is looked at
            try:
                frame = decode_public(payload, keys[0].algo.digest_len_bits, spec.frame_id)
            except MalformedFrame:
                return VerifyResult(Verdict.REJECTED, 0.0, None)
            if not self.counters.fresh(spec.frame_id, frame.counter):
                from simcan.sched import RejectReason
                return VerifyResult(Verdict.REJECTED, 0.0, RejectReason.REPLAY)
            self.counters.accept(spec.frame_id, frame.counter)
            return VerifyResult(Verdict.AUTHENTIC_RECOMPUTED, 0.0, key_epoch=keys[0].epoch)
        registered = spec.steady and self.cache is not None
        total = 0.0
        last = None
        lengths = []
        for e in keys:
            if e.algo.digest_len not in lengths:
                lengths.append(e.algo.digest_len)
        for n in lengths:
            group = [e for e in keys if e.algo.digest_len == n]
            try:
                frame = decode_public(payload, n * 8, spec.frame_id)
            except MalformedFrame:
                continue
            res = verify_frame(frame, group, self.cache if n == keys[0].algo.digest_len else None,
                               self.counters, cfg.cost_model,
                               registered=registered and n == keys[0].algo.digest_len)
            total += res.cost_us
            last = res
            if res.accepted or (res.reason is not None and res.reason.value == "REPLAY"):
                break
        if last is None:
            return VerifyResult(Verdict.REJECTED, total, None)
        return VerifyResult(last.verdict, total, last.reason, last.key_epoch)

    def _account(self, cost_us: float) -> None:
        k = self.now // self.net.config.task_period_us
        self.rt_cost[k] = self.rt_cost.get(k, 0.0) + cost_us

    def _log(self, segment, ev, accepted, verdict, reason, cost, level, epoch) -> None:
        self.net.rx_log.append(RxRecord(ev.time_us, segment, self.node_id, ev.frame_id, ev.origin,
                                        ev.seq, accepted, verdict, reason, cost, level, epoch))

    # -- background speculation --------------------------------------------------

    def steady_frames(self) -> list[SteadyFrame]:
        out = []
        for seg in self.segments:
            for spec in self.net.registry(seg).values():
                if (spec.steady and spec.secure and spec.sender != self.node_id
                        and self.store is not None and self.store.holds(spec.level)):
                    out.append(SteadyFrame(spec.frame_id, spec.level, self.net.steady_data[spec.frame_id]))
        return out

    def background_tick(self) -> None:
        """End of a task period: idle time left over feeds the speculation cache."""
        period = self.net.config.task_period_us
        k = self.now // period - 1
        idle = max(0.0, period - self.rt_cost.get(k, 0.0))
        if self.cache is None or self.store is None:
            return
        spent = background_speculate(self.cache, self.steady_frames(), idle,
                                     self.store.select_key, self.counters, self.net.config.cost_model)
        self.bg_cost[k + 1] = self.bg_cost.get(k + 1, 0.0) + spent

    def invalidate_level(self, level: int) -> None:
        if self.cache is None:
            return
        ids = [s.frame_id for seg in self.segments for s in self.net.registry(seg).values()
               if s.level == level]
        self.cache.invalidate(ids)

    def utilization(self, start_us: int = 0, end_us: Optional[int] = None) -> UtilizationReport:
        period = self.net.config.task_period_us
        end = self.now if end_us is None else end_us
        k0 = start_us // period
        n = max(0, (end - start_us) // period)
        rt = lambda k: self.rt_cost.get(k0 + k, 0.0)
        bg = lambda k: self.bg_cost.get(k0 + k, 0.0)
        tasks = [TaskSpec("verify", VERIFY_PRIORITY, period, rt),
                 TaskSpec("background", 0, period, bg)]
        report, _ = run_schedule(tasks, n * period)
        if self.cache is not None:
            report.speculation = {"hits": self.cache.hits, "misses": self.cache.misses}
        return report


class Network:
    def __init__(self, config: NetworkConfig):
        self.config = config
        self.loop = EventLoop()
        self.rng = RandomSource(config.seed)
        self.buses: dict[str, VirtualBus] = {MAIN: VirtualBus(config.public_bus, self.loop)}
        if any(n.segment == SUB for n in config.nodes):
            self.buses[SUB] = VirtualBus(config.sub_bus, self.loop)
        self.secure_bus = VirtualBus(config.secure_bus, self.loop)
        worst = config.public_bus.tx_duration_us(64) * config.public_bus.queue_depth
        self.grace_us = config.grace_us if config.grace_us is not None else 2 * worst
        self.rx_log: list[RxRecord] = []
        self.tx_log: list[TxRecord] = []
        self.violation_log: list[Violation] = []
        self.unrecoverable: list[tuple[int, int]] = []
        self._registry: dict[str, dict[int, FrameSpec]] = {MAIN: {}, SUB: {}}
        for f in config.frames:
            if f.frame_id in self._registry[f.segment]:
                raise ValueError(f"frame id {f.frame_id:#x} configured twice on {f.segment}")
            self._registry[f.segment][f.frame_id] = f
        self._routes = {(r.src_segment, r.frame_id): r for r in config.routes}
        for r in config.routes:
            gw = self.subdomain_gateway()
            dst = SUB if r.src_segment == MAIN else MAIN
            self._registry[dst].setdefault(r.frame_id, FrameSpec(r.frame_id, gw, r.dst_level, segment=dst))
        self.steady_data = {f.frame_id: self.rng.fork(f"steady{f.frame_id}").bytes(f.data_len)
                            for f in config.frames if f.steady}
        self._data_rng = self.rng.fork("data")
        ids = [n.node_id for n in config.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        if sum(1 for n in config.nodes if n.role is Role.SGTW) != 1:
            raise ValueError("exactly one SGTW per network")
        self.k_apk = KeyMaterial(config.k_apk or self.rng.fork("kapk").bytes(32), KeyKind.CARMAKER_KEY)
        self.hwlog = HwSigLog()
        self.authority = KeyAuthority(config.hierarchy, self.rng.fork("authority"), grace_us=self.grace_us)
        self.gateway: Optional[GatewayAgent] = None
        self.agents: dict[int, NodeAgent] = {}
        self.data: dict[int, DataNode] = {}
        self.responders: dict[int, ChallengeResponder] = {}
        self.initiator: Optional[ChallengeInitiator] = None
        self._build()

    # -- construction --------------------------------------------------------------

    def registry(self, segment: str) -> dict[int, FrameSpec]:
        return self._registry.setdefault(segment, {})

    def route_for(self, segment: str, frame_id: int) -> Optional[RouteSpec]:
        return self._routes.get((segment, frame_id))

    def subdomain_gateway(self) -> int:
        for n in self.config.nodes:
            if n.role is Role.SUBDOMAIN_GATEWAY:
                return n.node_id
        raise ValueError("routes need a SUBDOMAIN_GATEWAY node")

    def _build(self) -> None:
        cfg = self.config
        for spec in cfg.nodes:
            if spec.role is Role.SGTW:
                self.gateway = GatewayAgent(self.secure_bus, self.authority, self.rng.fork("sgtw"),
                                            cfg.timing, spec.node_id)
                store = self.gateway.data_store
            elif spec.role is Role.NON_SECURE:
                store = None
            else:
                agent = NodeAgent(spec.node_id, spec.level, self.secure_bus,
                                  self.rng.fork(f"node{spec.node_id}"), self.k_apk,
                                  sub_member=spec.segment == SUB, timing=cfg.timing,
                                  grace_us=self.grace_us, gw_id=self._sgtw_id())
                self.agents[spec.node_id] = agent
                store = agent.store
            dn = DataNode(self, spec, store)
            self.data[spec.node_id] = dn
            segments = [spec.segment]
            if spec.role is Role.SUBDOMAIN_GATEWAY and SUB in self.buses:
                segments = [MAIN, SUB]
            dn.segments = segments
            for seg in segments:
                self.buses[seg].subscribe(spec.node_id, lambda ev, d=dn, s=seg: d.on_frame(s, ev))
            if spec.node_id in self.agents:
                self.agents[spec.node_id].on_keys_changed.append(dn.invalidate_level)

    def _sgtw_id(self) -> int:
        return next(n.node_id for n in self.config.nodes if n.role is Role.SGTW)

    # -- lifecycle -----------------------------------------------------------------

    def provision(self, limit_us: int = 5_000_000) -> int:
        """Run discovery and key delivery; returns the completion time."""
        self.gateway.start()
        while self.gateway.provisioned_at is None and self.loop.pending() and self.loop.now < limit_us:
            self.loop.run(min(limit_us, self.loop.now + 10_000))
        if self.gateway.discovery_error is not None:
            raise self.gateway.discovery_error
        if self.gateway.provisioned_at is None:
            raise NotProvisioned("provisioning did not finish")
        return self.gateway.provisioned_at

    def start_traffic(self, until_us: Optional[int] = None) -> None:
        start = self.loop.now
        for f in self.config.frames:
            if f.period_us > 0:     # zero period: event-driven, never sent on a timer
                self.loop.call_at(start + f.offset_us, self._periodic_send, f, until_us)
        for dn in self.data.values():
            if dn.cache is not None:
                period = self.config.task_period_us
                first = (start // period + 1) * period
                self.loop.call_at(first, self._bg_tick, dn)

    def _bg_tick(self, dn: DataNode) -> None:
        dn.background_tick()
        self.loop.call_later(self.config.task_period_us, self._bg_tick, dn)

    def frame_data(self, f: FrameSpec) -> bytes:
        if f.steady:
            if f.change_prob and self._data_rng.random() < f.change_prob:
                return self._data_rng.bytes(f.data_len)
            return self.steady_data[f.frame_id]
        return self._data_rng.bytes(f.data_len)

    def _periodic_send(self, f: FrameSpec, until_us: Optional[int]) -> None:
        if until_us is not None and self.loop.now >= until_us:
            return
        dn = self.data[f.sender]
        data = self.frame_data(f)
        try:
            if f.secure:
                dn.send_signed(f.frame_id, data, f.segment)
            else:
                dn.send_plain(f.frame_id, data, f.segment)
        except SimcanError as exc:
            log.debug("node %#x could not send %#x: %s", f.sender, f.frame_id, exc.code)
        self.loop.call_later(f.period_us, self._periodic_send, f, until_us)

    def run_until(self, time_us: int) -> None:
        self.loop.run_until(time_us)

    def enable_hw_signature(self, period_us: int = 100_000, response_timeout_us: int = 10_000,
                            react: bool = True, starvation_us: int = 0) -> None:
        self.initiator = ChallengeInitiator(self.gateway, self.k_apk, self.rng.fork("challenge"),
                                            self.hwlog, period_us, response_timeout_us, react,
                                            on_violation=self.on_violation)
        for node_id, agent in self.agents.items():
            peers = [n.node_id for n in self.config.nodes if n.level == agent.level
                     and n.role is not Role.SGTW and n.role is not Role.NON_SECURE]
            r = ChallengeResponder(agent, self.k_apk, self.hwlog, peers, starvation_us,
                                   response_timeout_us=response_timeout_us)
            self.responders[node_id] = r
            if starvation_us:
                r.start_monitor(period_us)
        self.initiator.start()

    # -- reactions ---------------------------------------------------------------------

    def on_violation(self, node: int, level: int):
        """Isolate ``node``: deprecate every key it held from ``level`` down."""
        if node == self.gateway.node_id:
            log.error("violation evidence against the SGTW itself: UNRECOVERABLE")
            self.unrecoverable.append((self.loop.now, level))
            return None
        return self.gateway.deprecate_node(node, level)

    def swap_hardware(self, node: int, k_apk: Optional[bytes], silent: bool = False) -> None:
        """Replace a node's hardware: same software and flashed keys, other K_apk."""
        key = KeyMaterial(k_apk, KeyKind.CARMAKER_KEY) if k_apk is not None else None
        self.agents[node].store.k_apk = key
        if node in self.responders:
            self.responders[node].k_apk = key
            self.responders[node].silent = silent

    # -- sub-domain routing --------------------------------------------------------------

    def route_subdomain(self, gw: DataNode, segment: str, payload: bytes, spec: FrameSpec,
                        route: RouteSpec) -> Optional[PublicFrame]:
        """Re-sign a verified frame for the other segment."""
        keys = gw.candidates(spec.level)
        frame = None
        for e in keys:
            try:
                frame = decode_public(payload, e.algo.digest_len_bits, spec.frame_id)
                break
            except MalformedFrame:
                continue
        if frame is None:
            return None
        dst = SUB if segment == MAIN else MAIN
        data = frame.data
        entry = gw.store.select_key(route.dst_level)
        cap = 64 - COUNTER_LEN - entry.algo.digest_len
        return gw.send_signed(route.frame_id, data[:cap], dst)

    # -- measurements ----------------------------------------------------------------

    def receivers_of(self, frame_id: int, segment: str = MAIN) -> list[int]:
        spec = self.registry(segment).get(frame_id)
        out = []
        for dn in self.data.values():
            if segment not in dn.segments or dn.node_id == (spec.sender if spec else None):
                continue
            if spec is None or not spec.secure:
                out.append(dn.node_id)
            elif dn.store is not None and dn.store.holds(spec.level):
                out.append(dn.node_id)
        return sorted(out)

    def frame_deadline_misses(self, start_us: int = 0, end_us: Optional[int] = None) -> int:
        """Frame instances not on the wire within one period of their release."""
        end = self.loop.now if end_us is None else end_us
        specs = {(f.segment, f.frame_id): f for f in self.config.frames}
        done: dict[tuple, list[int]] = {}
        for seg, bus in self.buses.items():
            for ev in bus.events:
                if ev.kind is EventKind.TX_END:
                    done.setdefault((seg, ev.origin, ev.frame_id, ev.submitted_us), []).append(ev.time_us)
        misses = 0
        for tx in self.tx_log:
            f = specs.get((tx.segment, tx.frame_id))
            if f is None or tx.sender != f.sender or not start_us <= tx.time_us < end - f.period_us:
                continue
            if not tx.queued:
                misses += 1
                continue
            ends = done.get((tx.segment, tx.sender, tx.frame_id, tx.time_us))
            if not ends or min(ends) > tx.time_us + f.period_us:
                misses += 1
        return misses
