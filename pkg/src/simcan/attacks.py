"""Scripted adversaries for the public bus and ground-truth labelling.

Attackers only get a ``BusPort``: read every frame, submit frames, install a
tap. They never see a key store. Hardware replacement is the one exception
that acts on a node, and it only swaps the device secret, as a rework shop
would.
"""

from __future__ import annotations

import collections
import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from simcan.bus import BusEvent, EventKind, TapAction, TapPoint, VirtualBus
from simcan.crypto import RandomSource
from simcan.frames import COUNTER_LEN, COUNTER_MOD, dump_line
from simcan.hwsig import HwVerdict
from simcan.network import MAIN, Network, NetworkConfig, RxRecord

ATTACKER_ID = 0xF0


class AttackKind(enum.Enum):
    MITM_OBD = "MITM_OBD"
    MITM_DOWNSTREAM = "MITM_DOWNSTREAM"
    REPLAY = "REPLAY"
    DOS_FLOOD = "DOS_FLOOD"
    HW_REPLACE = "HW_REPLACE"


class Label(enum.Enum):
    BENIGN = "BENIGN"
    SUPPRESSED = "SUPPRESSED"
    MUTATED = "MUTATED"
    INJECTED = "INJECTED"
    REPLAYED = "REPLAYED"


class RuleAction(enum.Enum):
    PASS = "PASS"
    SUPPRESS = "SUPPRESS"
    MUTATE = "MUTATE"      # targeted change of one data byte
    CORRUPT = "CORRUPT"    # random garbage over the data field


@dataclass(frozen=True)
class MitmRule:
    frame_id: int
    action: RuleAction
    offset: int = 0         # data byte to change, counted after the counter
    value: int = 0xFF


@dataclass
class AttackScript:
    kind: AttackKind
    start_us: int = 0
    end_us: Optional[int] = None
    rules: tuple = ()
    tap_node: Optional[int] = None
    inject_ids: tuple = ()
    inject_period_us: int = 20_000
    inject_offset_us: int = 5_000
    replay_ids: tuple = ()
    replay_delay_us: int = 50_000
    flood_id: int = 0x000
    flood_rate_per_s: float = 0.0
    flood_len: int = 64
    victim: Optional[int] = None
    foreign_k_apk: Optional[bytes] = None
    suppress_reaction: bool = False
    name: str = ""

    def active(self, now: int) -> bool:
        return now >= self.start_us and (self.end_us is None or now < self.end_us)


class BusPort:
    """Everything an attacker on the wire can do, and nothing more."""

    def __init__(self, bus: VirtualBus, node_id: int = ATTACKER_ID):
        self._bus = bus
        self.node_id = node_id
        self._listeners: list[Callable[[BusEvent], None]] = []
        bus.subscribe(node_id, self._deliver)

    @property
    def now(self) -> int:
        return self._bus.loop.now

    def call_at(self, time_us: int, fn, *args) -> None:
        self._bus.loop.call_at(time_us, fn, *args)

    def listen(self, callback: Callable[[BusEvent], None]) -> None:
        self._listeners.append(callback)

    def submit(self, frame_id: int, payload: bytes) -> bool:
        return self._bus.submit(self.node_id, frame_id, payload)

    def tap(self, handler, downstream_of: Optional[int] = None) -> None:
        point = (TapPoint.at_obd(handler) if downstream_of is None
                 else TapPoint.downstream_of(downstream_of, handler))
        self._bus.install_tap(point)

    def _deliver(self, ev: BusEvent) -> None:
        for cb in self._listeners:
            cb(ev)


class Attacker:
    def __init__(self, port: BusPort, script: AttackScript, rng: RandomSource):
        self.port = port
        self.script = script
        self.rng = rng
        self.sent: dict[bytes, Label] = {}     # payloads this attacker put on the wire
        self.last_counter: dict[int, int] = {}
        self.digest_len: dict[int, int] = {}
        port.listen(self._observe)

    def _observe(self, ev: BusEvent) -> None:
        if ev.origin == self.port.node_id or len(ev.payload) < COUNTER_LEN:
            return
        self.last_counter[ev.frame_id] = int.from_bytes(ev.payload[:COUNTER_LEN], "big")

    def _send(self, frame_id: int, payload: bytes, label: Label) -> bool:
        self.sent[payload] = label
        return self.port.submit(frame_id, payload)

    def start(self) -> None:
        pass


class MitmGateway(Attacker):
    """Intercepts frames at the tap and applies the per-id rules; optionally
    injects crafted frames with plausible counters."""

    def start(self) -> None:
        s = self.script
        self.rules = {r.frame_id: r for r in s.rules}
        self.port.tap(self._handle, s.tap_node if s.kind is AttackKind.MITM_DOWNSTREAM else None)
        if s.inject_ids:
            self.port.call_at(max(s.start_us, self.port.now) + s.inject_offset_us, self._inject)

    def _handle(self, ev: BusEvent):
        rule = self.rules.get(ev.frame_id)
        if ev.origin == self.port.node_id or rule is None or not self.script.active(ev.time_us):
            return TapAction.PASS
        if rule.action is RuleAction.SUPPRESS:
            return TapAction.DROP
        if rule.action is RuleAction.MUTATE:
            b = bytearray(ev.payload)
            i = COUNTER_LEN + rule.offset
            b[i] = rule.value if b[i] != rule.value else rule.value ^ 0x01
            return bytes(b)
        if rule.action is RuleAction.CORRUPT:
            b = bytearray(ev.payload)
            n = max(1, len(b) // 2 - COUNTER_LEN)
            b[COUNTER_LEN:COUNTER_LEN + n] = self.rng.bytes(n)
            return bytes(b)
        return TapAction.PASS

    def _inject(self) -> None:
        s = self.script
        if s.end_us is not None and self.port.now >= s.end_us:
            return
        for fid in s.inject_ids:
            counter = (self.last_counter.get(fid, -1) + 1) % COUNTER_MOD
            # no key: data chosen freely, digest is a guess
            payload = counter.to_bytes(COUNTER_LEN, "big") + self.rng.bytes(24) + self.rng.bytes(32)
            self._send(fid, payload, Label.INJECTED)
        self.port.call_at(self.port.now + s.inject_period_us, self._inject)


class ReplayInjector(Attacker):
    """Records frames and puts them back on the wire ``replay_delay_us`` later."""

    def _observe(self, ev: BusEvent) -> None:
        super()._observe(ev)
        s = self.script
        if ev.origin == self.port.node_id or not s.active(ev.time_us):
            return
        if s.replay_ids and ev.frame_id not in s.replay_ids:
            return
        self.port.call_at(ev.time_us + s.replay_delay_us, self._replay, ev.frame_id, ev.payload)

    def _replay(self, frame_id: int, payload: bytes) -> None:
        self._send(frame_id, payload, Label.REPLAYED)


class FloodGenerator(Attacker):
    """Back-to-back frames on the lowest id: wins every arbitration."""

    def start(self) -> None:
        if self.script.flood_rate_per_s > 0:
            self.port.call_at(max(self.script.start_us, self.port.now), self._tick)

    def _tick(self) -> None:
        s = self.script
        if s.end_us is not None and self.port.now >= s.end_us:
            return
        payload = self.rng.bytes(s.flood_len)
        self._send(s.flood_id, payload, Label.INJECTED)
        gap = max(1, round(1_000_000 / s.flood_rate_per_s))
        self.port.call_at(self.port.now + gap, self._tick)


ATTACKERS = {
    AttackKind.MITM_OBD: MitmGateway,
    AttackKind.MITM_DOWNSTREAM: MitmGateway,
    AttackKind.REPLAY: ReplayInjector,
    AttackKind.DOS_FLOOD: FloodGenerator,
}


# ground truth ------------------------------------------------------------------

def label_deliveries(events: list[BusEvent], sent: dict[bytes, Label],
                     attacker_id: int = ATTACKER_ID) -> dict[tuple[int, int], Label]:
    """Label every (seq, receiver) delivery from the wire record alone."""
    original = {ev.seq: ev.payload for ev in events if ev.kind is EventKind.TX_END}
    out: dict[tuple[int, int], Label] = {}
    for ev in events:
        if ev.receiver is None or ev.receiver == attacker_id:
            continue
        if ev.kind is EventKind.DROPPED:
            out[(ev.seq, ev.receiver)] = Label.SUPPRESSED
        elif ev.kind is EventKind.RX_DELIVER:
            if ev.origin == attacker_id:
                out[(ev.seq, ev.receiver)] = sent.get(ev.payload, Label.INJECTED)
            elif ev.payload != original.get(ev.seq):
                out[(ev.seq, ev.receiver)] = Label.MUTATED
            else:
                out[(ev.seq, ev.receiver)] = Label.BENIGN
    return out


def frame_labels(events: list[BusEvent], labels: dict[tuple[int, int], Label]) -> dict[int, Label]:
    """One label per transmitted frame: the most hostile any receiver saw."""
    order = list(Label)
    out: dict[int, Label] = {}
    for (seq, _), lab in labels.items():
        cur = out.get(seq, Label.BENIGN)
        out[seq] = max(cur, lab, key=order.index)
    for ev in events:
        if ev.kind is EventKind.TX_END:
            out.setdefault(ev.seq, Label.BENIGN)
    return out


def labeled_dump(events: list[BusEvent], labels: dict[int, Label]) -> list[str]:
    return [dump_line(ev.time_us, ev.bus, ev.frame_id, ev.payload, labels[ev.seq].value)
            for ev in events if ev.kind is EventKind.TX_END]


@dataclass
class DetectionMetrics:
    by_label: dict[str, dict[str, int]]
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @property
    def precision(self) -> float:
        d = self.true_positive + self.false_positive
        return self.true_positive / d if d else 1.0

    @property
    def recall(self) -> float:
        d = self.true_positive + self.false_negative
        return self.true_positive / d if d else 1.0

    def accepted(self, label: Label) -> int:
        return self.by_label.get(label.value, {}).get("accepted", 0)

    def rejected(self, label: Label) -> int:
        return self.by_label.get(label.value, {}).get("rejected", 0)

    def to_dict(self) -> dict:
        return {"by_label": self.by_label, "tp": self.true_positive, "fp": self.false_positive,
                "fn": self.false_negative, "tn": self.true_negative,
                "precision": round(self.precision, 6), "recall": round(self.recall, 6)}


def detection_metrics(labels: dict[tuple[int, int], Label], rx_log: list[RxRecord],
                      secure_only: bool = True) -> DetectionMetrics:
    """Ground truth against receiver decisions. A rejection is a detection."""
    by: dict[str, dict[str, int]] = collections.defaultdict(lambda: {"accepted": 0, "rejected": 0})
    tp = fp = fn = tn = 0
    for r in rx_log:
        if secure_only and r.level is None:
            continue
        lab = labels.get((r.seq, r.receiver))
        if lab is None:
            continue
        by[lab.value]["accepted" if r.accepted else "rejected"] += 1
        hostile = lab is not Label.BENIGN
        if hostile and not r.accepted:
            tp += 1
        elif hostile:
            fn += 1
        elif not r.accepted:
            fp += 1
        else:
            tn += 1
    # suppressed frames never reach a verifier; they are counted, not scored
    dropped = sum(1 for lab in labels.values() if lab is Label.SUPPRESSED)
    if dropped:
        by[Label.SUPPRESSED.value] = {"accepted": 0, "rejected": 0, "dropped": dropped}
    return DetectionMetrics({k: dict(v) for k, v in sorted(by.items())}, tp, fp, fn, tn)


# runners -------------------------------------------------------------------------

@dataclass
class AttackReport:
    script: AttackScript
    labels: dict[tuple[int, int], Label]
    frame_labels: dict[int, Label]
    metrics: DetectionMetrics
    bus_load: float
    overloads: int
    deadline_misses: int
    mac_us: float
    hw: dict = field(default_factory=dict)
    frame_ids: dict = field(default_factory=dict)     # seq -> frame id

    def labels_by_id(self) -> dict[int, set]:
        out: dict[int, set] = collections.defaultdict(set)
        for seq, lab in self.frame_labels.items():
            out[self.frame_ids[seq]].add(lab)
        return dict(out)

    def to_dict(self) -> dict:
        counts = collections.Counter(l.value for l in self.frame_labels.values())
        return {"attack": self.script.kind.value, "name": self.script.name,
                "frame_labels": dict(sorted(counts.items())), "detection": self.metrics.to_dict(),
                "bus_load": round(self.bus_load, 6), "overloads": self.overloads,
                "deadline_misses": self.deadline_misses, "mac_us": round(self.mac_us, 3),
                "hw": self.hw}


def mac_time_us(net: Network, start_us: int, end_us: int) -> float:
    """Real-time µs all nodes spent on MAC checks within a window."""
    period = net.config.task_period_us
    k0, k1 = start_us // period, end_us // period
    return sum(c for dn in net.data.values() for k, c in dn.rt_cost.items() if k0 <= k < k1)


def run_attack(config: NetworkConfig, script: AttackScript, horizon_us: int,
               network: Optional[Network] = None, hw_period_us: int = 100_000) -> AttackReport:
    """Provision, start traffic, let the attacker act until ``horizon_us``
    after provisioning, then score the receivers against ground truth.

    A prepared ``network`` that is already provisioned starts from its
    current time."""
    net = network or Network(config)
    t0 = net.loop.now if net.gateway.provisioned_at is not None else net.provision()
    script = dataclasses.replace(script, start_us=t0 + script.start_us,
                                 end_us=None if script.end_us is None else t0 + script.end_us)
    hw: dict = {}
    attacker = None
    if script.kind is AttackKind.HW_REPLACE:
        net.enable_hw_signature(hw_period_us, react=not script.suppress_reaction,
                                starvation_us=0)
        net.loop.call_at(script.start_us, _swap, net, script)
    else:
        port = BusPort(net.buses[MAIN])
        attacker = ATTACKERS[script.kind](port, script, net.rng.fork("attacker"))
        attacker.start()
    net.start_traffic()
    net.run_until(t0 + horizon_us)
    events = net.buses[MAIN].events
    labels = label_deliveries(events, attacker.sent if attacker else {})
    flabels = frame_labels(events, labels)
    metrics = detection_metrics(labels, net.rx_log)
    if script.kind is AttackKind.HW_REPLACE:
        hw = hw_summary(net, script, hw_period_us)
    bus = net.buses[MAIN]
    return AttackReport(script, labels, flabels, metrics,
                        bus.bus_load(horizon_us), bus.overloads,
                        net.frame_deadline_misses(t0), mac_time_us(net, t0, t0 + horizon_us), hw,
                        {ev.seq: ev.frame_id for ev in events if ev.kind is EventKind.TX_END})


def _swap(net: Network, script: AttackScript) -> None:
    key = script.foreign_k_apk
    if key is None:
        key = net.rng.fork("rework").bytes(32)
    net.swap_hardware(script.victim, key)


def hw_summary(net: Network, script: AttackScript, period_us: int) -> dict:
    """Challenge outcomes around the swap of ``script.victim``."""
    log = net.hwlog
    victim = script.victim
    gw = net.gateway.node_id
    violations = [o for o in log.outcomes.values() if o.verdict is HwVerdict.VIOLATION]
    flagged = [o for o in violations if victim in o.culprits(gw)]
    false_pos = [o for o in violations if set(o.culprits(gw)) - {victim}]
    early = [o for o in flagged if o.challenge.issued_us < script.start_us]
    first = min((o.challenge.issued_us for o in flagged if o.challenge.issued_us >= script.start_us),
                default=None)
    return {
        "victim": victim,
        "swap_us": script.start_us,
        "challenges": len(log.outcomes),
        "flagged_at_us": first,
        "detect_latency_us": None if first is None else first - script.start_us,
        "within_one_period": first is not None and first - script.start_us <= period_us,
        "false_positives": len(false_pos) + len(early),
        "isolated": victim in net.authority.isolated,
        # the reworked node loses track of deprecations once isolated; only honest suspicion counts
        "suspects": sorted({v for _, v, _ in log.suspects if v != victim}),
    }


def with_mitigations(config: NetworkConfig) -> NetworkConfig:
    """Same network, every node speculating (short-key mode is switched at run time)."""
    nodes = [dataclasses.replace(n, speculation=True) for n in config.nodes]
    return dataclasses.replace(config, nodes=nodes)


def run_dos(config: NetworkConfig, script: AttackScript, horizon_us: int,
            mitigations: bool = False) -> AttackReport:
    cfg = with_mitigations(config) if mitigations else config
    net = Network(cfg)
    if mitigations:
        t0 = net.provision()
        levels = [lv for lv in range(2, cfg.hierarchy.n_levels + 1) if cfg.hierarchy.has_short(lv)]
        net.gateway.set_short_mode(levels, True)
        net.run_until(t0 + 20_000)
    return run_attack(cfg, script, horizon_us, network=net)
