"""Fixed-priority preemptive task scheduling and speculative MAC verification.

Tasks follow the OSEK model: the highest-priority READY task runs, equal
priorities are served in activation order, and priority 0 is the background
task that only gets the CPU when nothing else is ready. Time inside the
scheduler is kept in integer nanoseconds so fractional-microsecond costs stay
exact and reproducible.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

from simcan import crypto
from simcan.crypto import MacAlgo
from simcan.frames import COUNTER_MOD, PublicFrame, mac_input
from simcan.keys import KeyStatus, PLKeyEntry

NS = 1000
BACKGROUND = 0
DEFAULT_WINDOW = 8


# -- cost model ---------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """MAC cost = c0 + c1 * digest_bits + c2 * 16-byte payload blocks (µs)."""

    c0: float = 3.2
    c1: float = 0.1
    c2: float = 0.8
    compare_cost_us: float = 1.4
    overrides: tuple = ()   # ((frame_id, µs), ...)

    def __post_init__(self):
        if min(self.c0, self.c1, self.c2, self.compare_cost_us) < 0:
            raise ValueError("costs must be non-negative")
        if any(v < 0 for _, v in self.overrides):
            raise ValueError("costs must be non-negative")

    def mac_cost_us(self, digest_bits: int, payload_len: int, frame_id: Optional[int] = None) -> float:
        if frame_id is not None:
            for fid, cost in self.overrides:
                if fid == frame_id:
                    return cost
        blocks = -(-payload_len // 16)
        return self.c0 + self.c1 * digest_bits + self.c2 * blocks

    def with_overrides(self, mapping: dict[int, float]) -> "CostModel":
        return CostModel(self.c0, self.c1, self.c2, self.compare_cost_us,
                         tuple(sorted(mapping.items())))


# -- scheduler ----------------------------------------------------------------

WorkSpec = Union[float, Sequence[float], Callable[[int], float]]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    priority: int
    period_us: int = 0
    work: WorkSpec = 0.0
    offset_us: int = 0

    def __post_init__(self):
        if self.priority < 0:
            raise ValueError("priority must be >= 0")
        if self.period_us < 0 or self.offset_us < 0:
            raise ValueError("period and offset must be >= 0")

    def cost_us(self, k: int) -> float:
        """Work of the k-th activation in µs."""
        w = self.work
        if callable(w):
            return float(w(k))
        if isinstance(w, (int, float)):
            return float(w)
        return float(sum(w))


class TraceEvent(enum.Enum):
    START = "START"
    PREEMPT = "PREEMPT"
    END = "END"
    MISS = "MISS"


@dataclass(frozen=True)
class TraceRecord:
    time_ns: int
    task: str
    event: TraceEvent

    @property
    def time_us(self) -> float:
        return self.time_ns / NS


@dataclass
class UtilizationReport:
    horizon_us: float
    busy_us: dict[str, float]
    realtime_cpu_pct: float
    background_cpu_pct: float
    deadline_misses: dict[str, int]
    activations: dict[str, int]
    speculation: dict[str, int] = field(default_factory=lambda: {"hits": 0, "misses": 0})

    @property
    def total_misses(self) -> int:
        return sum(self.deadline_misses.values())

    def to_dict(self) -> dict:
        return {
            "horizon_us": self.horizon_us,
            "busy_us": {k: round(v, 6) for k, v in sorted(self.busy_us.items())},
            "realtime_cpu_pct": round(self.realtime_cpu_pct, 6),
            "background_cpu_pct": round(self.background_cpu_pct, 6),
            "deadline_misses": dict(sorted(self.deadline_misses.items())),
            "activations": dict(sorted(self.activations.items())),
            "speculation": dict(self.speculation),
        }


@dataclass(order=True)
class _Job:
    neg_priority: int
    release: int
    seq: int
    task: TaskSpec = field(compare=False)
    remaining: int = field(compare=False)
    deadline: Optional[int] = field(compare=False)
    index: int = field(compare=False)
    missed: bool = field(default=False, compare=False)


def _to_ns(us: float) -> int:
    return int(round(us * NS))


def run_schedule(tasks: Sequence[TaskSpec], horizon_us: int,
                 cost_model: Optional[CostModel] = None) -> tuple[UtilizationReport, list[TraceRecord]]:
    """Simulate ``tasks`` for ``horizon_us``.

    A periodic job whose work is unfinished at its next release records a
    MISS there and keeps running (its backlog is not dropped). Event-driven
    tasks (period 0) are activated once at their offset.
    """
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError("task names must be unique")
    horizon = _to_ns(horizon_us)
    seq = itertools.count()
    releases: list = []
    for order, t in enumerate(tasks):
        heapq.heappush(releases, (_to_ns(t.offset_us), order, 0, t))
    ready: list[_Job] = []
    deadlines: list = []
    trace: list[TraceRecord] = []
    busy = {t.name: 0 for t in tasks}
    misses = {t.name: 0 for t in tasks}
    acts = {t.name: 0 for t in tasks}
    running: Optional[_Job] = None
    now = 0

    def release_due():
        while releases and releases[0][0] <= now:
            when, order, k, t = heapq.heappop(releases)
            period = _to_ns(t.period_us)
            job = _Job(-t.priority, when, next(seq), t, _to_ns(t.cost_us(k)),
                       when + period if period else None, k)
            acts[t.name] += 1
            if job.remaining > 0:
                heapq.heappush(ready, job)
                if job.deadline is not None:
                    heapq.heappush(deadlines, (job.deadline, job.seq, job))
            if period and when + period <= horizon:
                heapq.heappush(releases, (when + period, order, k + 1, t))

    def check_deadlines():
        while deadlines and deadlines[0][0] <= now:
            _, _, job = heapq.heappop(deadlines)
            if job.remaining > 0 and not job.missed:
                job.missed = True
                misses[job.task.name] += 1
                trace.append(TraceRecord(job.deadline, job.task.name, TraceEvent.MISS))

    while now < horizon:
        release_due()
        check_deadlines()
        job = ready[0] if ready else None
        if running is not None and running is not job and running.remaining > 0:
            trace.append(TraceRecord(now, running.task.name, TraceEvent.PREEMPT))
        if job is not None and job is not running:
            trace.append(TraceRecord(now, job.task.name, TraceEvent.START))
        running = job
        nxt = horizon
        if releases:
            nxt = min(nxt, releases[0][0])
        if deadlines:
            nxt = min(nxt, deadlines[0][0])
        if job is None:
            now = nxt
            continue
        run = min(job.remaining, nxt - now)
        job.remaining -= run
        busy[job.task.name] += run
        now += run
        if job.remaining == 0:
            heapq.heappop(ready)
            trace.append(TraceRecord(now, job.task.name, TraceEvent.END))
            running = None
    # deadlines that fall exactly on the horizon still count
    check_deadlines()

    rt = sum(v for t in tasks if t.priority > BACKGROUND for v in [busy[t.name]])
    bg = sum(v for t in tasks if t.priority == BACKGROUND for v in [busy[t.name]])
    report = UtilizationReport(
        horizon_us=horizon_us,
        busy_us={k: v / NS for k, v in busy.items()},
        realtime_cpu_pct=100.0 * rt / horizon if horizon else 0.0,
        background_cpu_pct=100.0 * bg / horizon if horizon else 0.0,
        deadline_misses=misses,
        activations=acts,
    )
    return report, trace


def trace_csv(trace: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_us", "task", "event"])
    for r in trace:
        w.writerow([f"{r.time_us:.3f}", r.task, r.event.value])
    return buf.getvalue()


# -- frame verification with speculation ------------------------------------

class Verdict(enum.Enum):
    AUTHENTIC_SPECULATED = "AUTHENTIC_SPECULATED"
    AUTHENTIC_RECOMPUTED = "AUTHENTIC_RECOMPUTED"
    REJECTED = "REJECTED"

    @property
    def accepted(self) -> bool:
        return self is not Verdict.REJECTED


class RejectReason(enum.Enum):
    BAD_MAC = "BAD_MAC"
    REPLAY = "REPLAY"
    KEY_DEPRECATED = "KEY_DEPRECATED"


@dataclass(frozen=True)
class VerifyResult:
    verdict: Verdict
    cost_us: float
    reason: Optional[RejectReason] = None
    key_epoch: Optional[int] = None

    @property
    def accepted(self) -> bool:
        return self.verdict.accepted


class CounterState:
    """Last accepted rolling counter per frame id.

    A counter is fresh if it lies in ``[last+1, last+window]`` modulo 2^16.
    The first authentic frame of an id synchronises the state.
    """

    def __init__(self, window: Optional[int] = DEFAULT_WINDOW):
        # window None disables the freshness check (no rolling counter)
        self.window = window
        self.last: dict[int, int] = {}

    def fresh(self, frame_id: int, counter: int) -> bool:
        last = self.last.get(frame_id)
        if last is None or self.window is None:
            return True
        return 1 <= (counter - last) % COUNTER_MOD <= self.window

    def expected(self, frame_id: int) -> Optional[list[int]]:
        last = self.last.get(frame_id)
        if last is None:
            return None
        return [(last + i) % COUNTER_MOD for i in range(1, (self.window or DEFAULT_WINDOW) + 1)]

    def accept(self, frame_id: int, counter: int) -> None:
        self.last[frame_id] = counter


@dataclass
class SteadyFrame:
    frame_id: int
    level: int
    predicted: bytes


@dataclass
class _SpecEntry:
    predicted: bytes
    key: bytes
    algo: MacAlgo
    digests: dict[int, bytes] = field(default_factory=dict)


class SpeculationCache:
    def __init__(self):
        self.entries: dict[int, _SpecEntry] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return sum(len(e.digests) for e in self.entries.values())

    def lookup(self, frame: PublicFrame, key: bytes) -> Optional[bool]:
        """None when nothing is cached for the id, else whether it hit."""
        e = self.entries.get(frame.id.raw)
        if e is None:
            return None
        d = e.digests.get(frame.counter)
        return (d is not None and e.key == key and frame.data == e.predicted
                and crypto.digest_equal(d, frame.digest))

    def consume(self, frame_id: int, counter: int) -> None:
        e = self.entries.get(frame_id)
        if e is not None:
            for c in [c for c in e.digests if c == counter or
                      (counter - c) % COUNTER_MOD < COUNTER_MOD // 2]:
                del e.digests[c]

    def invalidate(self, frame_ids: Iterable[int]) -> None:
        for fid in frame_ids:
            self.entries.pop(fid, None)

    def clear(self) -> None:
        self.entries.clear()


def verify_frame(frame: PublicFrame, keys: Union[PLKeyEntry, Sequence[PLKeyEntry]],
                 cache: Optional[SpeculationCache], counters: CounterState,
                 cost_model: CostModel, registered: bool = False) -> VerifyResult:
    """Authenticate ``frame``; the rolling-counter check precedes any MAC work.

    ``keys`` lists acceptable keys, best first; only the first is used for
    speculation. ``registered`` marks a steady-state frame that pays for the
    speculative comparison even when the cache has nothing for it.
    """
    if isinstance(keys, PLKeyEntry):
        keys = [keys]
    fid = frame.id.raw
    compare = cost_model.compare_cost_us
    if not counters.fresh(fid, frame.counter):
        return VerifyResult(Verdict.REJECTED, 0.0, RejectReason.REPLAY)
    primary = keys[0]
    if primary.status is KeyStatus.DEPRECATED:
        return VerifyResult(Verdict.REJECTED, 0.0, RejectReason.KEY_DEPRECATED)
    cost = 0.0
    if cache is not None and registered:
        cost += compare
        hit = cache.lookup(frame, primary.key.data)
        if hit:
            cache.hits += 1
            counters.accept(fid, frame.counter)
            cache.consume(fid, frame.counter)
            return VerifyResult(Verdict.AUTHENTIC_SPECULATED, cost, key_epoch=primary.epoch)
        cache.misses += 1
    msg = mac_input(frame.data, frame.counter)
    payload_len = len(msg)
    for entry in keys:
        if entry.status is KeyStatus.DEPRECATED:
            continue
        cost += cost_model.mac_cost_us(entry.algo.digest_len_bits, payload_len, fid) + compare
        if len(frame.digest) != entry.algo.digest_len:
            continue
        if crypto.digest_equal(crypto.mac(entry.algo, entry.key, msg), frame.digest):
            counters.accept(fid, frame.counter)
            if cache is not None:
                cache.consume(fid, frame.counter)
            return VerifyResult(Verdict.AUTHENTIC_RECOMPUTED, cost, key_epoch=entry.epoch)
    return VerifyResult(Verdict.REJECTED, cost, RejectReason.BAD_MAC)


def background_speculate(cache: SpeculationCache, registered: Sequence[SteadyFrame],
                         idle_budget_us: float, keys: Callable[[int], PLKeyEntry],
                         counters: CounterState, cost_model: CostModel) -> float:
    """Precompute digests for the next ``window`` counters of each steady frame.

    Returns the background time spent (µs). Stops when the budget runs out,
    leaving a partial cache.
    """
    spent = 0.0
    for sf in registered:
        entry = keys(sf.level)
        expected = counters.expected(sf.frame_id)
        if expected is None:
            continue
        e = cache.entries.get(sf.frame_id)
        if e is None or e.key != entry.key.data or e.predicted != sf.predicted or e.algo != entry.algo:
            e = _SpecEntry(sf.predicted, entry.key.data, entry.algo)
            cache.entries[sf.frame_id] = e
        for c in expected:
            if c in e.digests:
                continue
            msg = mac_input(sf.predicted, c)
            cost = cost_model.mac_cost_us(entry.algo.digest_len_bits, len(msg), sf.frame_id)
            if spent + cost > idle_budget_us:
                return spent
            e.digests[c] = crypto.mac(entry.algo, entry.key, msg)
            spent += cost
    return spent
