"""Discrete-event model of the public and secure CAN-FD buses."""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from simcan.errors import ZeroWindow
from simcan.frames import SECURE_HEADER, SECURE_IV, SECURE_MAX_BODY, Bus

log = logging.getLogger(__name__)

HEADER_BITS = 70
MAX_DATA_BAUD = 8_000_000
MAX_PAYLOAD = SECURE_HEADER + SECURE_IV + SECURE_MAX_BODY

# arbitration runs after every other callback scheduled for the same instant,
# so frames submitted "at the same time" all take part in it
PHASE_NORMAL = 0
PHASE_ARBITRATE = 1


class EventLoop:
    """Integer-microsecond clock with a (time, phase, seq) ordered agenda."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()

    def call_at(self, time_us: int, fn: Callable, *args, phase: int = PHASE_NORMAL) -> None:
        if time_us < self.now:
            raise ValueError(f"cannot schedule in the past ({time_us} < {self.now})")
        heapq.heappush(self._heap, (time_us, phase, next(self._seq), fn, args))

    def call_later(self, delay_us: int, fn: Callable, *args, phase: int = PHASE_NORMAL) -> None:
        self.call_at(self.now + delay_us, fn, *args, phase=phase)

    def run_until(self, time_us: int) -> None:
        if time_us < self.now:
            raise ValueError("time must not go backwards")
        while self._heap and self._heap[0][0] <= time_us:
            t, _, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(*args)
        self.now = time_us

    def run(self, limit_us: int) -> None:
        """Drain the agenda, never past ``limit_us``."""
        while self._heap and self._heap[0][0] <= limit_us:
            t, _, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(*args)

    def pending(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class BusConfig:
    bus: Bus = Bus.PUBLIC
    arbitration_baud: int = 500_000
    data_baud: int = 2_000_000
    header_bits: int = HEADER_BITS
    queue_depth: int = 32
    name: str = ""

    def __post_init__(self):
        if self.data_baud < self.arbitration_baud:
            raise ValueError("data_baud must be >= arbitration_baud")
        if self.data_baud > MAX_DATA_BAUD:
            raise ValueError(f"data_baud above {MAX_DATA_BAUD}")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be positive")

    @property
    def label(self) -> str:
        return self.name or self.bus.value

    def tx_duration_us(self, payload_len: int) -> int:
        exact = (self.header_bits * 1_000_000 / self.arbitration_baud
                 + payload_len * 8 * 1_000_000 / self.data_baud)
        return math.ceil(exact - 1e-9)


class EventKind(enum.Enum):
    TX_START = "TX_START"
    TX_END = "TX_END"
    RX_DELIVER = "RX_DELIVER"
    DROPPED = "DROPPED"


@dataclass(frozen=True)
class BusEvent:
    time_us: int
    kind: EventKind
    frame_id: int
    payload: bytes
    origin: int
    seq: int
    bus: str
    receiver: Optional[int] = None
    submitted_us: int = 0


class TapAction(enum.Enum):
    PASS = "PASS"
    DROP = "DROP"


# a handler returns TapAction.PASS, TapAction.DROP, or replacement bytes
TapResult = Union[TapAction, bytes]
TapHandler = Callable[[BusEvent], TapResult]

AT_OBD = "AT_OBD"


@dataclass(frozen=True)
class TapPoint:
    handler: TapHandler
    position: str = AT_OBD
    node: Optional[int] = None

    @classmethod
    def at_obd(cls, handler: TapHandler) -> "TapPoint":
        return cls(handler)

    @classmethod
    def downstream_of(cls, node: int, handler: TapHandler) -> "TapPoint":
        return cls(handler, "DOWNSTREAM_OF", node)

    @property
    def key(self) -> tuple:
        return (self.position, self.node)


@dataclass(order=True)
class _Pending:
    frame_id: int
    node: int
    seq: int
    payload: bytes = field(compare=False)
    submitted_us: int = field(compare=False)


class VirtualBus:
    def __init__(self, config: BusConfig | None = None, loop: EventLoop | None = None):
        self.config = config or BusConfig()
        self.loop = loop or EventLoop()
        self.events: list[BusEvent] = []
        self.overloads = 0
        self.overloads_by_node: dict[int, int] = {}
        self._subscribers: dict[int, Callable[[BusEvent], None]] = {}
        self._tx_listeners: dict[int, list[Callable[[BusEvent], None]]] = {}
        self._taps: dict[tuple, TapPoint] = {}
        self._pending: list[_Pending] = []
        self._per_node: dict[int, int] = {}
        self._busy = False
        self._arbitration_scheduled = False
        self._busy_intervals: list[tuple[int, int]] = []
        self._seq = itertools.count()
        self._cursor = 0

    @property
    def name(self) -> str:
        return self.config.label

    def subscribe(self, node: int, callback: Callable[[BusEvent], None] | None = None) -> None:
        self._subscribers[node] = callback or (lambda ev: None)

    def unsubscribe(self, node: int) -> None:
        self._subscribers.pop(node, None)

    def on_tx_complete(self, node: int, callback: Callable[[BusEvent], None]) -> None:
        """Call ``callback`` with the TX_END event of every frame ``node`` sends."""
        self._tx_listeners.setdefault(node, []).append(callback)

    def install_tap(self, tap: TapPoint) -> None:
        if tap.key in self._taps:
            raise ValueError(f"a tap is already installed at {tap.key}")
        self._taps[tap.key] = tap

    def remove_tap(self, tap: TapPoint) -> None:
        self._taps.pop(tap.key, None)

    def submit(self, node: int, frame_id: int, payload: bytes, time_us: int | None = None) -> bool:
        """Queue a frame. Returns False when the node's queue is full.

        A future ``time_us`` defers the submission; its acceptance is then
        only visible through ``overloads``.
        """
        if len(payload) > MAX_PAYLOAD:
            raise ValueError(f"payload of {len(payload)} bytes does not fit a frame")
        if time_us is not None and time_us > self.loop.now:
            self.loop.call_at(time_us, self.submit, node, frame_id, payload)
            return True
        if self._per_node.get(node, 0) >= self.config.queue_depth:
            self.overloads += 1
            self.overloads_by_node[node] = self.overloads_by_node.get(node, 0) + 1
            log.debug("%s: queue overflow at node %d", self.name, node)
            return False
        self._per_node[node] = self._per_node.get(node, 0) + 1
        self._pending.append(_Pending(frame_id, node, next(self._seq), payload, self.loop.now))
        self._schedule_arbitration()
        return True

    def queued(self, node: int) -> int:
        return self._per_node.get(node, 0)

    def _schedule_arbitration(self) -> None:
        if not self._busy and not self._arbitration_scheduled:
            self._arbitration_scheduled = True
            self.loop.call_at(self.loop.now, self._arbitrate, phase=PHASE_ARBITRATE)

    def _arbitrate(self) -> None:
        self._arbitration_scheduled = False
        if self._busy or not self._pending:
            return
        winner = min(self._pending)
        self._pending.remove(winner)
        self._per_node[winner.node] -= 1
        self._busy = True
        start = self.loop.now
        end = start + self.config.tx_duration_us(len(winner.payload))
        self._record(BusEvent(start, EventKind.TX_START, winner.frame_id, winner.payload,
                              winner.node, winner.seq, self.name, submitted_us=winner.submitted_us))
        self._busy_intervals.append((start, end))
        self.loop.call_at(end, self._finish, winner)

    def _finish(self, tx: _Pending) -> None:
        now = self.loop.now
        end_ev = BusEvent(now, EventKind.TX_END, tx.frame_id, tx.payload, tx.node, tx.seq,
                          self.name, submitted_us=tx.submitted_us)
        self._record(end_ev)
        receivers = sorted(n for n in self._subscribers if n != tx.node)
        outcome = {n: tx.payload for n in receivers}
        for tap in self._taps.values():
            affected = self._affected(tap, tx.node, receivers)
            if not affected:
                continue
            result = tap.handler(end_ev)
            for n in affected:
                if outcome[n] is None:
                    continue
                if result is TapAction.DROP:
                    outcome[n] = None
                elif isinstance(result, (bytes, bytearray)):
                    outcome[n] = bytes(result)
        self._busy = False
        for n in receivers:
            payload = outcome[n]
            kind = EventKind.DROPPED if payload is None else EventKind.RX_DELIVER
            ev = BusEvent(now, kind, tx.frame_id, payload if payload is not None else tx.payload,
                          tx.node, tx.seq, self.name, receiver=n, submitted_us=tx.submitted_us)
            self._record(ev)
            if payload is not None:
                self._subscribers[n](ev)
        for cb in self._tx_listeners.get(tx.node, ()):
            cb(end_ev)
        if self._pending:
            self._schedule_arbitration()

    @staticmethod
    def _affected(tap: TapPoint, origin: int, receivers: list[int]) -> list[int]:
        if tap.position == AT_OBD:
            return receivers
        if origin == tap.node:
            return receivers
        return [n for n in receivers if n == tap.node]

    def _record(self, ev: BusEvent) -> None:
        self.events.append(ev)

    def step_until(self, time_us: int) -> list[BusEvent]:
        """Advance the shared loop and return this bus's events since the last step."""
        self.loop.run_until(time_us)
        out = self.events[self._cursor:]
        self._cursor = len(self.events)
        return out

    def busy_time(self, start_us: int, end_us: int) -> int:
        total = 0
        for s, e in self._busy_intervals:
            lo, hi = max(s, start_us), min(e, end_us)
            if hi > lo:
                total += hi - lo
        return total

    def bus_load(self, window_us: int, end_us: int | None = None) -> float:
        if window_us <= 0:
            raise ZeroWindow("bus load over an empty window")
        end = self.loop.now if end_us is None else end_us
        return self.busy_time(end - window_us, end) / window_us
