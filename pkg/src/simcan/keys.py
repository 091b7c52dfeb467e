"""Privilege-level key hierarchy.

Level 1 is the most privileged and belongs to the secure gateway. A node at
level ``m`` holds the keys of levels ``m..N``, except for levels that form a
security sub-domain: those are held only by the sub-domain's members and its
gateway, and use shorter keys rolled more often.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from simcan.crypto import (
    CMAC_128, HMAC_256, KeyKind, KeyMaterial, MacAlgo, MacVariant, RandomSource,
)
from simcan.errors import (
    CapacityError, DoubleDeprecate, KeyLenError, ModeUnavailable, NoSuchLevel,
    PrivilegeViolation,
)

log = logging.getLogger(__name__)

DEFAULT_LEVELS = 5
DEFAULT_CAPACITY = 256
SGTW_LEVEL = 1
SUBDOMAIN_PERIOD_DIVISOR = 4


class KeyStatus(enum.Enum):
    ACTIVE = "ACTIVE"
    DEPRECATED = "DEPRECATED"


def default_algo(key_len: int) -> MacAlgo:
    if key_len == 32:
        return HMAC_256
    if key_len == 16:
        return CMAC_128
    return MacAlgo(MacVariant.HASH_MAC_256, 64)


@dataclass
class PLKeyEntry:
    level: int
    key: KeyMaterial
    epoch: int = 0
    status: KeyStatus = KeyStatus.ACTIVE
    rolling_period_us: int = 0
    short: bool = False
    algo: MacAlgo = HMAC_256

    @property
    def key_len(self) -> int:
        return len(self.key.data)

    @property
    def slot(self) -> tuple[int, bool]:
        return (self.level, self.short)


@dataclass(frozen=True)
class SubDomainConfig:
    gateway_level: int
    member_levels: frozenset
    key_len: int = 8
    rolling_period_us: int = 0

    def __post_init__(self):
        object.__setattr__(self, "member_levels", frozenset(self.member_levels))
        if self.gateway_level in self.member_levels:
            raise ValueError("sub-domain gateway level cannot be a member level")
        if any(lv <= self.gateway_level for lv in self.member_levels):
            raise ValueError("sub-domain members must sit below their gateway")


@dataclass(frozen=True)
class KeyHierarchy:
    """Static shape of the key hierarchy for one network."""

    n_levels: int = DEFAULT_LEVELS
    key_len: int = 32
    short_key_len: int = 16
    rolling_period_us: int = 1_000_000
    short_period_factor: int = 2
    subdomains: tuple = ()
    long_algo: Optional[MacAlgo] = None
    short_algo: Optional[MacAlgo] = None

    def subdomain_of(self, level: int) -> Optional[SubDomainConfig]:
        for sd in self.subdomains:
            if level in sd.member_levels:
                return sd
        return None

    def sub_levels(self) -> set[int]:
        out: set[int] = set()
        for sd in self.subdomains:
            out |= sd.member_levels
        return out

    def key_len_for(self, level: int) -> int:
        sd = self.subdomain_of(level)
        return sd.key_len if sd else self.key_len

    def algo_for(self, level: int, short: bool = False) -> MacAlgo:
        if short:
            return self.short_algo or default_algo(self.short_key_len)
        if self.subdomain_of(level) is None and self.long_algo is not None:
            return self.long_algo
        return default_algo(self.key_len_for(level))

    def period_for(self, level: int, short: bool = False) -> int:
        sd = self.subdomain_of(level)
        if sd is not None:
            return sd.rolling_period_us or self.rolling_period_us // SUBDOMAIN_PERIOD_DIVISOR
        if short:
            return self.rolling_period_us // self.short_period_factor
        return self.rolling_period_us

    def has_short(self, level: int) -> bool:
        return self.short_key_len > 0 and self.subdomain_of(level) is None

    def levels_held(self, own_level: int) -> list[int]:
        """Levels whose keys a node at ``own_level`` holds."""
        if not 1 <= own_level <= self.n_levels:
            raise NoSuchLevel(f"level {own_level} outside 1..{self.n_levels}")
        sd = self.subdomain_of(own_level)
        if sd is not None:
            return sorted(lv for lv in sd.member_levels if lv >= own_level)
        gated = set()
        for s in self.subdomains:
            # only the SGTW and the sub-domain's own gateway reach into it
            if own_level in (SGTW_LEVEL, s.gateway_level):
                gated |= s.member_levels
        sub = self.sub_levels()
        return [lv for lv in range(own_level, self.n_levels + 1) if lv not in sub or lv in gated]


def _check_len(level: int, key_len: int, hierarchy: Optional[KeyHierarchy]) -> None:
    if key_len not in (8, 16, 32):
        raise KeyLenError(f"key length {key_len} not allowed")
    if key_len == 8 and (hierarchy is None or hierarchy.subdomain_of(level) is None):
        raise KeyLenError(f"8-byte key at level {level} is only legal inside a sub-domain")


def generate_pl_keys(rng: RandomSource, n_levels: int, key_len: int = 32,
                     capacity_bytes: int = DEFAULT_CAPACITY,
                     hierarchy: Optional[KeyHierarchy] = None,
                     rolling_period_us: int = 0) -> dict[int, PLKeyEntry]:
    """Fresh epoch-0 key for every level 1..n_levels."""
    lens = {lv: (hierarchy.key_len_for(lv) if hierarchy else key_len) for lv in range(1, n_levels + 1)}
    total = sum(lens.values())
    if total > capacity_bytes:
        raise CapacityError(f"{n_levels} keys need {total} B, capacity is {capacity_bytes} B")
    out = {}
    for lv, n in lens.items():
        _check_len(lv, n, hierarchy)
        out[lv] = PLKeyEntry(
            lv, KeyMaterial(rng.bytes(n), KeyKind.PL_KEY), 0, KeyStatus.ACTIVE,
            hierarchy.period_for(lv) if hierarchy else rolling_period_us,
            False, hierarchy.algo_for(lv) if hierarchy else default_algo(n),
        )
    return out


class KeyStore:
    """Keys held by one agent. Mutated only by that agent's event handlers."""

    def __init__(self, own_level: int, capacity_bytes: int = DEFAULT_CAPACITY,
                 k_apk: Optional[KeyMaterial] = None):
        self.own_level = own_level
        self.capacity_bytes = capacity_bytes
        self.k_apk = k_apk
        self.k_sh: Optional[KeyMaterial] = None
        self.pl_keys: dict[int, PLKeyEntry] = {}
        self.short_keys: dict[int, PLKeyEntry] = {}
        # superseded keys kept for frames still in flight: slot -> (entry, expires_us)
        self.grace: dict[tuple[int, bool], tuple[PLKeyEntry, int]] = {}
        self.short_mode: set[int] = set()
        self.short_mode_since = 0

    def _table(self, short: bool) -> dict[int, PLKeyEntry]:
        return self.short_keys if short else self.pl_keys

    def stored_bytes(self) -> int:
        n = sum(e.key_len for e in self.pl_keys.values())
        n += sum(e.key_len for e in self.short_keys.values())
        n += sum(e.key_len for e, _ in self.grace.values())
        return n

    def levels(self) -> list[int]:
        return sorted(self.pl_keys)

    def holds(self, level: int) -> bool:
        return level in self.pl_keys

    def get(self, level: int, short: bool = False) -> PLKeyEntry:
        try:
            return self._table(short)[level]
        except KeyError:
            raise NoSuchLevel(f"no {'short ' if short else ''}key for level {level}") from None

    def install(self, entry: PLKeyEntry, now: int = 0, grace_us: int = 0) -> bool:
        """Store ``entry`` as the active key of its slot.

        Returns False for a stale or repeated epoch (nothing changes).
        """
        if entry.level < self.own_level:
            raise PrivilegeViolation(
                f"level {entry.level} key offered to a level {self.own_level} store")
        table = self._table(entry.short)
        old = table.get(entry.level)
        if old is not None and entry.epoch <= old.epoch and old.status is KeyStatus.ACTIVE:
            return False
        saved_grace = self.grace.get(entry.slot)
        table[entry.level] = replace(entry, status=KeyStatus.ACTIVE)
        if old is not None and grace_us > 0:
            self.grace[entry.slot] = (old, now + grace_us)
        else:
            self.grace.pop(entry.slot, None)
        # grace copies are a convenience; evict them before refusing a key
        for slot, _ in sorted(self.grace.items(), key=lambda kv: kv[1][1]):
            if self.stored_bytes() <= self.capacity_bytes:
                break
            if slot != entry.slot:
                del self.grace[slot]
        if self.stored_bytes() > self.capacity_bytes:
            self.grace.pop(entry.slot, None)
        if self.stored_bytes() > self.capacity_bytes:
            if old is None:
                del table[entry.level]
            else:
                table[entry.level] = old
            if saved_grace is None:
                self.grace.pop(entry.slot, None)
            else:
                self.grace[entry.slot] = saved_grace
            raise CapacityError(f"store would hold {self.stored_bytes()} B > {self.capacity_bytes} B")
        return True

    def mark_deprecated(self, level: int) -> None:
        for table in (self.pl_keys, self.short_keys):
            if level in table:
                table[level] = replace(table[level], status=KeyStatus.DEPRECATED)

    def drop_level(self, level: int) -> None:
        self.pl_keys.pop(level, None)
        self.short_keys.pop(level, None)
        self.grace.pop((level, False), None)
        self.grace.pop((level, True), None)
        self.short_mode.discard(level)

    def prune(self, now: int) -> None:
        for slot in [s for s, (_, exp) in self.grace.items() if exp < now]:
            del self.grace[slot]

    # -- selection ----------------------------------------------------------

    def select_key(self, peer_level: int) -> PLKeyEntry:
        if peer_level < self.own_level:
            raise PrivilegeViolation(
                f"level {self.own_level} node cannot use level {peer_level} keys")
        level = max(self.own_level, peer_level)
        if level in self.short_mode and level in self.short_keys:
            return self.short_keys[level]
        return self.get(level)

    def candidates(self, level: int, now: int, mode_grace_us: int = 0) -> list[PLKeyEntry]:
        """Keys a receiver should try for a level-``level`` frame, best first."""
        primary = self.select_key(level)
        out = [primary]
        other = self.short_keys.get(level) if not primary.short else self.pl_keys.get(level)
        if other is not None and now <= self.short_mode_since + mode_grace_us:
            out.append(other)
        for short in (primary.short, not primary.short):
            g = self.grace.get((level, short))
            if g is not None and now <= g[1]:
                out.append(g[0])
        return out

    def enter_short_key_mode(self, levels: Iterable[int], now: int = 0) -> None:
        levels = set(levels)
        missing = [lv for lv in levels if lv not in self.short_keys]
        if missing:
            raise ModeUnavailable(f"no short keys for levels {sorted(missing)}")
        if not levels <= self.short_mode:
            self.short_mode |= levels
            self.short_mode_since = now

    def exit_short_key_mode(self, now: int = 0, levels: Optional[Iterable[int]] = None) -> None:
        drop = self.short_mode if levels is None else self.short_mode & set(levels)
        if drop:
            self.short_mode = self.short_mode - drop
            self.short_mode_since = now


@dataclass
class PlanStep:
    level: int
    entry: PLKeyEntry
    recipients: list[int]


@dataclass
class KeyRolloverPlan:
    level: int
    compromised: int
    steps: list[PlanStep] = field(default_factory=list)
    committed: bool = False

    @property
    def recipients(self) -> list[int]:
        """Nodes re-keyed at the deprecated level itself."""
        for s in self.steps:
            if s.level == self.level and not s.entry.short:
                return s.recipients
        return []

    @property
    def levels(self) -> list[int]:
        return sorted({s.level for s in self.steps})


class KeyAuthority:
    """Gateway-side master copy of every level key plus the membership map."""

    def __init__(self, hierarchy: KeyHierarchy, rng: RandomSource,
                 capacity_bytes: int = 1024, grace_us: int = 0):
        self.hierarchy = hierarchy
        self.rng = rng
        self.grace_us = grace_us
        self.store = KeyStore(SGTW_LEVEL, capacity_bytes)
        self.members: dict[int, int] = {}
        self.isolated: set[int] = set()
        self.audit: list[dict] = []
        self._pending: dict[int, KeyRolloverPlan] = {}
        self._seen_keys: set[bytes] = set()

    def _fresh(self, n: int) -> KeyMaterial:
        while True:
            data = self.rng.bytes(n)
            if data not in self._seen_keys:
                self._seen_keys.add(data)
                return KeyMaterial(data, KeyKind.PL_KEY)

    def _log(self, now: int, level: int, epoch: int, action: str, recipients=()) -> None:
        self.audit.append({"time_us": now, "level": level, "epoch": epoch,
                           "action": action, "recipients": sorted(recipients)})

    def initialize(self, now: int = 0) -> None:
        h = self.hierarchy
        entries = generate_pl_keys(self.rng, h.n_levels, h.key_len, self.store.capacity_bytes, h)
        for lv, e in entries.items():
            self._seen_keys.add(e.key.data)
            self.store.install(e, now)
            self._log(now, lv, 0, "GEN")
            if h.has_short(lv):
                short = PLKeyEntry(lv, self._fresh(h.short_key_len), 0, KeyStatus.ACTIVE,
                                   h.period_for(lv, True), True, h.algo_for(lv, True))
                self.store.install(short, now)
                self._log(now, lv, 0, "SHORT")

    def register(self, node: int, level: int) -> None:
        self.members[node] = level

    def holders(self, level: int) -> list[int]:
        """Non-isolated nodes that hold the key of ``level``."""
        return sorted(n for n, lv in self.members.items()
                      if n not in self.isolated and level in self.hierarchy.levels_held(lv))

    def level_members(self, level: int) -> list[int]:
        return sorted(n for n, lv in self.members.items() if lv == level and n not in self.isolated)

    def entries_for(self, node_level: int) -> list[PLKeyEntry]:
        out = []
        for lv in self.hierarchy.levels_held(node_level):
            out.append(self.store.get(lv))
            if lv in self.store.short_keys:
                out.append(self.store.get(lv, short=True))
        return out

    def roll_key(self, level: int, short: bool = False, now: int = 0) -> PLKeyEntry:
        old = self.store.get(level, short)
        new = replace(old, key=self._fresh(old.key_len), epoch=old.epoch + 1,
                      status=KeyStatus.ACTIVE)
        self.store.install(new, now, self.grace_us)
        self._log(now, level, new.epoch, "ROLL", self.holders(level))
        return new

    def deprecate(self, level: int, compromised: int, now: int = 0) -> KeyRolloverPlan:
        """Deprecate every key the compromised node held, starting at ``level``.

        The successors are prepared but only become active on :meth:`commit`.
        """
        if level in self._pending:
            raise DoubleDeprecate(f"level {level} already deprecated, successor not committed")
        self.store.get(level)
        node_level = self.members.get(compromised, level)
        held = [lv for lv in self.hierarchy.levels_held(node_level) if lv >= level]
        if level not in held:
            held.insert(0, level)
        self.isolated.add(compromised)
        plan = KeyRolloverPlan(level, compromised)
        for lv in sorted(held):
            if lv in self._pending:
                raise DoubleDeprecate(f"level {lv} already deprecated, successor not committed")
            recipients = self.holders(lv)
            for short in (False, True):
                if lv not in self.store._table(short):
                    continue
                old = self.store.get(lv, short)
                new = replace(old, key=self._fresh(old.key_len), epoch=old.epoch + 1,
                              status=KeyStatus.ACTIVE)
                plan.steps.append(PlanStep(lv, new, recipients))
            self.store.mark_deprecated(lv)
            self._log(now, lv, self.store.get(lv).epoch, "DEPRECATE", recipients)
        for lv in plan.levels:
            self._pending[lv] = plan
        return plan

    def commit(self, plan: KeyRolloverPlan, now: int = 0) -> None:
        for step in plan.steps:
            # deprecated keys are not trusted, so no grace window for them
            self.store.install(step.entry, now, 0)
            self._log(now, step.level, step.entry.epoch, "ROLL", step.recipients)
        for lv in plan.levels:
            self._pending.pop(lv, None)
        plan.committed = True

    def is_deprecated(self, level: int) -> bool:
        return self.store.get(level).status is KeyStatus.DEPRECATED
