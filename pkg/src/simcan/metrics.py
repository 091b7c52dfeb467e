"""Measurements over simulation runs: the report behind ``simcan run`` and
the experiment series (digest-length sweep, speculative MAC, fleet storage).
"""

from __future__ import annotations

import collections
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from simcan import crypto
from simcan.attacks import AttackKind, run_attack, run_dos
from simcan.bus import EventKind
from simcan.crypto import HMAC_256, MacAlgo, MacVariant, RandomSource
from simcan.frames import FrameId, dump_line, sign_public
from simcan.keys import KeyStatus, PLKeyEntry
from simcan.network import Network
from simcan.scenario import Scenario, attack_scripts, cost_model, network_config
from simcan.sched import (
    CostModel, CounterState, SpeculationCache, SteadyFrame, TaskSpec, background_speculate,
    run_schedule, verify_frame,
)

REPORT_VERSION = 1


def _r(x: float, nd: int = 6) -> float:
    return round(x, nd)


def dumps(obj) -> str:
    """Canonical JSON used for every report, so identical runs give identical bytes."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# -- scenario runs -------------------------------------------------------------------

@dataclass
class RunResult:
    report: dict
    logs: dict[str, list[str]] = field(default_factory=dict)
    network: Optional[Network] = None


def rolling_latencies(net: Network) -> dict[str, dict]:
    """Per level: time from a roll until the last holder installed the new key."""
    updates = collections.defaultdict(list)
    for agent in net.agents.values():
        for t, level, epoch, short in agent.key_updates:
            updates[(level, epoch, short)].append(t)
    out: dict[str, dict] = {}
    for t, level, epoch, short in net.gateway.roll_log:
        got = updates.get((level, epoch, short))
        if not got:
            continue
        lat = max(got) - t
        slot = out.setdefault(f"{level}{'s' if short else ''}", {"rolls": 0, "max_latency_us": 0})
        slot["rolls"] += 1
        slot["max_latency_us"] = max(slot["max_latency_us"], lat)
    return dict(sorted(out.items()))


def traffic_summary(net: Network) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in net.rx_log:
        s = out.setdefault(f"{r.segment}:{r.frame_id:#05x}",
                           {"received": 0, "accepted": 0, "rejected": 0, "mac_us": 0.0})
        s["received"] += 1
        s["accepted" if r.accepted else "rejected"] += 1
        s["mac_us"] = _r(s["mac_us"] + r.cost_us, 3)
    return dict(sorted(out.items()))


def run_scenario(scn: Scenario, seed: Optional[int] = None) -> RunResult:
    cfg = network_config(scn, seed)
    net = Network(cfg)
    t0 = net.provision()
    keys = scn.section("keys")
    if keys.get("short_mode_levels"):
        net.gateway.set_short_mode(keys["short_mode_levels"], True)
    if keys.get("roll", False):
        net.gateway.start_roll_timers(keys.get("roll_stagger_us", 0))
    hw = scn.section("hw_signature")
    if hw.get("enabled", False):
        net.enable_hw_signature(hw.get("period_us", 100_000), hw.get("response_timeout_us", 10_000),
                                hw.get("react", True), hw.get("starvation_us", 0))
    # scripted compromise detections, relative to the end of provisioning
    for inc in scn.raw.get("incidents", []):
        net.loop.call_at(t0 + inc["at_us"], net.on_violation, inc["node"], inc["level"])
    net.start_traffic()
    end = t0 + scn.horizon_us
    net.run_until(end)

    util = {}
    for node_id, dn in sorted(net.data.items()):
        rep = dn.utilization(t0, end)
        util[f"{node_id:#04x}"] = {
            "realtime_cpu_pct": _r(rep.realtime_cpu_pct), "background_cpu_pct": _r(rep.background_cpu_pct),
            "deadline_misses": rep.total_misses, "speculation": rep.speculation}
    buses = {}
    for name, bus in sorted(list(net.buses.items()) + [("SECURE", net.secure_bus)]):
        buses[name] = {"load": _r(bus.bus_load(end, end)),
                       "frames": sum(1 for ev in bus.events if ev.kind is EventKind.TX_END),
                       "overloads": bus.overloads}
    epochs = {}
    for node_id, dn in sorted(net.data.items()):
        if dn.store is not None:
            epochs[f"{node_id:#04x}"] = {str(lv): dn.store.get(lv).epoch for lv in dn.store.levels()}
    verdicts = collections.Counter(o.verdict.value for o in net.hwlog.outcomes.values() if o.verdict)
    report = {
        "report_version": REPORT_VERSION,
        "scenario": scn.name,
        "scenario_digest": scn.digest,
        "seed": cfg.seed,
        "horizon_us": scn.horizon_us,
        "provisioning": {
            "latency_us": t0,
            "nodes": {f"{n:#04x}": p.provisioned_at for n, p in sorted(net.agents.items())},
            "secure_frames": sum(1 for ev in net.secure_bus.events
                                 if ev.kind is EventKind.TX_END and ev.time_us <= t0),
        },
        "rolling": rolling_latencies(net),
        "buses": buses,
        "traffic": traffic_summary(net),
        "utilization": util,
        "frame_deadline_misses": net.frame_deadline_misses(t0, end),
        "violations": len(net.violation_log),
        "isolated": sorted(f"{n:#04x}" for n in net.authority.isolated),
        "hw_signature": {"challenges": len(net.hwlog.outcomes), "verdicts": dict(sorted(verdicts.items())),
                         "suspects": sorted(f"{v:#04x}" for _, v, _ in net.hwlog.suspects)},
        "key_epochs": epochs,
    }
    logs = {
        "rx.jsonl": [json.dumps(dataclasses.asdict(r), sort_keys=True) for r in net.rx_log],
        "key_audit.jsonl": [json.dumps(a, sort_keys=True) for a in net.authority.audit],
        "challenges.jsonl": [json.dumps(a, sort_keys=True) for a in net.hwlog.audit],
        "violations.jsonl": [json.dumps(dataclasses.asdict(v), sort_keys=True) for v in net.violation_log],
        "public.dump": [dump_line(ev.time_us, ev.bus, ev.frame_id, ev.payload)
                        for ev in net.buses["PUBLIC"].events if ev.kind is EventKind.TX_END],
    }
    return RunResult(report, logs, net)


def run_attacks(scn: Scenario, seed: Optional[int] = None) -> dict:
    hw = scn.section("hw_signature")
    results = []
    for script, opts in attack_scripts(scn):
        cfg = dataclasses.replace(network_config(scn, seed), **opts["baseline"])
        if script.kind is AttackKind.DOS_FLOOD:
            rep = run_dos(cfg, script, scn.horizon_us, mitigations=opts["mitigations"])
        else:
            rep = run_attack(cfg, script, scn.horizon_us, hw_period_us=hw.get("period_us", 100_000))
        d = rep.to_dict()
        d["mitigations"] = opts["mitigations"]
        d["baseline"] = dict(sorted(opts["baseline"].items()))
        results.append(d)
    return {"report_version": REPORT_VERSION, "scenario": scn.name, "scenario_digest": scn.digest,
            "seed": scn.seed if seed is None else seed, "attacks": results}


# -- digest-length sweep ----------------------------------------------------------------

def algo_for_bits(bits: int) -> MacAlgo:
    return HMAC_256 if bits == 256 else MacAlgo(MacVariant.CMAC_AES256, bits) if bits == 128 \
        else MacAlgo(MacVariant.HASH_MAC_256, bits)


def sweep_digest(model: CostModel, lengths, payload_len: int = 64, frames_per_period: int = 500,
                 period_us: int = 25_000) -> list[dict]:
    """Two series per digest length: the most MAC computations a period can
    hold at 100% CPU, and CPU% for a fixed number of computations.

    The maximum is computed in closed form and confirmed on the scheduler:
    n frames fit without a miss, n + 1 do not.
    """
    rows = []
    for bits in sorted(set(lengths)):
        cost = model.mac_cost_us(bits, payload_len)
        n_max = math.floor(period_us / cost + 1e-9)
        fits, _ = run_schedule([TaskSpec("mac", 10, period_us, n_max * cost)], 4 * period_us)
        over, _ = run_schedule([TaskSpec("mac", 10, period_us, (n_max + 1) * cost)], 4 * period_us)
        fixed, _ = run_schedule([TaskSpec("mac", 10, period_us, frames_per_period * cost)], 4 * period_us)
        rows.append({
            "digest_bits": bits,
            "mac_cost_us": _r(cost),
            "max_frames_per_s": n_max * 1_000_000 // period_us,
            "cpu_pct_fixed_load": _r(fixed.realtime_cpu_pct),
            "scheduler_confirms": fits.total_misses == 0 and over.total_misses > 0,
        })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


# -- speculative MAC experiment ------------------------------------------------------------

SPEC_MODES = ("off", "all_hit", "all_miss")


@dataclass
class SpecWorkload:
    frame_ids: list[int]
    steady_ids: list[int]
    data_len: int = 24


def speculation_workload(n_frames: int = 80, n_steady: int = 18, data_len: int = 24) -> SpecWorkload:
    ids = [0x100 + i for i in range(n_frames)]
    return SpecWorkload(ids, ids[:n_steady], data_len)


def _spec_run(mode: str, wl: SpecWorkload, model: CostModel, periods: int, period_us: int,
              seed: int) -> dict:
    rng = RandomSource(seed)
    key = PLKeyEntry(2, crypto.KeyMaterial(rng.fork("key").bytes(32), crypto.KeyKind.PL_KEY),
                     epoch=0, status=KeyStatus.ACTIVE, algo=HMAC_256)
    data_rng = rng.fork("data")
    steady_value = {fid: rng.fork(f"v{fid}").bytes(wl.data_len) for fid in wl.steady_ids}
    counters = CounterState()
    cache = SpeculationCache() if mode != "off" else None
    last_seen: dict[int, bytes] = {}
    rt, bg = [], []
    accepted = 0
    for k in range(periods):
        cost = 0.0
        for fid in wl.frame_ids:
            steady = fid in steady_value
            if steady and mode != "all_miss":
                data = steady_value[fid]
            else:
                data = data_rng.bytes(wl.data_len)
            frame = sign_public(FrameId(fid), k, data, key.algo, key.key)
            res = verify_frame(frame, [key], cache, counters, model, registered=steady and cache is not None)
            accepted += res.accepted
            cost += res.cost_us
            last_seen[fid] = data
        rt.append(cost)
        spent = 0.0
        if cache is not None:
            # the receiver predicts each steady frame repeats what it saw last
            registered = [SteadyFrame(fid, 2, last_seen[fid]) for fid in wl.steady_ids]
            spent = background_speculate(cache, registered, period_us - cost, lambda lv: key,
                                         counters, model)
        bg.append(spent)
    # period 0 is warm-up: the cache only fills in the idle time after it
    tasks = [TaskSpec("rx", 10, period_us, lambda k: rt[k + 1]),
             TaskSpec("background", 0, period_us, lambda k: bg[k + 1])]
    rep, _ = run_schedule(tasks, (periods - 1) * period_us)
    return {"realtime_cpu_pct": _r(rep.realtime_cpu_pct), "background_cpu_pct": _r(rep.background_cpu_pct),
            "deadline_misses": rep.total_misses, "accepted": accepted,
            "hits": cache.hits if cache else 0, "misses": cache.misses if cache else 0}


def speculation_experiment(model: CostModel, n_frames: int = 80, n_steady: int = 18,
                           periods: int = 41, period_us: int = 25_000, data_len: int = 24,
                           seed: int = 1) -> dict:
    wl = speculation_workload(n_frames, n_steady, data_len)
    return {mode: _spec_run(mode, wl, model, periods, period_us, seed) for mode in SPEC_MODES}


def speculation_equivalence(n_frames: int = 10_000, seed: int = 7,
                            model: Optional[CostModel] = None) -> dict:
    """Same randomized stream through a speculating and a plain receiver.

    The stream mixes steady and changing data, forged digests, tampered data,
    replays and counter jumps. Returns counts and the number of frames on
    which the two receivers disagree.
    """
    model = model or CostModel()
    rng = RandomSource(seed)
    key = PLKeyEntry(3, crypto.KeyMaterial(rng.fork("k").bytes(32), crypto.KeyKind.PL_KEY),
                     epoch=0, status=KeyStatus.ACTIVE, algo=HMAC_256)
    ids = list(range(0x200, 0x210))
    steady = {fid: rng.fork(f"s{fid}").bytes(16) for fid in ids[:6]}
    tx_counter = {fid: 0 for fid in ids}
    plain_ctr, spec_ctr = CounterState(), CounterState()
    cache = SpeculationCache()
    history: list = []
    mismatches = accepted = 0
    for i in range(n_frames):
        fid = rng.choice(ids)
        roll = rng.random()
        if roll < 0.08 and history:
            frame = rng.choice(history)                      # replay
        else:
            if fid in steady and rng.random() < 0.8:
                data = steady[fid]
            else:
                data = rng.bytes(16)
            if roll < 0.12:
                tx_counter[fid] = (tx_counter[fid] + rng.randrange(2, 20)) % 65536   # jump
            frame = sign_public(FrameId(fid), tx_counter[fid], data, key.algo, key.key)
            tx_counter[fid] = (tx_counter[fid] + 1) % 65536
            if roll > 0.94:                                   # tamper
                b = bytearray(frame.digest if roll > 0.97 else frame.data)
                b[rng.randrange(len(b))] ^= 1 << rng.randrange(8)
                frame = (dataclasses.replace(frame, digest=bytes(b)) if roll > 0.97
                         else dataclasses.replace(frame, data=bytes(b)))
            history.append(frame)
        a = verify_frame(frame, [key], None, plain_ctr, model)
        b = verify_frame(frame, [key], cache, spec_ctr, model, registered=fid in steady)
        mismatches += a.accepted != b.accepted
        accepted += a.accepted
        if i % 16 == 15:
            reg = [SteadyFrame(f, 3, v) for f, v in steady.items()]
            background_speculate(cache, reg, 1_000.0, lambda lv: key, spec_ctr, model)
    return {"frames": n_frames, "accepted": accepted, "rejected": n_frames - accepted,
            "mismatches": mismatches, "hits": cache.hits}


# -- fleet storage ----------------------------------------------------------------------------

def fleet_math(vehicles: int, keys: int, key_bytes: int, multiplier: float = 3.0,
               engine_keys: int = 16, engine_key_bytes: int = 16) -> dict:
    """Back-end key storage for a fleet and the on-ECU crypto-engine footprint."""
    total = vehicles * keys * key_bytes
    with_meta = total * multiplier
    return {
        "vehicles": vehicles, "keys_per_vehicle": keys, "key_bytes": key_bytes,
        "total_bytes": total,
        "total_gib": _r(total / 2**30, 3),
        "total_gb": _r(total / 1e9, 3),
        "multiplier": multiplier,
        "with_metadata_bytes": int(with_meta),
        "with_metadata_gib": _r(with_meta / 2**30, 3),
        "on_ecu_bytes": engine_keys * engine_key_bytes,
    }


# -- scenario-driven experiments ----------------------------------------------------------------

def sweep_for(scn: Scenario, lengths=None) -> dict:
    exp = scn.section("experiments").get("digest_sweep", {})
    rows = sweep_digest(cost_model(scn), lengths or exp.get("lengths", [64, 128, 256]),
                        exp.get("payload_len", 64), exp.get("frames_per_period", 500),
                        scn.section("tasks").get("period_us", 25_000))
    return {"report_version": REPORT_VERSION, "scenario": scn.name, "scenario_digest": scn.digest,
            "series": rows}


def speculation_for(scn: Scenario, seed: Optional[int] = None) -> dict:
    exp = scn.section("experiments").get("speculation", {})
    runs = speculation_experiment(
        cost_model(scn), exp.get("frames", 80), exp.get("steady", 18), exp.get("periods", 41),
        scn.section("tasks").get("period_us", 25_000), exp.get("data_len", 24),
        scn.seed if seed is None else seed)
    return {"report_version": REPORT_VERSION, "scenario": scn.name, "scenario_digest": scn.digest,
            "cpu_off": runs["off"]["realtime_cpu_pct"],
            "cpu_on_allhit": runs["all_hit"]["realtime_cpu_pct"],
            "cpu_on_allmiss": runs["all_miss"]["realtime_cpu_pct"],
            "runs": runs}
