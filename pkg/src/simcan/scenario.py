"""Scenario files: YAML with named sections, validated against a JSON schema.

Errors point at the offending line. A scenario fully determines a run
together with its seed; ``digest`` is what reports quote to tie a series to
its input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema
import yaml

from simcan.attacks import AttackKind, AttackScript, MitmRule, RuleAction
from simcan.bus import BusConfig
from simcan.errors import ScenarioError
from simcan.frames import Bus
from simcan.keys import KeyHierarchy, SubDomainConfig
from simcan.network import MAIN, SUB, FrameSpec, NetworkConfig, NodeSpec, Role, RouteSpec
from simcan.sched import CostModel

SCHEMA_VERSION = 1


def schema() -> dict:
    text = resources.files("simcan").joinpath("scenario.schema.json").read_text()
    return json.loads(text)


@dataclass
class Scenario:
    raw: dict
    digest: str
    source: str = "<string>"

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def horizon_us(self) -> int:
        return self.raw["horizon_us"]

    def section(self, name: str) -> dict:
        return self.raw.get(name) or {}


# -- parsing with line numbers ----------------------------------------------------

def _line_of(node: Optional[yaml.Node], path) -> Optional[int]:
    """1-based line of the YAML node at ``path``, or of its deepest ancestor."""
    line = node.start_mark.line + 1 if node is not None else None
    for part in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == part), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            nxt = node.value[part]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError([(line, f"not valid YAML: {getattr(exc, 'problem', exc)}")]) from None
    if not isinstance(data, dict):
        raise ScenarioError([(1, "scenario must be a mapping of sections")])
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ScenarioError([(_line_of(root, e.absolute_path), _describe(e)) for e in errors])
    problems = _semantic_checks(data)
    if problems:
        raise ScenarioError([(_line_of(root, p), msg) for p, msg in problems])
    digest = hashlib.sha256(text.encode()).hexdigest()
    return Scenario(data, digest, source)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([(None, f"cannot read {path}: {exc.strerror}")]) from None
    return parse_scenario(text, str(path))


def _describe(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def _semantic_checks(data: dict) -> list[tuple[list, str]]:
    out: list[tuple[list, str]] = []
    nodes = data["topology"]["nodes"]
    ids: dict[int, int] = {}
    for i, n in enumerate(nodes):
        if n["id"] in ids:
            out.append((["topology", "nodes", i, "id"], f"node id {n['id']:#x} used twice"))
        ids[n["id"]] = i
        role = n.get("role", "SECURE_NODE")
        if role != "NON_SECURE" and "level" not in n:
            out.append((["topology", "nodes", i], f"{role} node {n['id']:#x} needs a level"))
    sgtw = [i for i, n in enumerate(nodes) if n.get("role") == "SGTW"]
    if len(sgtw) != 1:
        out.append((["topology", "nodes"], f"exactly one SGTW required, found {len(sgtw)}"))
    levels = data.get("keys", {}).get("levels", 5)
    for i, n in enumerate(nodes):
        if n.get("level", 1) > levels:
            out.append((["topology", "nodes", i, "level"], f"level {n['level']} above {levels} levels"))
    seen = set()
    for i, f in enumerate(data["topology"].get("frames", [])):
        key = (f.get("segment", MAIN), f["id"])
        if key in seen:
            out.append((["topology", "frames", i, "id"], f"frame id {f['id']:#x} configured twice"))
        seen.add(key)
        if f["sender"] not in ids:
            out.append((["topology", "frames", i, "sender"], f"unknown sender {f['sender']:#x}"))
        elif f.get("level") is not None:
            sender = nodes[ids[f["sender"]]]
            if sender.get("role") == "NON_SECURE":
                out.append((["topology", "frames", i, "sender"], "legacy node cannot sign frames"))
            elif sender.get("level", 1) > f["level"]:
                out.append((["topology", "frames", i, "level"],
                            f"sender at level {sender['level']} cannot sign level {f['level']}"))
    for i, inc in enumerate(data.get("incidents", [])):
        if inc["node"] not in ids:
            out.append((["incidents", i, "node"], f"incident names unknown node {inc['node']:#x}"))
    for i, a in enumerate(data.get("attacks", [])):
        if a["kind"] == "HW_REPLACE" and a.get("victim") not in ids:
            out.append((["attacks", i], "HW_REPLACE needs a victim that is a node"))
        if a["kind"] == "MITM_DOWNSTREAM" and a.get("tap_node") not in ids:
            out.append((["attacks", i], "MITM_DOWNSTREAM needs a tap_node that is a node"))
    return out


# -- building run inputs ---------------------------------------------------------------

def _bus(spec: dict, bus: Bus, name: str, arb: int, data: int) -> BusConfig:
    kw: dict[str, Any] = {"arbitration_baud": spec.get("arbitration_baud", arb),
                          "data_baud": spec.get("data_baud", data), "name": name}
    if "queue_depth" in spec:
        kw["queue_depth"] = spec["queue_depth"]
    if "header_bits" in spec:
        kw["header_bits"] = spec["header_bits"]
    return BusConfig(bus, **kw)


def hierarchy(scn: Scenario) -> KeyHierarchy:
    k = scn.section("keys")
    subs = tuple(SubDomainConfig(sd["gateway_level"], frozenset(sd["members"]),
                                 sd.get("key_bytes", 8), sd.get("rolling_period_us", 0))
                 for sd in k.get("subdomains", []))
    return KeyHierarchy(n_levels=k.get("levels", 5), key_len=k.get("key_bytes", 32),
                        short_key_len=k.get("short_key_bytes", 16),
                        rolling_period_us=k.get("rolling_period_us", 1_000_000),
                        short_period_factor=k.get("short_period_factor", 2), subdomains=subs)


def cost_model(scn: Scenario) -> CostModel:
    c = scn.section("tasks").get("cost_model", {})
    base = CostModel()
    model = CostModel(c.get("c0_us", base.c0), c.get("per_digest_bit_us", base.c1),
                      c.get("per_block_us", base.c2), c.get("compare_us", base.compare_cost_us))
    overrides = {o["id"]: o["cost_us"] for o in c.get("overrides", [])}
    return model.with_overrides(overrides) if overrides else model


def network_config(scn: Scenario, seed: Optional[int] = None) -> NetworkConfig:
    buses = scn.section("buses")
    topo = scn.raw["topology"]
    sec = scn.section("security")
    nodes = [NodeSpec(n["id"], n.get("level"), Role(n.get("role", "SECURE_NODE")),
                      n.get("speculation", False), n.get("segment", MAIN), n.get("name", ""))
             for n in topo["nodes"]]
    frames = [FrameSpec(f["id"], f["sender"], f.get("level"), f.get("period_us", 10_000),
                        f.get("data_len", 24), f.get("steady", False), f.get("change_prob", 0.0),
                        f.get("offset_us", 0), f.get("segment", MAIN))
              for f in topo.get("frames", [])]
    routes = [RouteSpec(r["id"], r["from"], r["level"]) for r in topo.get("routes", [])]
    kw: dict[str, Any] = {}
    if "grace_us" in scn.section("keys"):
        kw["grace_us"] = scn.section("keys")["grace_us"]
    return NetworkConfig(
        nodes=nodes, frames=frames, hierarchy=hierarchy(scn),
        public_bus=_bus(buses.get("public", {}), Bus.PUBLIC, MAIN, 500_000, 2_000_000),
        secure_bus=_bus(buses.get("secure", {}), Bus.SECURE, "SECURE", 500_000, 500_000),
        sub_bus=_bus(buses.get("sub", {}), Bus.PUBLIC, SUB, 500_000, 500_000),
        routes=routes, cost_model=cost_model(scn), cmac=sec.get("cmac", True),
        rolling_counter=sec.get("rolling_counter", True), window=sec.get("window", 8),
        task_period_us=scn.section("tasks").get("period_us", 25_000),
        seed=scn.seed if seed is None else seed, **kw)


def attack_scripts(scn: Scenario) -> list[tuple[AttackScript, dict]]:
    """Attack scripts with their run options (mitigations, baseline knobs)."""
    out = []
    for a in scn.raw.get("attacks", []):
        rules = tuple(MitmRule(r["id"], RuleAction(r["action"]), r.get("offset", 0),
                               r.get("value", 0xFF)) for r in a.get("rules", []))
        key = a.get("foreign_k_apk")
        script = AttackScript(
            kind=AttackKind(a["kind"]), start_us=a.get("start_us", 0), end_us=a.get("end_us"),
            rules=rules, tap_node=a.get("tap_node"), inject_ids=tuple(a.get("inject_ids", ())),
            inject_period_us=a.get("inject_period_us", 20_000),
            replay_ids=tuple(a.get("replay_ids", ())), replay_delay_us=a.get("replay_delay_us", 50_000),
            flood_id=a.get("flood_id", 0), flood_rate_per_s=a.get("flood_rate_per_s", 0.0),
            flood_len=a.get("flood_len", 64), victim=a.get("victim"),
            foreign_k_apk=bytes.fromhex(key) if key else None,
            suppress_reaction=a.get("suppress_reaction", False), name=a.get("name", a["kind"]))
        opts = {"mitigations": a.get("mitigations", False), "baseline": a.get("baseline", {})}
        out.append((script, opts))
    return out
