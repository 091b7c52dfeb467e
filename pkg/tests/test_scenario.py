import pathlib
import textwrap

import pytest

from simcan.attacks import AttackKind, RuleAction
from simcan.errors import ScenarioError
from simcan.network import MAIN, SUB, Role
from simcan.scenario import (
    attack_scripts, cost_model, hierarchy, load_scenario, network_config, parse_scenario,
)

ROOT = pathlib.Path(__file__).resolve().parents[1]
SHIPPED = sorted((ROOT / "scenarios").glob("*.scn")) + sorted((ROOT / "attacks").glob("*.scn"))

MINIMAL = textwrap.dedent("""\
    version: 1
    name: tiny
    seed: 3
    horizon_us: 100000
    topology:
      nodes:
        - {id: 0x01, role: SGTW, level: 1}
        - {id: 0x10, level: 2}
      frames:
        - {id: 0x100, sender: 0x10, level: 2, period_us: 10000}
    """)


def lines_of(exc: ScenarioError) -> list:
    return [line for line, _ in exc.diagnostics]


def test_minimal_scenario_parses_with_defaults():
    scn = parse_scenario(MINIMAL)
    assert scn.name == "tiny" and scn.seed == 3 and scn.horizon_us == 100_000
    cfg = network_config(scn)
    assert [n.role for n in cfg.nodes] == [Role.SGTW, Role.SECURE_NODE]
    assert cfg.frames[0].frame_id == 0x100 and cfg.frames[0].segment == MAIN
    assert cfg.cmac and cfg.rolling_counter and cfg.window == 8
    assert network_config(scn, seed=99).seed == 99


def test_digest_ties_reports_to_exact_text():
    assert parse_scenario(MINIMAL).digest == parse_scenario(MINIMAL).digest
    assert parse_scenario(MINIMAL).digest != parse_scenario(MINIMAL + "# edit\n").digest


def test_schema_error_points_at_the_offending_line():
    bad = MINIMAL.replace("- {id: 0x10, level: 2}", "- {id: 0x10, level: 2, role: BOSS}")
    with pytest.raises(ScenarioError) as err:
        parse_scenario(bad)
    assert lines_of(err.value) == [8]
    assert "topology/nodes/1/role" in err.value.diagnostics[0][1]


def test_missing_seed_is_rejected():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(MINIMAL.replace("seed: 3\n", ""))
    assert "seed" in err.value.diagnostics[0][1]


def test_yaml_syntax_error_has_a_line():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(MINIMAL + "  broken: [1, 2\n")
    assert lines_of(err.value)[0] is not None


def test_unknown_section_is_rejected():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(MINIMAL + "extras: {}\n")
    assert "extras" in err.value.diagnostics[0][1]


@pytest.mark.parametrize("edit, line, needle", [
    ("- {id: 0x10, level: 2}", 8, "level 9 above 5"),
    ("sender: 0x10", 10, "unknown sender"),
    ("{id: 0x01, role: SGTW, level: 1}", 7, "exactly one SGTW"),
])
def test_semantic_errors(edit, line, needle):
    repl = {"- {id: 0x10, level: 2}": "- {id: 0x10, level: 9}",
            "sender: 0x10": "sender: 0x33",
            "{id: 0x01, role: SGTW, level: 1}": "{id: 0x01, level: 1}"}[edit]
    with pytest.raises(ScenarioError) as err:
        parse_scenario(MINIMAL.replace(edit, repl))
    assert any(ln == line and needle in msg for ln, msg in err.value.diagnostics), err.value.diagnostics


def test_sender_cannot_sign_above_its_privilege():
    text = MINIMAL.replace("- {id: 0x10, level: 2}", "- {id: 0x10, level: 3}")
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    assert "cannot sign level 2" in err.value.diagnostics[0][1]


def test_missing_file_is_a_scenario_error(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "absent.scn")


def test_calibration_and_keys_come_from_the_file():
    scn = load_scenario(ROOT / "scenarios" / "speculation.scn")
    model = cost_model(scn)
    assert model.c0 == 2.2 and model.compare_cost_us == 1.4
    assert model.mac_cost_us(256, 26, 0x100) == 70.0 and model.mac_cost_us(256, 26, 0x150) == 2.2
    sub = load_scenario(ROOT / "scenarios" / "subdomain.scn")
    h = hierarchy(sub)
    assert h.n_levels == 6 and h.subdomains[0].key_len == 8
    cfg = network_config(sub)
    assert {f.segment for f in cfg.frames} == {MAIN, SUB}
    assert [(r.frame_id, r.src_segment, r.dst_level) for r in cfg.routes] == [(0x100, MAIN, 6), (0x300, SUB, 2)]


def test_attack_scripts_carry_rules_and_options():
    scn = load_scenario(ROOT / "attacks" / "mitm_obd.scn")
    (on, on_opts), (off, off_opts) = attack_scripts(scn)
    assert on.kind is AttackKind.MITM_OBD
    assert [r.action for r in on.rules] == [RuleAction.PASS, RuleAction.CORRUPT,
                                            RuleAction.SUPPRESS, RuleAction.MUTATE]
    assert on_opts["baseline"] == {} and off_opts["baseline"] == {"cmac": False}


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.name)
def test_every_shipped_scenario_validates(path):
    scn = load_scenario(path)
    assert scn.name == path.stem
