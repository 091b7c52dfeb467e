import dataclasses
import pathlib

import pytest

from simcan.conformance import (
    PROTOCOL_STEPS, Step, Transcript, check_transcript, load_golden, reference_transcripts,
)
from simcan.errors import NoLog
from simcan.scenario import load_scenario

ROOT = pathlib.Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "conformance"


@pytest.fixture(scope="module")
def fresh():
    return reference_transcripts(ROOT / "scenarios")


@pytest.mark.parametrize("protocol", sorted(PROTOCOL_STEPS))
def test_reference_run_matches_golden(fresh, protocol):
    golden = load_golden(GOLDEN / f"{protocol}.json")
    assert golden.steps, "every protocol has a non-empty golden transcript"
    rep = check_transcript(fresh[protocol], golden)
    assert rep == {"protocol": protocol, "conformant": True, "diff": {}}


def test_goldens_name_the_scenario_they_came_from():
    digests = {load_scenario(ROOT / "scenarios" / f"{n}.scn").digest
               for n in ("baseline_2node", "deprecation")}
    for path in GOLDEN.glob("*.json"):
        assert load_golden(path).scenario_digest in digests


def test_provisioning_follows_the_handshake_order_per_node():
    t = load_golden(GOLDEN / "provisioning.json")
    nodes = {s.selector for s in t.steps if s.msg_type == "PUBKEY_G"}
    assert nodes == {0x10, 0x11}
    for node in nodes:
        mine = [s.msg_type for s in t.steps
                if (s.sender == 1 and s.selector == node) or s.sender == node]
        handshake = [m for m in mine if m != "DISCOVERY"]
        assert handshake[:4] == ["PUBKEY_G", "PUBKEY_N", "SECRET_G", "SECRET_N"]
        assert set(handshake[4:]) == {"KEY_DELIVERY"}
    # the gateway probes once, every node answers once, before any handshake
    assert [s.msg_type for s in t.steps[:3]] == ["DISCOVERY"] * 3


def test_swapped_steps_report_the_first_divergence():
    golden = load_golden(GOLDEN / "provisioning.json")
    steps = list(golden.steps)
    steps[4], steps[5] = steps[5], steps[4]
    steps = [dataclasses.replace(s, step=i + 1) for i, s in enumerate(steps)]
    rep = check_transcript(dataclasses.replace(golden, steps=steps), golden)
    assert not rep["conformant"]
    assert rep["diff"]["kind"] == "step" and rep["diff"]["step"] == 5


def test_extra_frame_is_a_length_mismatch():
    golden = load_golden(GOLDEN / "challenge_response.json")
    extra = Step(len(golden.steps) + 1, 1, "CHALLENGE", 0x10, 1, 66)
    rep = check_transcript(dataclasses.replace(golden, steps=golden.steps + [extra]), golden)
    assert rep["diff"] == {"kind": "length", "expected": len(golden.steps), "got": len(golden.steps) + 1}


def test_wrong_final_epochs_are_reported():
    golden = load_golden(GOLDEN / "deprecation.json")
    epochs = {k: dict(v) for k, v in golden.epochs.items()}
    epochs["0x14"]["3"] = 1
    rep = check_transcript(dataclasses.replace(golden, epochs=epochs), golden)
    assert rep["diff"]["kind"] == "epochs"


def test_deprecation_rekeys_everyone_but_the_compromised_node():
    t = load_golden(GOLDEN / "deprecation.json")
    assert 0x14 not in {s.selector for s in t.steps}
    assert t.epochs["0x14"] == {"3": 0, "4": 0, "5": 0}
    assert all(t.epochs[n]["3"] == 1 for n in ("0x01", "0x12", "0x13"))
    # higher-privilege keys are untouched
    assert t.epochs["0x10"]["2"] == 0


def test_missing_log_is_an_error():
    with pytest.raises(NoLog):
        check_transcript(None, load_golden(GOLDEN / "rolling.json"))


def test_transcript_round_trips_through_json():
    t = load_golden(GOLDEN / "rolling.json")
    assert Transcript.from_dict(t.to_dict()) == t
