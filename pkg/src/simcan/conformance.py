"""Golden transcripts of the secure-bus protocols.

A transcript keeps what any conforming implementation must reproduce: the
order of secure-bus frames with their cleartext header (message type,
selector, sender) and body length, plus the key epochs every node ends on.
Ciphertext and timing are left out, so transcripts survive a change of
crypto library or processor speed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from simcan.bus import EventKind
from simcan.errors import NoLog
from simcan.frames import MsgType, split_secure_id
from simcan.network import Network

FORMAT_VERSION = 1
ROLL_WINDOW_US = 50_000

# message type -> protocol step it implements, per protocol
PROTOCOL_STEPS: dict[str, dict[MsgType, int]] = {
    "provisioning": {MsgType.DISCOVERY: 1, MsgType.PUBKEY_G: 4, MsgType.PUBKEY_N: 5,
                     MsgType.SECRET_G: 6, MsgType.SECRET_N: 7, MsgType.KEY_DELIVERY: 9},
    "rolling": {MsgType.KEY_ROLL: 10},
    # 1 detection and 2 marking are gateway-internal; 3 re-keys each honest holder
    "deprecation": {MsgType.DEPRECATE: 3},
    "challenge_response": {MsgType.CHALLENGE: 1, MsgType.CHALLENGE_SHARE: 2, MsgType.CHALLENGE_RESP: 3},
}


@dataclass(frozen=True)
class Step:
    step: int
    protocol_step: int
    msg_type: str
    selector: int
    sender: int
    body_len: int

    def to_dict(self) -> dict:
        return {"step": self.step, "protocol_step": self.protocol_step, "msg_type": self.msg_type,
                "selector": self.selector, "sender": self.sender, "body_len": self.body_len}


@dataclass
class Transcript:
    protocol: str
    scenario_digest: str
    steps: list[Step]
    epochs: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "protocol": self.protocol,
                "scenario_digest": self.scenario_digest,
                "steps": [s.to_dict() for s in self.steps], "final_epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "Transcript":
        steps = [Step(**s) for s in d["steps"]]
        return cls(d["protocol"], d["scenario_digest"], steps, d.get("final_epochs", {}))


def node_epochs(net: Network) -> dict[str, dict[str, int]]:
    out = {}
    for node_id, dn in sorted(net.data.items()):
        if dn.store is not None:
            out[f"{node_id:#04x}"] = {str(lv): dn.store.get(lv).epoch for lv in dn.store.levels()}
    return out


def record(net: Network, protocol: str, scenario_digest: str, start_us: int = 0,
           end_us: Optional[int] = None) -> Transcript:
    """Transcript of ``protocol`` frames sent on the secure bus in [start, end]."""
    steps_of = PROTOCOL_STEPS[protocol]
    steps = []
    for ev in net.secure_bus.events:
        if ev.kind is not EventKind.TX_END or ev.time_us < start_us:
            continue
        if end_us is not None and ev.time_us > end_us:
            break
        msg_type, selector = split_secure_id(ev.frame_id)
        if msg_type not in steps_of:
            continue
        steps.append(Step(len(steps) + 1, steps_of[msg_type], msg_type.name, selector, ev.origin,
                          len(ev.payload)))
    return Transcript(protocol, scenario_digest, steps, node_epochs(net))


def check_transcript(run_log: Optional[Transcript], golden: Transcript) -> dict:
    """Compare a run against a golden transcript.

    Returns an empty ``diff`` on conformance, otherwise the first divergent
    step (or the length mismatch when one is a prefix of the other).
    """
    if run_log is None:
        raise NoLog("no transcript recorded for this run")
    diff: dict = {}
    for got, want in zip(run_log.steps, golden.steps):
        if got != want:
            diff = {"kind": "step", "step": want.step, "expected": want.to_dict(), "got": got.to_dict()}
            break
    else:
        if len(run_log.steps) != len(golden.steps):
            diff = {"kind": "length", "expected": len(golden.steps), "got": len(run_log.steps)}
        elif run_log.epochs != golden.epochs:
            diff = {"kind": "epochs", "expected": golden.epochs, "got": run_log.epochs}
    return {"protocol": golden.protocol, "conformant": not diff, "diff": diff}


def load_golden(path) -> Transcript:
    return Transcript.from_dict(json.loads(Path(path).read_text()))


def save_golden(t: Transcript, path) -> None:
    Path(path).write_text(json.dumps(t.to_dict(), indent=1, sort_keys=True) + "\n")


# -- reference runs ---------------------------------------------------------------------------

def reference_transcripts(scenarios_dir) -> dict[str, Transcript]:
    """The runs the shipped golden files were recorded from."""
    from simcan.metrics import run_scenario
    from simcan.scenario import load_scenario

    d = Path(scenarios_dir)
    base = load_scenario(d / "baseline_2node.scn")
    net = run_scenario(base).network
    t0 = net.gateway.provisioned_at
    # first round where full-length keys roll (short keys roll more often)
    first_roll = next(t for t, _, _, short in net.gateway.roll_log if not short)
    out = {
        "provisioning": record(net, "provisioning", base.digest, 0, t0),
        "rolling": record(net, "rolling", base.digest, first_roll, first_roll + ROLL_WINDOW_US),
        "challenge_response": record(net, "challenge_response", base.digest, t0),
    }
    dep = load_scenario(d / "deprecation.scn")
    dnet = run_scenario(dep).network
    out["deprecation"] = record(dnet, "deprecation", dep.digest, dnet.gateway.provisioned_at + 1)
    return out

