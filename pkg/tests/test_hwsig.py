import collections
import json

import pytest
from scipy import stats

from simcan import crypto
from simcan.bus import BusConfig, EventLoop, VirtualBus
from simcan.crypto import KeyKind, KeyMaterial, RandomSource
from simcan.errors import NoMembers
from simcan.frames import Bus, MsgType, split_secure_id
from simcan.hwsig import (
    Challenge, ChallengeInitiator, ChallengeResponder, HwSigLog, HwVerdict, Response,
    expected_response,
)
from simcan.keys import KeyAuthority, KeyHierarchy, KeyStatus
from simcan.provisioning import GatewayAgent, NodeAgent

SECURE_500K = BusConfig(Bus.SECURE, 500_000, 500_000, name="SECURE")


def apk(tag: str) -> KeyMaterial:
    return KeyMaterial(RandomSource(tag).bytes(32), KeyKind.CARMAKER_KEY)


K_A = apk("carmaker-a")


def fleet(levels=(3, 3, 3), seed=11, node_keys=None, react=True, starvation_us=0,
          silent=(), period_us=100_000, on_violation=None):
    loop = EventLoop()
    bus = VirtualBus(SECURE_500K, loop)
    rng = RandomSource(seed)
    auth = KeyAuthority(KeyHierarchy(), rng.fork("auth"))
    gw = GatewayAgent(bus, auth, rng.fork("gw"))
    node_keys = node_keys or {}
    nodes = [NodeAgent(0x10 + i, lv, bus, rng.fork(f"n{i}"), node_keys.get(0x10 + i, K_A))
             for i, lv in enumerate(levels)]
    gw.start()
    loop.run(2_000_000)
    assert gw.provisioned_at is not None
    hwlog = HwSigLog()
    init = ChallengeInitiator(gw, K_A, rng.fork("ch"), hwlog, period_us=period_us, react=react,
                              on_violation=on_violation)
    resp = {}
    for n in nodes:
        peers = [m.node_id for m in nodes if m.level == n.level]
        r = ChallengeResponder(n, n.store.k_apk, hwlog, peers, starvation_us,
                               silent=n.node_id in silent)
        if starvation_us:
            r.start_monitor(period_us)
        resp[n.node_id] = r
    return loop, bus, gw, nodes, init, resp, hwlog


def test_challenge_sends_two_secure_frames_to_a_member():
    loop, bus, gw, nodes, init, resp, hwlog = fleet()
    sent_before = len(bus.events)
    ch = init.issue_challenge(3)
    assert ch.target in [n.node_id for n in nodes]
    loop.run(loop.now + 5_000)
    types = [split_secure_id(e.frame_id)[0] for e in bus.events[sent_before:]
             if e.kind.name == "TX_END" and e.origin == gw.node_id]
    assert types == [MsgType.CHALLENGE, MsgType.CHALLENGE_SHARE]


def test_target_selection_is_uniform_and_reproducible():
    def draws(seed):
        loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(3,) * 8, seed=seed)
        members = init.members(3)
        init.rng = RandomSource(seed)
        return [members[init.rng.randrange(len(members))] for _ in range(10_000)], members

    seq, members = draws(5)
    assert draws(5)[0] == seq
    counts = collections.Counter(seq)
    _, p = stats.chisquare([counts[m] for m in members])
    assert p > 0.001


def test_issue_challenge_draws_from_candidates():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(3,) * 4)
    targets = collections.Counter(init.issue_challenge(3).target for _ in range(400))
    assert set(targets) == {n.node_id for n in nodes}


def test_empty_level_has_no_members():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(3, 3))
    with pytest.raises(NoMembers):
        init.issue_challenge(4)


def test_deprecated_level_defers_challenge():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(3, 3))
    gw.data_store.mark_deprecated(3)
    assert init.issue_challenge(3) is None


def test_genuine_node_is_authentic_at_every_verifier():
    loop, bus, gw, nodes, init, resp, hwlog = fleet()
    ch = init.issue_challenge(3, [0x10])
    loop.run(loop.now + 50_000)
    out = hwlog.outcomes[ch.cid]
    assert out.verdict is HwVerdict.AUTHENTIC
    assert out.responses == {gw.node_id: Response.PASS, 0x11: Response.PASS, 0x12: Response.PASS}


def test_reworked_ecu_fails_at_every_verifier_and_level_is_isolated():
    k_b = apk("carmaker-b")
    loop, bus, gw, nodes, init, resp, hwlog = fleet(node_keys={0x11: k_b})
    ch = init.issue_challenge(3, [0x11])
    loop.run(loop.now + 100_000)
    out = hwlog.outcomes[ch.cid]
    assert out.verdict is HwVerdict.VIOLATION
    assert set(out.responses.values()) == {Response.FAIL}
    assert 0x11 in gw.authority.isolated
    # honest peers moved on to fresh keys, the replaced node did not
    assert nodes[0].store.get(3).key == gw.data_store.get(3).key
    assert nodes[1].store.get(3).key != gw.data_store.get(3).key
    assert not any(r.suspect for r in resp.values())


def test_reworked_verifier_is_blamed_instead_of_the_honest_target():
    k_b = apk("carmaker-b")
    loop, bus, gw, nodes, init, resp, hwlog = fleet(node_keys={0x11: k_b})
    ch = init.issue_challenge(3, [0x10])
    loop.run(loop.now + 100_000)
    out = hwlog.outcomes[ch.cid]
    # any dissent is a violation, but the gateway's own check clears the target
    assert out.verdict is HwVerdict.VIOLATION
    assert out.responses[0x11] is Response.FAIL and out.responses[gw.node_id] is Response.PASS
    assert out.culprits(gw.node_id) == [0x11]
    assert gw.authority.isolated == {0x11}
    assert hwlog.audit[-1]["culprits"] == [0x11]


def test_every_wrong_carmaker_key_fails():
    rng = RandomSource("wrong-keys")
    r = rng.nonce()
    want = expected_response(K_A, r)
    for _ in range(1000):
        wrong = KeyMaterial(rng.bytes(32), KeyKind.CARMAKER_KEY)
        assert not crypto.digest_equal(expected_response(wrong, r), want)


def test_replaced_hardware_without_key_sends_garbage():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(node_keys={0x12: None})
    nodes[2].store.k_apk = None
    resp[0x12].k_apk = None
    ch = init.issue_challenge(3, [0x12])
    loop.run(loop.now + 100_000)
    assert hwlog.outcomes[ch.cid].verdict is HwVerdict.VIOLATION


def test_silent_node_times_out_as_violation():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(silent=(0x10,))
    ch = init.issue_challenge(3, [0x10])
    loop.run(loop.now + 100_000)
    out = hwlog.outcomes[ch.cid]
    assert out.verdict is HwVerdict.VIOLATION
    assert set(out.responses.values()) == {Response.TIMEOUT}


def test_gateway_that_does_not_react_is_suspected_by_every_verifier():
    k_b = apk("carmaker-b")
    loop, bus, gw, nodes, init, resp, hwlog = fleet(node_keys={0x11: k_b}, react=False)
    init.issue_challenge(3, [0x11])
    loop.run(loop.now + 200_000)
    assert resp[0x10].suspect and resp[0x12].suspect
    assert {v for _, v, _ in hwlog.suspects} == {0x10, 0x12}
    assert 0x11 not in gw.authority.isolated


def test_starved_node_makes_gateway_suspect():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(3, 3, 3), starvation_us=250_000)
    # a tampered gateway that never picks 0x12
    for _ in range(6):
        init.issue_challenge(3, [0x10, 0x11])
        loop.run(loop.now + 100_000)
    assert resp[0x10].suspect and resp[0x11].suspect
    assert any("[18]" in why for _, _, why in hwlog.suspects)


def test_periodic_rounds_challenge_everyone_and_stay_quiet():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(2, 2, 3, 3, 4), starvation_us=250_000)
    init.start()
    loop.run(loop.now + 1_000_000)
    targets = collections.Counter(o.challenge.target for o in hwlog.outcomes.values())
    # the 0x14 node is alone at level 4 and is challenged as well
    assert set(targets) == {n.node_id for n in nodes}
    assert min(targets.values()) >= 9
    assert all(o.verdict in (HwVerdict.AUTHENTIC, None) for o in hwlog.outcomes.values())
    assert not hwlog.suspects


def test_nonces_are_unique():
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(2, 3, 3, 4))
    init.start()
    loop.run(loop.now + 2_000_000)
    assert len(hwlog.nonces) > 50
    assert len(set(hwlog.nonces)) == len(hwlog.nonces)


def test_foreign_carmaker_compromise_does_not_change_verdicts():
    # network B uses its own K_apk; an attacker holding K_apk of carmaker A gains nothing
    k_b = apk("carmaker-b")
    loop, bus, gw, nodes, init, resp, hwlog = fleet(levels=(3, 3, 4),
                                                    node_keys={0x10: k_b, 0x11: k_b, 0x12: K_A})
    init.k_apk = k_b
    for r in (resp[0x10], resp[0x11]):
        r.k_apk = k_b
    resp[0x12].k_apk = K_A    # rework with leaked key of the other carmaker
    ok = init.issue_challenge(3, [0x10])
    loop.run(loop.now + 100_000)
    bad = init.issue_challenge(4, [0x12])
    loop.run(loop.now + 100_000)
    assert hwlog.outcomes[ok.cid].verdict is HwVerdict.AUTHENTIC
    assert hwlog.outcomes[bad.cid].verdict is HwVerdict.VIOLATION


def test_violation_callback_replaces_default_reaction():
    calls = []
    k_b = apk("carmaker-b")
    loop, bus, gw, nodes, init, resp, hwlog = fleet(
        node_keys={0x11: k_b}, on_violation=lambda n, lv: calls.append((n, lv)))
    init.issue_challenge(3, [0x11])
    loop.run(loop.now + 30_000)
    assert calls == [(0x11, 3)]


def test_audit_log_lines_are_json():
    loop, bus, gw, nodes, init, resp, hwlog = fleet()
    init.issue_challenge(3)
    loop.run(loop.now + 50_000)
    rec = json.loads(json.dumps(hwlog.audit[0]))
    assert set(rec) == {"time_us", "level", "target", "verdict", "culprits", "verifiers"}


def test_challenge_body_round_trip():
    ch = Challenge(513, bytes(range(16)), 0x21, 4, 0, 10)
    assert Challenge.parse(ch.body()) == (4, 513, 0x21, bytes(range(16)))
