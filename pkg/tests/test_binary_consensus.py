import random

import pytest

from sbchain.binary_consensus import (
    BcMessage,
    BinaryConsensus,
    TimerRequest,
    decode_bc,
    encode_bc,
    mask_to_set,
    set_to_mask,
)
from sbchain.core import ContractViolation, DecodeError
from sbchain.reliable_broadcast import MsgType
from sbchain.sim.explore import BcWorld, explore, random_runs


def split(outs):
    sends = [o for o in outs if not isinstance(o, TimerRequest)]
    timers = [o for o in outs if isinstance(o, TimerRequest)]
    return sends, timers


def run(n, f, inputs, byz=(), rng=None, flood=False, max_steps=500_000):
    """Deliver messages in random (or FIFO) order; fire timers only when idle.

    Byzantine nodes send nothing unless ``flood``, in which case they push
    EST, AUX and COORD for both bits in every round up to 6.
    """
    nodes = {i: BinaryConsensus(1, 0, i, n, f, timeout_base=10) for i in inputs}
    pending, timers = [], []
    for i, bit in inputs.items():
        s, t = split(nodes[i].propose(bit))
        pending += s
        timers += [(i, x.round) for x in t]
    if flood:
        for b in byz:
            for r in range(1, 7):
                for dst in inputs:
                    for bit in (0, 1):
                        pending.append((dst, BcMessage(MsgType.EST, 1, 0, b, r, bit)))
                        pending.append((dst, BcMessage(MsgType.COORD, 1, 0, b, r, bit)))
                    pending.append((dst, BcMessage(MsgType.AUX, 1, 0, b, r, 3)))
    steps = 0
    while pending or timers:
        steps += 1
        assert steps < max_steps
        if pending:
            k = rng.randrange(len(pending)) if rng else 0
            dst, msg = pending.pop(k)
            if dst not in nodes:
                continue
            outs = nodes[dst].handle(msg)
        else:
            i, r = timers.pop(0)
            outs = nodes[i].on_timeout(r)
            dst = i
        s, t = split(outs)
        pending += s
        timers += [(dst, x.round) for x in t]
    return nodes


def decisions(nodes):
    return {i: x.decided for i, x in nodes.items()}


def test_unanimous_one_without_faults():
    nodes = run(4, 0, {i: 1 for i in range(4)})
    assert set(decisions(nodes).values()) == {1}


def test_unanimous_zero():
    nodes = run(4, 1, {i: 0 for i in range(4)})
    assert set(decisions(nodes).values()) == {0}


def test_single_round_trace_decides_one():
    # n=4, f=1, node 1 coordinates round 1 and round 1 has parity 1.
    bc = BinaryConsensus(1, 0, 1, 4, 1)
    out = bc.propose(1)
    sends, timers = split(out)
    assert {m.kind for _, m in sends} == {MsgType.EST} and timers[0].round == 1
    for s in (0, 2):
        bc.handle(BcMessage(MsgType.EST, 1, 0, s, 1, 1))
    out = bc.handle(BcMessage(MsgType.EST, 1, 0, 1, 1, 1))
    assert bc.bin_values(1) == {1}
    kinds = [m.kind for _, m in split(out)[0]]
    assert MsgType.COORD in kinds
    bc.handle(BcMessage(MsgType.COORD, 1, 0, 1, 1, 1))
    for s in (0, 1):
        bc.handle(BcMessage(MsgType.AUX, 1, 0, s, 1, set_to_mask({1})))
    assert bc.decided is None
    bc.handle(BcMessage(MsgType.AUX, 1, 0, 2, 1, set_to_mask({1})))
    assert (bc.decided, bc.decided_round) == (1, 1)


def test_mixed_values_adopt_parity():
    bc = BinaryConsensus(1, 0, 0, 4, 1)
    bc.propose(0)
    for s in (1, 2, 3):
        bc.handle(BcMessage(MsgType.EST, 1, 0, s, 1, 0))
        bc.handle(BcMessage(MsgType.EST, 1, 0, s, 1, 1))
    assert bc.bin_values(1) == {0, 1}
    bc.on_timeout(1)
    for s, mask in ((1, 1), (2, 2), (3, 3)):
        bc.handle(BcMessage(MsgType.AUX, 1, 0, s, 1, mask))
    assert bc.decided is None and bc.round == 2 and bc.est == 1


def test_proposing_both_bits_is_an_error():
    bc = BinaryConsensus(1, 0, 0, 4, 1)
    bc.propose(1)
    assert bc.propose(1) == []
    with pytest.raises(ContractViolation):
        bc.propose(0)


def test_malformed_values_dropped_and_counted():
    bc = BinaryConsensus(1, 0, 0, 4, 1)
    bc.propose(1)
    bc.handle(BcMessage(MsgType.EST, 1, 0, 1, 1, 7))
    bc.handle(BcMessage(MsgType.AUX, 1, 0, 1, 1, 0))
    bc.handle(BcMessage(MsgType.COORD, 1, 0, 2, 1, 1))  # node 2 does not coordinate round 1
    bc.handle(BcMessage(MsgType.EST, 1, 0, 1, 0, 1))
    assert bc.dropped == 4


def test_decided_instance_absorbs_messages():
    nodes = run(4, 1, {i: 1 for i in range(4)})
    bc = nodes[0]
    assert bc.halted
    before = bc.snapshot()
    assert bc.handle(BcMessage(MsgType.EST, 1, 0, 1, 9, 0)) == []
    assert bc.snapshot() == before and bc.decided == 1


def test_timeouts_double_each_round():
    bc = BinaryConsensus(1, 0, 0, 4, 1, timeout_base=7)
    out = []
    for r in (1, 2, 3):
        bc._enter_round(r, out)
    assert [t.delay for t in out if isinstance(t, TimerRequest)] == [7, 14, 28]


def test_silent_byzantine_decides_within_three_rounds():
    for inputs in ({0: 1, 1: 1, 2: 0}, {0: 0, 1: 1, 2: 0}, {0: 1, 1: 1, 2: 1}):
        nodes = run(4, 1, inputs, byz=(3,))
        assert len(set(decisions(nodes).values())) == 1
        assert all(x.decided_round <= 3 for x in nodes.values())


@pytest.mark.parametrize("n", [4, 7, 10])
def test_flooding_byzantines_never_break_agreement(n):
    f = (n - 1) // 3
    rng = random.Random(100 + n)
    runs = {4: 500, 7: 120, 10: 60}[n]
    saw_both = 0
    for _ in range(runs):
        inputs = {i: rng.randrange(2) for i in range(n - f)}
        nodes = run(n, f, inputs, byz=range(n - f, n), rng=rng, flood=True)
        got = set(decisions(nodes).values())
        assert len(got) == 1 and None not in got
        if len(set(inputs.values())) == 1:
            assert got == set(inputs.values())
        saw_both += any(x.bin_values(1) == {0, 1} for x in nodes.values())
    assert saw_both > 0


def test_exhaustive_small_depth():
    byz = {r: {d: (r + d) % 2 for d in range(3)} for r in range(1, 5)}
    stats = explore(BcWorld({0: 1, 1: 1, 2: 0}, byz_bits=byz), depth=6)
    assert stats.states > 0


def test_random_schedules_with_byzantine_bits():
    def make(rng):
        inputs = {i: rng.randrange(2) for i in range(3)}
        byz = {r: {d: rng.randrange(2) for d in range(3)} for r in range(1, 5)}
        return BcWorld(inputs, byz_bits=byz)

    stats = random_runs(make, runs=200, seed=3)
    assert stats.leaves == 200


def test_wire_round_trip_and_masks():
    m = BcMessage(MsgType.AUX, 3, 2, 1, 5, 3)
    assert decode_bc(encode_bc(m)) == m
    assert mask_to_set(3) == {0, 1} and set_to_mask({1}) == 2
    with pytest.raises(DecodeError):
        decode_bc(encode_bc(m)[:-1])
