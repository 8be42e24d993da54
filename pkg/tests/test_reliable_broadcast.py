import random

import pytest

from sbchain.core import BadInput, Block, ContractViolation, DecodeError, make_transaction
from sbchain.reliable_broadcast import MsgType, RbInstance, RbMessage, decode_rb, echo_threshold, encode_rb
from sbchain.sim.explore import RbWorld, explore, random_runs


def block(proposer, amount=1):
    return Block(proposer, (make_transaction("a", 0, "b", amount),), 0)


def test_thresholds():
    assert [echo_threshold(n, (n - 1) // 3) for n in (4, 7, 10)] == [3, 5, 7]


def test_broadcast_emits_one_init_per_node():
    sends = RbInstance(1, 0, 4, 1).broadcast(0, block(0))
    assert len(sends) == 4
    assert sorted(d for d, _ in sends) == [0, 1, 2, 3]
    assert all(m.kind == MsgType.INIT for _, m in sends)


def test_second_broadcast_is_an_error():
    inst = RbInstance(1, 0, 4, 1)
    inst.broadcast(0, block(0))
    with pytest.raises(ContractViolation):
        inst.broadcast(0, block(0, 2))


def test_malformed_block_rejected_before_emission():
    inst = RbInstance(1, 0, 4, 1)
    with pytest.raises(BadInput):
        inst.broadcast(0, block(1))
    sealed = block(0).sealed(None, 0)
    with pytest.raises(BadInput):
        inst.broadcast(0, sealed)
    assert not inst.broadcast_done


def test_duplicate_echo_ignored():
    inst = RbInstance(1, 0, 4, 1)
    d = block(0).payload_digest
    inst.handle(1, RbMessage(MsgType.ECHO, 1, 0, 2, d))
    sends, got = inst.handle(1, RbMessage(MsgType.ECHO, 1, 0, 2, d))
    assert sends == [] and got is None
    assert inst.echo_sets[d] == {2}


def _run(n, f, byz, rng, bcaster=0, behavior="none"):
    """Random-order delivery among ``n`` nodes; ``byz`` nodes follow ``behavior``."""
    nodes = {i: RbInstance(1, bcaster, n, f) for i in range(n) if i not in byz}
    delivered = {}
    pending = []
    v1, v2 = block(bcaster, 1), block(bcaster, 2)
    if bcaster in byz:
        if behavior == "equivocate":
            for dst in nodes:
                v = v1 if rng.random() < 0.5 else v2
                pending.append((dst, RbMessage(MsgType.INIT, 1, bcaster, bcaster, v.payload_digest, v)))
    else:
        pending += nodes[bcaster].broadcast(bcaster, v1)
    for b in byz:
        if behavior == "equivocate":
            for dst in nodes:
                for v in (v1, v2):
                    for kind in (MsgType.ECHO, MsgType.READY):
                        pending.append((dst, RbMessage(kind, 1, bcaster, b, v.payload_digest)))
    late = []
    while pending or late:
        if not pending:
            pending, late = late, []
        dst, msg = pending.pop(rng.randrange(len(pending)))
        if dst not in nodes:
            continue
        if behavior == "delay" and msg.sender in byz and rng.random() < 0.5:
            late.append((dst, msg))
            continue
        sends, got = nodes[dst].handle(dst, msg)
        pending += sends
        if got is not None:
            assert dst not in delivered, "delivered twice"
            delivered[dst] = got.payload_digest
    return nodes, delivered, v1


def test_correct_broadcaster_everyone_delivers():
    nodes, delivered, v1 = _run(4, 1, set(), random.Random(0))
    assert delivered == {i: v1.payload_digest for i in range(4)}


@pytest.mark.parametrize("n", [4, 7, 10])
def test_seeded_adversarial_runs(n):
    f = (n - 1) // 3
    rng = random.Random(n)
    for run in range(170):
        behavior = ("silent", "equivocate", "delay")[run % 3]
        byz_bcaster = run % 2 == 0
        byz = set(range(n - f, n))
        bcaster = n - 1 if byz_bcaster else 0
        nodes, delivered, v1 = _run(n, f, byz, rng, bcaster, behavior)
        values = set(delivered.values())
        assert len(values) <= 1, "agreement"
        if values:
            # agreement plus totality: once one correct node delivers, all do
            assert set(delivered) == set(nodes)
        if not byz_bcaster:
            assert values == {v1.payload_digest}, "validity and integrity"


def test_equivocating_broadcaster_exhaustive_small_depth():
    stats = explore(RbWorld(byz_broadcaster=True), depth=6)
    assert stats.states > 0


def test_equivocation_random_schedules():
    stats = random_runs(lambda r: RbWorld(flip=r.random() < 0.5), runs=200, seed=1)
    assert stats.leaves == 200


@pytest.mark.parametrize("kind", [MsgType.INIT, MsgType.ECHO, MsgType.READY, MsgType.FETCH, MsgType.SUPPLY])
def test_wire_round_trip(kind):
    b = block(2)
    carries = kind in (MsgType.INIT, MsgType.SUPPLY)
    msg = RbMessage(kind, 9, 2, 1, b.payload_digest, b if carries else None)
    assert decode_rb(encode_rb(msg)) == msg


def test_wire_rejects_garbage():
    raw = encode_rb(RbMessage(MsgType.ECHO, 1, 0, 0, bytes(32)))
    with pytest.raises(DecodeError):
        decode_rb(raw + b"x")
    with pytest.raises(DecodeError):
        decode_rb(bytes([MsgType.EST]) + raw[1:])
