import hashlib
import struct
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbchain.core import ChainConfig, ContractViolation, make_transaction
from sbchain.execution import (
    FAULT_MARKER,
    Reason,
    ValidationCounters,
    WorldState,
    apply_transaction,
    eager_validate,
    execute_in_place,
    export_snapshot,
    import_snapshot,
    lazy_validate,
)

CFG = ChainConfig()


def _oracle_digest(height, accounts, payloads):
    """Independent rebuild of the canonical state serialization."""
    h = hashlib.sha256()
    h.update(b"WS" + struct.pack(">QI", height, len(accounts)))
    for who in sorted(accounts):
        bal, nonce = accounts[who]
        raw = who.encode()
        h.update(struct.pack(">I", len(raw)) + raw + struct.pack(">QQ", bal, nonce))
    h.update(struct.pack(">I", len(payloads)))
    for (who, nonce) in sorted(payloads):
        raw, data = who.encode(), payloads[(who, nonce)]
        h.update(struct.pack(">I", len(raw)) + raw + struct.pack(">QI", nonce, len(data)) + data)
    h.update(struct.pack(">I", 0))
    return h.digest()


def test_eager_accepts_valid_transfer():
    s = WorldState.genesis({"A": 10})
    v = eager_validate(make_transaction("A", 0, "B", 5), s, CFG)
    assert v.accepted and v.reason is None and v.kind == "eager"


@pytest.mark.parametrize(
    "tx, reason",
    [
        (make_transaction("A", 0, "B", 11), Reason.INSUFFICIENT_BALANCE),
        (make_transaction("A", 0, "B", 1, gas_limit=CFG.max_block_gas + 1), Reason.EXCEEDS_BLOCK_GAS),
        (make_transaction("A", 0, "B", 1, gas_limit=0), Reason.GAS_TOO_LOW),
        (replace(make_transaction("A", 0, "B", 1), signature=b"\x00" * 32), Reason.BAD_SIGNATURE),
        (make_transaction("A", 0, payload=b"x" * 2000), Reason.OVERSIZED),
        (make_transaction("A", CFG.nonce_window, "B", 1), Reason.BAD_NONCE),
    ],
)
def test_eager_rejections(tx, reason):
    v = eager_validate(tx, WorldState.genesis({"A": 10}), CFG)
    assert not v.accepted and v.reason == reason


def test_eager_nonce_window_accepts_gaps():
    s = WorldState.genesis({"A": 10})
    assert eager_validate(make_transaction("A", CFG.nonce_window - 1, "B", 1), s, CFG).accepted


def test_lazy_validation():
    s = WorldState.genesis({"A": 10})
    s.set_account("A", 10, 3)
    assert lazy_validate(make_transaction("A", 2, "B", 1), s, CFG).reason == Reason.STALE_NONCE
    assert lazy_validate(make_transaction("A", 3, "B", 1), s, CFG).accepted
    assert lazy_validate(make_transaction("A", 3, "B", 1, gas_limit=0), s, CFG).reason == Reason.GAS_TOO_LOW
    assert lazy_validate(make_transaction("A", 4, "B", 1), s, CFG).reason == Reason.BAD_NONCE
    # lazy checks skip the balance
    assert lazy_validate(make_transaction("A", 3, "B", 10**6), s, CFG).accepted


def test_counters_count_every_call():
    c = ValidationCounters()
    s = WorldState.genesis({"A": 10})
    tx = make_transaction("A", 0, "B", 1)
    eager_validate(tx, s, CFG, counters=c)
    lazy_validate(tx, s, CFG, counters=c)
    lazy_validate(tx, s, CFG, counters=c)
    assert (c.eager, c.lazy) == (1, 2)


def test_transfer():
    s = WorldState.genesis({"A": 10, "B": 0})
    new, out = apply_transaction(make_transaction("A", 0, "B", 5), s, CFG)
    assert out.success
    assert (new.balance("A"), new.balance("B"), new.nonce("A")) == (5, 5, 1)
    assert (s.balance("A"), s.nonce("A")) == (10, 0)


def test_fault_injected_payload_reverts_but_consumes_nonce():
    s = WorldState.genesis({"A": 10, "B": 0})
    new, out = apply_transaction(make_transaction("A", 0, "B", 5, payload=FAULT_MARKER + b"x"), s, CFG)
    assert not out.success
    assert (new.balance("A"), new.balance("B"), new.nonce("A")) == (10, 0, 1)
    assert new.payloads == {}


def test_message_post_stores_payload():
    msg = bytes(range(140))
    s = WorldState.genesis({"A": 10})
    new, out = apply_transaction(make_transaction("A", 0, payload=msg), s, CFG)
    assert out.success
    assert new.payloads[("A", 0)] == msg
    assert new.balance("A") == 10
    assert new.state_digest == _oracle_digest(0, {"A": (10, 1)}, {("A", 0): msg})


def test_fee_goes_to_fee_account_and_conserves():
    cfg = ChainConfig(flat_gas_fee=2)
    s = WorldState.genesis({"A": 10})
    new, out = apply_transaction(make_transaction("A", 0, "B", 5), s, cfg)
    assert out.success
    assert (new.balance("A"), new.balance("B"), new.balance(cfg.fee_account)) == (3, 5, 2)
    assert new.total_supply() == 10


def test_bad_signature_leaves_no_trace():
    s = WorldState.genesis({"A": 10})
    tx = replace(make_transaction("A", 0, "B", 5), signature=b"\x01" * 32)
    new, out = apply_transaction(tx, s, CFG)
    assert not out.success and new == s


def test_execute_requires_matching_nonce():
    with pytest.raises(ContractViolation):
        execute_in_place(make_transaction("A", 1, "B", 1), WorldState.genesis({"A": 5}), CFG)


def test_snapshot_round_trip(tmp_path):
    s = WorldState.genesis({"A": 10, "B": 3})
    s, _ = apply_transaction(make_transaction("A", 0, payload=b"hi"), s, CFG)
    s.bump_height()
    export_snapshot(s, tmp_path / "snap")
    back = import_snapshot(tmp_path / "snap")
    assert back == s and back.state_digest == s.state_digest


ops = st.lists(
    st.tuples(st.sampled_from("ABCD"), st.sampled_from("ABCD"), st.integers(0, 40), st.booleans()),
    max_size=30,
)


def _run(ops_, cfg=CFG):
    s = WorldState.genesis({"A": 50, "B": 20, "C": 5, "D": 0})
    for sender, to, amount, fault in ops_:
        tx = make_transaction(sender, s.nonce(sender), to, amount, payload=FAULT_MARKER if fault else b"")
        s, _ = apply_transaction(tx, s, cfg)
    return s


@settings(max_examples=150)
@given(ops)
def test_conservation_and_non_negative(ops_):
    s = _run(ops_)
    assert s.total_supply() == 75
    assert all(a.balance >= 0 for a in s.accounts.values())


@settings(max_examples=80)
@given(ops)
def test_determinism(ops_):
    assert _run(ops_).state_digest == _run(ops_).state_digest


@settings(max_examples=80)
@given(ops)
def test_digest_matches_serialization(ops_):
    s = _run(ops_)
    assert s.state_digest == hashlib.sha256(s.serialize()).digest()
