"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the report lines.
"""

import random
import time
from fractions import Fraction

import pytest

from sbchain.core import ChainConfig, Superblock, Block, make_transaction
from sbchain.execution import WorldState, apply_transaction
from sbchain.membership import CommitteeRegistry, Rejected
from sbchain.sharding import ShardDirectory
from sbchain.sim.adversary import KINDS
from sbchain.sim.explore import BcWorld, PropertyViolation, RbWorld, explore
from sbchain.sim.network import DelayModel, SimConfig, Simulation, run_simulation
from sbchain.sim.slowdown import slowdown_model
from sbchain.sim.workload import WorkloadItem, constant_rate
from sbchain.state_node import (
    PER_BLOCK, WHOLE_SUPERBLOCK, NoQuorum, ReadResponse, StateNode, read_value, secure_read,
)

RUNS_PER_N = {4: 400, 7: 350, 10: 250}
EXPLORE_DEPTH = 10
TIME_BUDGET_S = 600
LIVENESS_INSTANCES = 3
SLOWDOWN_TOL_PP = 0.5


def report(num, ok, detail):
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- criteria 1 and 2 share one adversarial campaign --------------------------


def adversarial_config(n, seed):
    rng = random.Random(seed * 1000 + n)
    f = (n - 1) // 3
    advs = {i: rng.choice(KINDS) for i in rng.sample(range(n), f)}
    gst = rng.choice([0, 300, None])
    dist = rng.choice(["uniform", "fixed"]) if gst != 0 else "uniform"
    delay = DelayModel(1, rng.randint(20, 150), dist, 10, gst)
    return SimConfig(seed=seed, n=n, f=f, adversaries=advs, delay=delay, proposal_threshold=5,
                     flush_interval=10, duration=20_000, check_wire=rng.random() < 0.1,
                     read_interval=50 if rng.random() < 0.2 else None, run_id=f"n{n}-s{seed}")


EXPLORE_SCENARIOS = {
    "rb/equivocating broadcaster": lambda: RbWorld(byz_broadcaster=True),
    "rb/equivocating broadcaster, crossed support": lambda: RbWorld(byz_broadcaster=True, flip=True),
    "rb/correct broadcaster, lying peer": lambda: RbWorld(byz_broadcaster=False),
    "bc/inputs 110, alternating byzantine bits": lambda: BcWorld(
        {0: 1, 1: 1, 2: 0}, byz_bits={r: {d: (r + d) % 2 for d in range(3)} for r in range(1, 5)}),
    "bc/inputs 100, split byzantine bits": lambda: BcWorld(
        {0: 1, 1: 0, 2: 0}, byz_bits={r: {d: 0 if d else 1 for d in range(3)} for r in range(1, 5)}),
}


@pytest.fixture(scope="module")
def campaign():
    start = time.monotonic()
    runs = []
    for n, count in RUNS_PER_N.items():
        for seed in range(count):
            cfg = adversarial_config(n, seed)
            res = run_simulation(cfg, constant_rate(100, 0.2, accounts=2 * n))
            runs.append((cfg, res))
    explored = {}
    for name, make in EXPLORE_SCENARIOS.items():
        try:
            explored[name] = explore(make(), EXPLORE_DEPTH)
        except PropertyViolation as v:
            explored[name] = v
    return runs, explored, time.monotonic() - start


def test_criterion_1_superblock_agreement(campaign):
    runs, explored, elapsed = campaign
    violations = [(c.run_id, r.violation.what) for c, r in runs if r.violation is not None]
    agreement = []
    for cfg, res in runs:
        correct = [g for g in range(cfg.n) if g not in cfg.adversaries]
        logs = [res.superblocks[g] for g in correct]
        k = min(map(len, logs))
        if any(log[:k] != logs[0][:k] for log in logs):
            agreement.append(cfg.run_id)
    bad_explore = {k: str(v) for k, v in explored.items() if isinstance(v, PropertyViolation)}
    depths = {k: v.max_depth for k, v in explored.items() if not isinstance(v, PropertyViolation)}
    states = sum(v.states for v in explored.values() if not isinstance(v, PropertyViolation))
    kinds = {k for c, _ in runs for k in c.adversaries.values()}
    ok = (
        len(runs) >= 1000 and not violations and not agreement and not bad_explore
        and all(d >= EXPLORE_DEPTH for d in depths.values()) and kinds == set(KINDS)
        and elapsed < TIME_BUDGET_S
    )
    report(1, ok, f"{len(runs)} seeded runs over n in {sorted(RUNS_PER_N)}, {len(violations)} monitor violations, "
                  f"{len(agreement)} superblock disagreements; {len(explored)} exhaustive scenarios to depth "
                  f"{EXPLORE_DEPTH} ({states} states), {len(bad_explore)} violations; {elapsed:.0f}s")


def test_criterion_2_prefix_validity_liveness(campaign):
    runs, _, _ = campaign
    unsafe = [c.run_id for c, r in runs if r.violation is not None]
    checked = post_gst = 0
    late = []
    for cfg, res in runs:
        if cfg.delay.gst is None:
            continue
        post_gst += 1
        m = res.metrics
        if m.pending or m.uncommitted_pooled or m.max_instance_lag > LIVENESS_INSTANCES:
            late.append((cfg.run_id, m.pending, m.uncommitted_pooled, m.max_instance_lag))
        checked += m.committed
    worst = max(r.metrics.max_instance_lag for c, r in runs if c.delay.gst is not None)
    ok = not unsafe and not late and post_gst > 0
    report(2, ok, f"monitor clean in {len(runs) - len(unsafe)}/{len(runs)} runs; {post_gst} post-GST runs, "
                  f"{checked} transactions committed everywhere, worst lag {worst} instances "
                  f"(bound {LIVENESS_INSTANCES}), {len(late)} late")


# -- criterion 3 ----------------------------------------------------------------


def _counts(fanout, k=10_000, n=10):
    cfg = SimConfig(seed=9, n=n, f=0, delay=DelayModel(10, 10, "fixed", 10, 0), proposal_threshold=100,
                    pool_capacity=20_000, fanout=fanout, flush_interval=200, duration=10**7)
    wl = constant_rate(k / 5, 5, accounts=100)
    sim = Simulation(cfg, wl)
    res = sim.run()
    return sim, res


def test_criterion_3_validation_reduction():
    k, n = 10_000, 10
    sim, res = _counts(1, k, n)
    eager, lazy = sum(res.metrics.eager), sum(res.metrics.lazy)
    per_node = Fraction(eager + lazy, n * k)
    exact = res.metrics.committed == k and eager == k and lazy == n * k and per_node == 1 + Fraction(1, n)
    fan = n // 3
    sim2, res2 = _counts(fan, k, n)
    worst_eager = max(res2.metrics.eager)
    bound = Fraction(k, 3) + 1
    ok = exact and worst_eager <= bound and res2.metrics.committed == k and res.violation is None \
        and res2.violation is None
    report(3, ok, f"k={k}, n={n}: eager {eager}, lazy {lazy}, per-node validations per tx {per_node} "
                  f"(expected {1 + Fraction(1, n)}); fan-out {fan}: max per-node eager {worst_eager} <= {bound}")


# -- criterion 4 ----------------------------------------------------------------


def test_criterion_4_slowdown():
    s = slowdown_model(0.61, 5.66, 4)
    dS, dL = abs(s.S * 100 - 32), abs(s.S_limit * 100 - 48)
    ok = dS <= SLOWDOWN_TOL_PP and dL <= SLOWDOWN_TOL_PP
    report(4, ok, f"S={s.S:.4f} (|diff| {dS:.2f}pp), S_limit={s.S_limit:.4f} (|diff| {dL:.2f}pp), "
                  f"tolerance {SLOWDOWN_TOL_PP}pp")


# -- criterion 5 ----------------------------------------------------------------


def _cardinality(n, silent, dist, seed, threshold=5, rounds=3):
    f = (n - 1) // 3
    advs = {n - 1 - i: "silent" for i in range(f)} if silent else {}
    proposers = n - len(advs)
    delay = DelayModel(10, 10, "fixed", 10, 0) if dist == "fixed" else DelayModel(1, 10, "uniform", 10, 0)
    cfg = SimConfig(seed=seed, n=n, f=f, adversaries=advs, delay=delay, proposal_threshold=threshold)
    k = proposers * threshold * rounds
    wl = [WorkloadItem(0, it.tx) for it in constant_rate(1000, k / 1000, accounts=proposers * 4)]
    res = run_simulation(cfg, wl)
    return res


def test_criterion_5_superblock_cardinality():
    lines, ok = [], True
    for n in (4, 10, 20):
        f = (n - 1) // 3
        res = _cardinality(n, False, "fixed", 0)
        sizes = res.metrics.superblock_sizes
        good = bool(sizes) and all(s == n for s in sizes) and res.violation is None
        ok &= good
        silent_sizes = []
        for seed in range(3):
            r = _cardinality(n, True, "uniform", seed)
            silent_sizes += r.metrics.superblock_sizes
            ok &= r.violation is None
        good2 = bool(silent_sizes) and min(silent_sizes) >= n - f
        ok &= good2
        lines.append(f"n={n}: all-correct {sorted(set(sizes))}, {f} silent min {min(silent_sizes)} (>= {n - f})")
    report(5, ok, "; ".join(lines))


# -- criterion 6 ----------------------------------------------------------------


def _stream(rng, accounts, count):
    nonces = {a: 0 for a in accounts}
    out = []
    for index in range(1, count + 1):
        blocks = []
        for p in sorted(rng.sample(range(4), rng.randint(0, 4))):
            txs = {}
            for _ in range(rng.randint(0, 6)):
                a = rng.choice(accounts)
                nonce = max(0, nonces[a] + rng.choice([0, 0, 0, 1, -1]))
                if nonce == nonces[a]:
                    nonces[a] += 1
                payload = rng.choice([b"", b"hello", b"!fault"])
                txs[(a, nonce)] = make_transaction(a, nonce, rng.choice(accounts + [None]) if not payload else None,
                                                   0, payload=payload) if payload else \
                    make_transaction(a, nonce, rng.choice(accounts), rng.randint(0, 300))
            blocks.append(Block(p, tuple(sorted(txs.values(), key=lambda t: t.key)), index))
        out.append(Superblock(index, tuple(blocks)))
    return out


def test_criterion_6_storage_pipeline():
    accounts = [f"u{i}" for i in range(8)]
    genesis = WorldState.genesis({a: 1000 for a in accounts})
    cfg = ChainConfig(proposal_threshold=4, pool_capacity=8)
    rng = random.Random(6)
    equal = 0
    for _ in range(100):
        stream = _stream(rng, accounts, rng.randint(1, 8))
        a = StateNode(0, cfg, genesis, mode=PER_BLOCK)
        b = StateNode(0, cfg, genesis, mode=WHOLE_SUPERBLOCK)
        for sb in stream:
            a.commit_superblock(sb)
            b.commit_superblock(sb)
        equal += a.state.state_digest == b.state.state_digest
    over = SimConfig(seed=1, n=4, f=1, delay=DelayModel(10, 10, "fixed", 10, 0), proposal_threshold=50,
                     pool_capacity=200, exec_cost_per_tx=5, persist_cost=20, flush_interval=500)
    res = run_simulation(over, constant_rate(2000, 3, accounts=64))
    drops = res.metrics.drop_reasons["Overload"]
    ok = equal == 100 and drops > 0 and res.violation is None
    report(6, ok, f"{equal}/100 randomized streams give identical state digests across modes; overload run dropped "
                  f"{drops} of {res.metrics.submitted} with reason Overload")


# -- criterion 7 ----------------------------------------------------------------


class _Replica:
    """A read responder over a fixed snapshot; byzantine ones forge answers."""

    def __init__(self, node_id, state, rng=None, style=None):
        self.node_id = node_id
        self.state = state
        self.rng = rng
        self.style = style

    def read(self, key):
        honest = ReadResponse(self.state.height, self.state.state_digest, read_value(self.state, key), self.node_id)
        if self.style is None:
            return honest
        r = self.rng
        if self.style == "silent":
            return None
        if self.style == "forge_value":
            return ReadResponse(honest.height, honest.state_digest, (r.randrange(10**6), 7), self.node_id)
        if self.style == "forge_height":
            return ReadResponse(honest.height + 1, bytes(32), (r.randrange(10**6), 0), self.node_id)
        if self.style == "impersonate":
            return ReadResponse(honest.height, honest.state_digest, (-1, -1), (self.node_id + 1) % 97)
        return ReadResponse(honest.height, honest.state_digest, [r.random()], self.node_id)  # unhashable


def test_criterion_7_light_client():
    rng = random.Random(7)
    styles = ("silent", "forge_value", "forge_height", "impersonate", "unhashable")
    wrong = no_quorum = spurious_no_quorum = answered = 0
    for run in range(500):
        n = rng.choice([4, 7, 10])
        f = (n - 1) // 3
        accounts = [f"a{i}" for i in range(4)]
        genesis = WorldState.genesis({a: 100 for a in accounts})
        snapshots = [genesis.copy()]
        s = genesis.copy()
        for h in range(1, 4):
            for a in rng.sample(accounts, 2):
                s, _ = apply_transaction(make_transaction(a, s.nonce(a), rng.choice(accounts), rng.randint(0, 5)), s)
            s.bump_height()
            snapshots.append(s.copy())
        top = len(snapshots) - 1
        diverge = run % 5 == 0
        byz = set(rng.sample(range(n), f))
        replicas = []
        for i in range(n):
            h = top - (i % 2) if diverge else top
            replicas.append(_Replica(i, snapshots[h], rng, rng.choice(styles) if i in byz else None))
        queried = rng.sample(replicas, 2 * f + 1)
        key = rng.choice(accounts)
        correct_heights = {q.state.height for q in queried if q.style is None}
        try:
            value = secure_read(key, queried, f)
        except NoQuorum:
            no_quorum += 1
            if len(correct_heights) == 1:
                spurious_no_quorum += 1
            continue
        answered += 1
        correct_values = {(snap.balance(key), snap.nonce(key)) for snap in
                          (r.state for r in replicas if r.style is None)}
        if value not in correct_values:
            wrong += 1
    ok = wrong == 0 and spurious_no_quorum == 0 and answered > 0
    report(7, ok, f"500 reads: {answered} answered, {wrong} values outside correct snapshots, {no_quorum} NoQuorum "
                  f"({spurious_no_quorum} without height divergence among correct responders)")


# -- criterion 8 ----------------------------------------------------------------


def test_criterion_8_membership():
    endpoints = [f"10.0.0.{i}:9000" for i in range(9)]
    wallets = [f"w{i}" for i in range(9)]

    def fresh():
        reg = CommitteeRegistry("chair")
        reg.add_participants("chair", endpoints, 3, wallets)
        return reg

    reg = fresh()
    got4 = [reg.rotate_vote(w, 4) for w in ("w0", "w1", "w2")]
    reg0 = fresh()
    got0 = [reg0.rotate_vote(w, 0) for w in ("w3", "w4", "w5")]
    reg2 = fresh()
    reg2.rotate_vote("w0", 4)
    try:
        reg2.rotate_vote("w0", 4)
        double = False
    except Rejected:
        double = reg2.vote_tally == {4: 1}
    golden = (
        got4 == [None, None, tuple(endpoints[3:6])] and got0[-1] == tuple(endpoints[0:3])
        and reg.threshold == 3 and double
    )
    rng = random.Random(8)
    pure = True
    for _ in range(300):
        votes = [(rng.choice(wallets + ["x"]), rng.randrange(10)) for _ in range(rng.randint(0, 30))]
        outs = []
        for _ in range(2):
            r = fresh()
            for who, val in votes:
                try:
                    r.rotate_vote(who, val)
                except Rejected:
                    pass
            outs.append((r.selections, r.to_bytes()))
        pure &= outs[0] == outs[1] and all(len(s) == 3 for s in outs[0][0])
    ok = golden and pure
    report(8, ok, f"golden traces {'match' if golden else 'differ'} (val=4 -> [3,6), val=0 -> [0,3), threshold 3, "
                  f"double vote rejected); 300 vote sequences replay to identical selections: {pure}")


# -- criterion 9 ----------------------------------------------------------------


def test_criterion_9_sharding():
    rng = random.Random(9)
    steps = broken = 0
    for _ in range(200):
        d = ShardDirectory.create({a: rng.randint(200, 400) for a in "ABCDEF"})
        ids = [d.spawn_shard({a: rng.randint(1, 40) for a in rng.sample("ABCDEF", 3)}, nodes=[k])
               for k in range(rng.randint(2, 4))]
        broken += not d.conserved()
        pending = []
        for _ in range(rng.randint(5, 20)):
            src, dst = rng.sample(ids, 2)
            who = rng.choice("ABCDEF")
            bal = d.shards[src].chain.state.balance(who)
            if bal and rng.random() < 0.6:
                pending.append(d.withdraw(src, dst, who, rng.randint(1, bal)))
            elif pending:
                d.credit(pending.pop(rng.randrange(len(pending))))
            steps += 1
            broken += not d.conserved()
        for rec in pending:
            d.credit(rec)
            broken += not d.conserved()
        for sid in ids:
            d.exit_shard(sid)
            broken += not d.conserved()
        broken += d.beacon.state.total_supply() != d.genesis_total or d.balances()["escrow"] != 0
    cfg = SimConfig(seed=9, n=4, f=1, groups=2, delay=DelayModel(1, 20, "uniform", 10, 0), flush_interval=100)
    sim = Simulation(cfg, constant_rate(300, 1, accounts=16))
    res = sim.run()
    cross = [(a, b) for a, b in sim.edges if a // cfg.n != b // cfg.n]
    ok = broken == 0 and not cross and res.violation is None and sim.edges
    report(9, ok, f"200 schedules, {steps} transfer steps, {broken} conservation breaks; two-shard run: "
                  f"{len(sim.edges)} intra-shard edges, {len(cross)} inter-shard edges")
