import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fs3d.config import RunConfig
from fs3d.data import GenConfig, generate
from fs3d.graph import AtomicConfiguration
from fs3d.model import ParameterStore, is_expert, parse_expert, route_all
from fs3d.runtime import sync
from fs3d.runtime.lifecycle import rank_step
from fs3d.runtime.optim import SGD, all_finite, scaled_lr, schedule_factor
from fs3d.runtime.pipeline import (STAGES, GradientBucket, ScheduleError, make_buckets, pipelined_schedule,
                                   sequential_schedule)
from fs3d.runtime.sharding import make_layout, shard_parameters, unshard
from fs3d.runtime.transport import (Communicator, DeadlockError, RankComms, RankWorld, Transport,
                                    all_gather_bytes, all_reduce_bytes, run_ranks, tree_reduce)
from fs3d.train import Trainer

DS = generate(5, GenConfig(n_configs=8, atoms=(4, 6)))


def group_run(n, fn, timeout=10.0):
    tr = Transport(n, timeout=timeout)
    out = run_ranks(n, lambda r: fn(Communicator(tr, r, list(range(n)), "g")), tr)
    return out, tr


# --- transport ----------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_all_reduce_matches_tree_oracle(n):
    rng = np.random.default_rng(n)
    xs = [rng.standard_normal(7).astype(np.float32) for _ in range(n)]
    out, tr = group_run(n, lambda c: c.all_reduce(xs[c.index]))
    chunks = [np.array_split(x, n) for x in xs]
    ref = np.concatenate([tree_reduce([chunks[r][k] for r in range(n)]) for k in range(n)])
    assert all(np.array_equal(o, ref) for o in out)


def test_all_reduce_bytes_formula():
    x = np.ones(12, np.float64)
    _, tr = group_run(4, lambda c: c.all_reduce(x))
    # each rank sends (n-1)/n of its payload twice
    assert tr.bytes["all_reduce"] == 2 * 3 * x.nbytes == all_reduce_bytes(x.nbytes, 4)
    _, tr = group_run(3, lambda c: c.all_gather(x))
    assert tr.bytes["all_gather"] == all_gather_bytes(x.nbytes, 3)


def test_all_to_all_routing():
    out, _ = group_run(3, lambda c: c.all_to_all([(c.index, k) for k in range(3)]))
    assert out == [[(s, r) for s in range(3)] for r in range(3)]


def test_broadcast_gather():
    out, _ = group_run(3, lambda c: (c.broadcast(c.index * 10, root=1), c.gather(c.index, root=2)))
    assert [o[0] for o in out] == [10, 10, 10]
    assert out[2][1] == [0, 1, 2] and out[0][1] is None


def test_mismatched_collective_deadlocks():
    def fn(c):
        if c.index == 0:
            c.barrier()
        return c.index
    with pytest.raises(DeadlockError):
        group_run(2, fn, timeout=0.5)


def test_rank_error_propagates():
    def fn(c):
        if c.index == 1:
            raise KeyError("boom")
        c.barrier()
    with pytest.raises(KeyError):
        group_run(3, fn, timeout=5.0)


def test_rank_world_groups():
    w = RankWorld(2, 3, 2)
    assert [w.coords(w.rank(*c)) for c in [(1, 2, 1), (0, 0, 0)]] == [(1, 2, 1), (0, 0, 0)]
    assert sorted(r for g in range(3) for d in range(2) for r in w.fs_group(w.rank(0, g, d))) == list(range(12))
    assert w.graph_group(7) == [6, 7, 8, 9, 10, 11]
    assert w.dp_group(1) == [1, 7]
    assert w.racks([0, 1, 2]) == [[0, 1], [2]]


# --- sharding ------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.integers(1, 7)), min_size=1, max_size=5), st.integers(1, 4))
def test_shard_roundtrip(shapes, n):
    rng = np.random.default_rng(0)
    store = ParameterStore({f"p{k}": rng.standard_normal(s) for k, s in enumerate(shapes)})
    layout, shards = shard_parameters(store, n)
    back = unshard(layout, shards)
    assert all(np.array_equal(back[k], store[k]) for k in store.names())
    for s in layout.segments:
        assert s.padded % n == 0 and s.padded - s.size < n
        assert sum(sh[s.name].size for sh in shards) == s.padded


def test_layout_errors():
    with pytest.raises(ValueError):
        make_layout(ParameterStore({"a": np.ones(2)}), 0)


# --- pipeline ------------------------------------------------------------

@pytest.mark.parametrize("nb", range(1, 9))
def test_pipeline_makespan_unit(nb):
    p = pipelined_schedule(nb)
    assert p.makespan == len(STAGES) + nb - 1
    assert sequential_schedule(nb).makespan == len(STAGES) * nb
    assert sorted(p.order()) == sorted(sequential_schedule(nb).order())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_pipeline_costs_never_worse(nb, ns, seed):
    c = np.random.default_rng(seed).uniform(0.1, 3.0, (nb, ns)).tolist()
    p, s = pipelined_schedule(nb, ns, c), sequential_schedule(nb, ns, c)
    assert p.makespan <= s.makespan + 1e-12
    assert p.busy == pytest.approx(s.busy)
    # recurrence oracle for a flow shop with in-order stages
    end = np.zeros((nb + 1, ns + 1))
    for b in range(nb):
        for k in range(ns):
            end[b + 1, k + 1] = max(end[b, k + 1], end[b + 1, k]) + c[b][k]
    assert p.makespan == pytest.approx(end[nb, ns])


def test_bucket_stage_order_enforced():
    bk = GradientBucket(0, ["a"], 4)
    with pytest.raises(ScheduleError):
        bk.advance("synced")
    for s in STAGES:
        bk.advance(s)
    assert bk.done


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=20), st.integers(1, 10))
def test_make_buckets_partition(sizes, nb):
    names = [f"n{k}" for k in range(len(sizes))]
    bks = make_buckets(names, sizes, n_buckets=nb)
    assert [n for b in bks for n in b.names] == names
    assert len(bks) == min(nb, len(names))
    assert sum(b.nbytes for b in bks) == sum(sizes)


# --- optimizer -------------------------------------------------------------

def test_scaled_lr_and_schedule():
    assert scaled_lr(0.01, 32, 8) == pytest.approx(0.02)
    assert [schedule_factor("linear", s, 4) for s in range(4)] == [1.0, 0.75, 0.5, 0.25]
    assert schedule_factor("constant", 99, 4) == 1.0
    with pytest.raises(ValueError):
        schedule_factor("cosine", 0, 4)
    with pytest.raises(ValueError):
        scaled_lr(0.1, 0, 8)


def test_sgd_momentum_oracle():
    opt = SGD(0.1, 0.9)
    p, buf = np.array([1.0]), None
    for g in (1.0, 2.0):
        p, buf = opt.update(p, np.array([g]), buf)
    # buf: 1, 0.9 + 2 = 2.9; p: 1 - 0.1 - 0.29
    assert buf[0] == pytest.approx(2.9) and p[0] == pytest.approx(0.61)
    assert not all_finite([np.array([np.nan])])


# --- sparse expert sync ------------------------------------------------------

def test_sparse_sync_equals_dense_on_union():
    rng = np.random.default_rng(0)
    names = [f"L.expert{e}.w" for e in range(4)]
    grads = [{n: rng.standard_normal(3).astype(np.float32) for n in names} for _ in range(3)]
    active = [{("L", 0)}, {("L", 2)}, {("L", 0), ("L", 3)}]
    # experts inactive on a replica contribute zero-filled gradients
    for r in range(3):
        for n in names:
            if ("L", parse_expert(n)[1]) not in active[r]:
                grads[r][n][:] = 0
    names_of = lambda layer, e: [f"{layer}.expert{e}.w"]

    def fn(c):
        sp, union = sync.sparse_grad_sync(c, grads[c.index], active[c.index], names_of)
        un = [n for l, e in union for n in names_of(l, e)]
        return sp, union, sync.dense_expert_sync(c, grads[c.index], un)
    out, _ = group_run(3, fn)
    for sp, union, dense in out:
        assert union == [("L", 0), ("L", 2), ("L", 3)]
        assert all(np.array_equal(sp[n], dense[n]) for n in dense)
        assert "L.expert1.w" not in sp


def test_inactive_experts_unchanged_after_step():
    # a single element routes every token to the same top-1 experts
    one = [AtomicConfiguration(np.full(c.n_atoms, 2), c.x, c.lattice, c.pbc, c.task, energy=c.energy,
                               forces=c.forces, stress=c.stress, magmoms=c.magmoms) for c in DS]
    tr = Trainer(RunConfig(top_k=1, residual_scale=0.5, dp=2, fs=2), one)
    before = tr.params()
    routing = route_all(before, tr.cfg)
    used = {(l, int(routing[l].experts_for([2])[0, 0])) for l in tr.cfg.moe_layers}
    tr.step(list(range(8)))
    after = tr.params()
    n_inactive = 0
    for n in after.names():
        if is_expert(n):
            if parse_expert(n) in used:
                assert not np.array_equal(after[n], before[n]), n
            else:
                assert np.array_equal(after[n], before[n]), n
                n_inactive += 1
    assert n_inactive > 0


# --- lifecycle ---------------------------------------------------------------

def restores(policy):
    tr = Trainer(RunConfig(restore_policy=policy, residual_scale=0.5, minibatches=2), DS)
    inp = tr.step_inputs(list(range(8)))
    t = Transport(1)
    (res,) = run_ranks(1, lambda r: rank_step(RankComms(tr.world, t, r), inp, tr.states[r]), t)
    return res.restores


def test_restore_counts_per_policy():
    per, cached = restores("per_phase"), restores("cached")
    dense = [n for n in per if not is_expert(n)]
    # 2 mini-batches x 4 phases, or once per mini-batch when cached
    assert {per[n] for n in dense} == {8}
    assert {cached[n] for n in dense} == {2}


def test_prefetch_order_covers_dense_params():
    tr = Trainer(RunConfig(residual_scale=0.5), DS)
    inp = tr.step_inputs(list(range(8)))
    t = Transport(1)
    (res,) = run_ranks(1, lambda r: rank_step(RankComms(tr.world, t, r), inp, tr.states[r]), t)
    dense = [n for n in tr.layout.names if not is_expert(n)]
    assert res.accepted and sorted(res.prefetch) == sorted(dense)
    assert "b0.moe0.router" in res.prefetch


@pytest.mark.parametrize("nb", [1, 3, 8])
def test_pipelined_update_bitwise(nb):
    out = []
    for pipelined in (True, False):
        tr = Trainer(RunConfig(dp=2, rack_size=1, buckets=nb, pipelined=pipelined, residual_scale=0.5,
                               momentum=0.9), DS)
        tr.run(max_steps=2, epochs=2)
        out.append(tr.params())
    assert all(np.array_equal(out[0][n], out[1][n]) for n in out[0].names())
