import dataclasses

import numpy as np
import pytest

from fs3d import model as M
from fs3d import tensor as T
from fs3d.graph import AtomicConfiguration, GeometryError, batch_graphs
from fs3d.model import (LocalContext, Model, ModelConfig, UnknownElementError, UnknownTaskError,
                        init_params, make_inputs, route_all, route_experts)
from fs3d.verify import (force_fd_error, random_cluster, random_configs, random_rotation,
                         reference_model, stress_fd_error, with_positions)


def context(cfg, params, configs, dtype="float64"):
    inp = make_inputs(cfg, batch_graphs(configs, cfg.r_cut))
    leaves = {k: T.Tensor(np.asarray(v, dtype=dtype)) for k, v in params.items()}
    ctx = LocalContext(inp, leaves, route_all(params, cfg))
    x = T.Tensor(inp.x.astype(dtype), owners=inp.atom_gid)
    strain = T.Tensor(np.zeros((inp.n_configs, 3, 3), dtype=dtype))
    return ctx, x, strain


def silu(x):
    return x / (1.0 + np.exp(-x))


DIMER = AtomicConfiguration([1, 2], [[0, 0, 0], [2.0, 0.3, 0.1]])


# --- config and parameters ------------------------------------------------

def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(n_experts=2, top_k=3)
    with pytest.raises(ValueError):
        ModelConfig(n_heads=3, d_attn=16)
    with pytest.raises(ValueError):
        ModelConfig(attention_mode="dense")


def test_moe_parameter_count_quadratic_in_width():
    # doubling every feature width multiplies the MoE layer count by 4 up to bias terms
    def count(d):
        cfg = ModelConfig(d_node=d, d_edge=d, d_hidden=d, d_attn=d)
        return init_params(cfg).moe_layer_count("b0.moe1")
    for d in (8, 16, 32):
        e = ModelConfig().n_experts
        assert count(d) == e * (2 * d * d + 2 * d)
        # weights scale by 4, the 2d bias entries per expert only by 2
        assert 4 * count(d) - count(2 * d) == e * 4 * d


def test_expert_count_linear_in_experts():
    a = init_params(ModelConfig(n_experts=2, top_k=1)).moe_layer_count("b0.moe0")
    b = init_params(ModelConfig(n_experts=4, top_k=1)).moe_layer_count("b0.moe0")
    assert b == 2 * a


def test_init_seed_reproducible():
    cfg = ModelConfig()
    assert init_params(cfg, 3).equal(init_params(cfg, 3))
    assert not init_params(cfg, 3).equal(init_params(cfg, 4))


# --- embedding --------------------------------------------------------------

def test_task_embedding_constant_offset():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, dtype="float64")
    c0 = random_cluster(np.random.default_rng(0), 5)
    c1 = dataclasses.replace(c0, task=1)
    v = []
    for c in (c0, c1):
        ctx, x, s = context(cfg, p, [c])
        v.append(M.embed(ctx, cfg, x, s).v.data)
    diff = v[1] - v[0]
    np.testing.assert_allclose(diff, np.broadcast_to(p["embed.task"][1] - p["embed.task"][0], diff.shape),
                               rtol=0, atol=1e-14)


def test_edge_embedding_vanishes_at_cutoff():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, dtype="float64")
    c = AtomicConfiguration([1, 1], [[0, 0, 0], [4.5 - 1e-7, 0, 0]])
    ctx, x, s = context(cfg, p, [c])
    assert np.abs(M.embed(ctx, cfg, x, s).e.data).max() < 1e-18


def test_composition_order_independent():
    cfg = ModelConfig(r_cut=4.5)
    ab = AtomicConfiguration([1, 2], [[0, 0, 0], [2, 0, 0]])
    ba = AtomicConfiguration([2, 1], [[0, 0, 0], [2, 0, 0]])
    ia = make_inputs(cfg, batch_graphs([ab], cfg.r_cut))
    ib = make_inputs(cfg, batch_graphs([ba], cfg.r_cut))
    assert np.array_equal(ia.comp, ib.comp)


def test_unknown_element_and_task():
    cfg = ModelConfig(n_elements=4, n_tasks=2)
    m = Model(cfg, init_params(cfg, dtype="float64"))
    with pytest.raises(UnknownElementError):
        m.energy([AtomicConfiguration([5], [[0, 0, 0]])])
    with pytest.raises(UnknownTaskError):
        m.energy([AtomicConfiguration([1], [[0, 0, 0]], task=2)])


# --- triplet update -----------------------------------------------------------

def test_tri_single_neighbor_zero_message():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    ctx, x, s = context(cfg, p, [DIMER])
    st = M.embed(ctx, cfg, x, s)
    assert np.array_equal(M.tri_update(ctx, cfg, st, 0).e.data, st.e.data)


def test_tri_permuted_triplets_bitwise():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    c = random_cluster(np.random.default_rng(1), 8)
    ctx, x, s = context(cfg, p, [c])
    st = M.embed(ctx, cfg, x, s)
    ref = M.tri_update(ctx, cfg, st, 0).e.data
    perm = np.random.default_rng(2).permutation(len(ctx.inp.trip_ij))
    ctx.inp = dataclasses.replace(ctx.inp, trip_ij=ctx.inp.trip_ij[perm], trip_ik=ctx.inp.trip_ik[perm])
    st2 = M.FeatureState(st.v, st.e, T.gather(st.a, perm), st.env)
    with T.deterministic(True):
        assert np.array_equal(M.tri_update(ctx, cfg, st2, 0).e.data, ref)


def test_tri_multiply_count():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    c = random_cluster(np.random.default_rng(3), 10)
    ctx, x, s = context(cfg, p, [c])
    st = M.embed(ctx, cfg, x, s)
    with T.count_ops() as cnt, T.op_scope("x"):
        M.tri_update(ctx, cfg, st, 0)
    de, nt, ne = cfg.d_edge, len(ctx.inp.trip_ij), ctx.inp.n_edges
    assert nt > 0
    assert cnt["tri"] == nt * de * (cfg.n_angle + 1) + ne * de * (2 * de + 1)


# --- attention ----------------------------------------------------------------

def test_separable_single_neighbor():
    cfg = ModelConfig(r_cut=4.5, attention_mode="separable")
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    ctx, x, s = context(cfg, p, [DIMER])
    st = M.embed(ctx, cfg, x, s)
    out = M.separable_attention(ctx, cfg, st, 0).v.data
    inp = ctx.inp
    tok = np.concatenate([st.v.data[inp.src_gid], st.e.data], axis=1)
    msg = (tok @ p["b0.attn.wm"]) * st.env.data
    # every atom is the target of one edge and the source of one edge
    agg = np.zeros((2, cfg.d_attn))
    agg[inp.tgt] = msg
    ref = st.v.data + np.concatenate([agg, agg], axis=1) @ p["b0.attn.wo"]
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-15)


def test_separable_cost_linear_in_edges():
    cfg = ModelConfig(r_cut=4.5, attention_mode="separable")
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    c = random_cluster(np.random.default_rng(4), 6)
    far = AtomicConfiguration(np.r_[c.z, c.z], np.r_[c.x, c.x + 100.0])
    counts = []
    for cc in (c, far):
        ctx, x, s = context(cfg, p, [cc])
        st = M.embed(ctx, cfg, x, s)
        with T.count_ops() as cnt:
            M.separable_attention(ctx, cfg, st, 0)
        counts.append((ctx.inp.n_edges, cnt["attn_sep"]))
    assert counts[1][0] == 2 * counts[0][0]
    assert counts[1][1] == 2 * counts[0][1]


def test_multihead_single_neighbor():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    ctx, x, s = context(cfg, p, [DIMER])
    st = M.embed(ctx, cfg, x, s)
    out = M.multihead_attention(ctx, cfg, st, 0).v.data
    inp = ctx.inp
    tok = np.concatenate([st.v.data[inp.src_gid], st.e.data], axis=1)
    env = st.env.data
    val = (tok @ p["b0.attn.wv"]) * env
    center = np.zeros((2, cfg.d_attn))
    center[inp.tgt] = val * env
    np.testing.assert_allclose(out, st.v.data + center @ p["b0.attn.wo"], rtol=1e-13, atol=1e-15)


def test_multihead_identical_keys_uniform(monkeypatch):
    # center atom with four equivalent neighbors on a tetrahedron
    d = 1.0
    pts = np.array([[0, 0, 0], [d, d, d], [d, -d, -d], [-d, d, -d], [-d, -d, d]], dtype=float)
    c = AtomicConfiguration([1, 2, 2, 2, 2], pts)
    cfg = ModelConfig(r_cut=3.0)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    ctx, x, s = context(cfg, p, [c])
    seen = []
    orig = M._segment_softmax_weights

    def spy(*a, **k):
        seen.append(orig(*a, **k))
        return seen[-1]
    monkeypatch.setattr(M, "_segment_softmax_weights", spy)
    M.multihead_attention(ctx, cfg, M.embed(ctx, cfg, x, s), 0)
    inp = ctx.inp
    center_edges = np.nonzero(inp.tgt == 0)[0]
    rows = np.isin(inp.pair_a, center_edges)
    np.testing.assert_allclose(seen[0].data[rows], 0.25, rtol=0, atol=1e-14)


def test_multihead_score_multiplies_formula():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    c = random_cluster(np.random.default_rng(5), 12)
    ctx, x, s = context(cfg, p, [c])
    st = M.embed(ctx, cfg, x, s)
    with T.count_ops() as cnt:
        M.multihead_attention(ctx, cfg, st, 0)
    n_i = np.bincount(ctx.inp.tgt, minlength=ctx.inp.n_atoms)
    assert cnt["attn_score"] == cfg.n_heads * (cfg.d_attn // cfg.n_heads) * int((n_i ** 2).sum())


# --- routing and experts ------------------------------------------------------

def test_route_tie_break():
    assert route_experts(np.array([[0.9, 0.1, 0.9, 0.5]]), 2, [0]) == {0: (0, 2)}


def test_route_all_experts_when_k_equals_e():
    logits = np.random.default_rng(6).standard_normal((5, 4))
    assert all(v == (0, 1, 2, 3) for v in route_experts(logits, 4, range(5)).values())


def test_route_deterministic():
    logits = np.random.default_rng(7).standard_normal((5, 4))
    assert route_experts(logits, 2, [1, 3]) == route_experts(logits.copy(), 2, [3, 1])


def moe_setup(top_k, same_experts=False):
    cfg = ModelConfig(r_cut=4.5, top_k=top_k)
    p = init_params(cfg, 0, residual_scale=0.5, dtype="float64")
    if same_experts:
        for part in M.EXPERT_PARTS:
            for e in range(1, cfg.n_experts):
                p[M.expert_prefix("b0.moe1", e) + part] = p[M.expert_prefix("b0.moe1", 0) + part].copy()
    c = random_cluster(np.random.default_rng(8), 6)
    ctx, _, _ = context(cfg, p, [c])
    tok = np.random.default_rng(9).standard_normal((c.n_atoms, cfg.d_node))
    out = M.moe_layer(ctx, cfg, "b0.moe1", T.Tensor(tok, owners=ctx.inp.atom_gid), ctx.inp.z,
                      ctx.inp.atom_gid).data
    return cfg, p, ctx, tok, out


def expert_np(p, e, x):
    pre = M.expert_prefix("b0.moe1", e)
    return silu(x @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]


def test_moe_top1_equals_expert():
    cfg, p, ctx, tok, out = moe_setup(1)
    topk = ctx.routing["b0.moe1"].experts_for(ctx.inp.z)[:, 0]
    ref = np.stack([expert_np(p, int(e), tok[i:i + 1])[0] for i, e in enumerate(topk)])
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-14)


def test_moe_identical_experts():
    cfg, p, ctx, tok, out = moe_setup(2, same_experts=True)
    np.testing.assert_allclose(out, expert_np(p, 0, tok), rtol=1e-12, atol=1e-14)


# --- refine and readout ---------------------------------------------------------

def test_refine_zero_init_identity():
    cfg = ModelConfig(r_cut=4.5)
    p = init_params(cfg, 0, dtype="float64")
    ctx, x, s = context(cfg, p, [random_cluster(np.random.default_rng(10), 5)])
    st = M.embed(ctx, cfg, x, s)
    out = M.refine(ctx, cfg, st, 0)
    assert np.array_equal(out.v.data, st.v.data) and np.array_equal(out.e.data, st.e.data)


def test_layer_norm_moments():
    y = T.layer_norm(T.Tensor(np.random.default_rng(11).standard_normal((7, 16)) * 3 + 2), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-14)
    np.testing.assert_allclose(y.var(axis=1), 1.0, rtol=1e-12)


def test_energy_doubles_for_disjoint_copies():
    m = reference_model(0)
    c = random_cluster(np.random.default_rng(12), 6)
    two = AtomicConfiguration(np.r_[c.z, c.z], np.r_[c.x, c.x + 50.0])
    e1, e2 = m.energy([c])[0], m.energy([two])[0]
    assert e2 == pytest.approx(2 * e1, rel=1e-13)


def test_isolated_atom_head_value():
    m = reference_model(0)
    e = m.energy([AtomicConfiguration([3], [[0, 0, 0]])])[0]
    cfg, p = m.cfg, m.params
    ctx, x, s = context(cfg, p, [AtomicConfiguration([3], [[0, 0, 0]])])
    st = M.embed(ctx, cfg, x, s)
    for t in range(cfg.n_blocks):
        st = M.interaction_block(ctx, cfg, st, t)
    v = st.v.data
    ref = (silu(v @ p["head.e.w1"] + p["head.e.b1"]) @ p["head.e.w2"] + p["head.e.elem"][3])[0, 0]
    assert e == pytest.approx(ref, rel=1e-14)


# --- forces and stress ----------------------------------------------------------

@pytest.mark.parametrize("attention", ["multihead", "separable"])
def test_force_finite_difference(attention):
    m = reference_model(0, attention)
    c = random_configs(1, 1, atoms=(6, 8))[0]
    assert force_fd_error(m, c, "float64") < 1e-5


def test_force_finite_difference_binary32():
    m = reference_model(0)
    c = random_configs(2, 1, atoms=(6, 8))[0]
    assert force_fd_error(m, c, "float32", h=1e-4) < 5e-3


def test_newton_third_law_dimer():
    m = reference_model(0)
    _, f = m.energy_forces([AtomicConfiguration([2, 2], [[0, 0, 0], [1.5, 1.0, 0.5]])])
    np.testing.assert_allclose(f[0], -f[1], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_rotation_covariance(seed):
    m = reference_model(0)
    rng = np.random.default_rng(seed)
    c = random_cluster(rng, 8)
    r = random_rotation(rng)
    t = rng.uniform(-3, 3, 3)
    e0, f0 = m.energy_forces([c])
    e1, f1 = m.energy_forces([with_positions(c, c.x @ r.T + t)])
    assert abs(e1[0] - e0[0]) <= 1e-8 * max(1.0, abs(e0[0]))
    assert np.abs(f1 - f0 @ r.T).max() <= 1e-8 * np.abs(f0).max()
    assert np.abs(f0.sum(axis=0)).max() <= 1e-8 * np.abs(f0).sum()


def test_permutation_invariance():
    m = reference_model(0)
    rng = np.random.default_rng(13)
    c = random_cluster(rng, 8)
    p = rng.permutation(8)
    e0, f0 = m.energy_forces([c])
    e1, f1 = m.energy_forces([AtomicConfiguration(c.z[p], c.x[p])])
    assert abs(e1[0] - e0[0]) <= 1e-12 * abs(e0[0])
    np.testing.assert_allclose(f1, f0[p], rtol=0, atol=1e-12 * np.abs(f0).max())


def test_cutoff_continuity():
    m = reference_model(0)
    base = np.array([[0, 0, 0], [1.8, 0.2, 0.0], [0.3, 1.9, 0.1]])
    es = []
    for dx in (-1e-6, 1e-6):
        far = np.array([[4.5 + 1.8 + dx, 0.2, 0.0]])  # crosses r_cut of atom 1
        es.append(m.energy([AtomicConfiguration([1, 2, 3, 4], np.r_[base, far])])[0])
    assert abs(es[1] - es[0]) <= 1e-8


def test_stress_finite_difference_and_symmetry():
    m = reference_model(0)
    c = random_configs(3, 1, atoms=(6, 8))[0]
    assert stress_fd_error(m, c) < 1e-4
    s = m.stress(c)
    assert np.array_equal(s, s.T)


def test_stress_requires_periodic():
    with pytest.raises(GeometryError):
        reference_model(0).stress(AtomicConfiguration([1], [[0, 0, 0]]))


def test_forces_are_differentiable():
    m = reference_model(0)
    c = random_cluster(np.random.default_rng(14), 5)
    _, pred = m.run([c], create_graph=True)
    M.derivatives(pred, create_graph=True)
    w = pred.forces
    (g,) = T.grad(T.sum_(w * w), [pred.x])
    assert np.all(np.isfinite(g.data)) and np.abs(g.data).max() > 0
