"""One training step on one logical rank.

Per mini-batch the step runs four phases: forward (energy), first backward
(forces and strain derivative, recorded), double backward of the
force/stress loss, and the final backward of the energy/magmom loss.
Parameters live as local shards; full values are restored into the leaf
tensors before a phase and released after it, so any use of a released
parameter raises :class:`~fs3d.tensor.StaleDataError`. Gradient
synchronization is deferred until every mini-batch has finished.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..loss import LossTerms, MissingLabelError, TaskLossConfig, elementwise, weighted_split
from ..model import ModelConfig, derivatives, expert_prefix, forward, is_expert, route_all, stress_tensor
from ..planner import ExpertPlan, merge_local_plans, plan_generation
from . import sync
from .fsep import restore_experts, token_splits
from .optim import SGD
from .partition import DistContext, GraphShards, rank_layouts
from .pipeline import STAGES, make_buckets, pipelined_schedule, sequential_schedule
from .sharding import ShardLayout, unshard_segment


@dataclass
class RuntimeOptions:
    precision: str = "float32"
    deterministic: bool = True
    compress: bool = False
    restore_policy: str = "per_phase"   # per_phase | cached
    n_buckets: int = 4
    pipelined: bool = True
    momentum: float = 0.0

    def __post_init__(self):
        if self.restore_policy not in ("per_phase", "cached"):
            raise ValueError(f"unknown restore policy {self.restore_policy!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class BatchLabels:
    """Labels of one mini-batch indexed by global atom id / config."""

    energy: np.ndarray
    forces: np.ndarray
    stress: np.ndarray
    has_stress: np.ndarray
    magmoms: np.ndarray
    has_magmoms: np.ndarray
    task: np.ndarray
    n_atoms: np.ndarray

    @classmethod
    def from_configs(cls, configs, lcfg: TaskLossConfig) -> "BatchLabels":
        n_at = np.array([c.n_atoms for c in configs], dtype=np.int64)
        if lcfg.w_energy > 0 and any(c.energy is None for c in configs):
            raise MissingLabelError("energy label required")
        if lcfg.w_force > 0 and any(c.forces is None for c in configs):
            raise MissingLabelError("force label required")
        z3 = np.zeros((0, 3))
        return cls(
            energy=np.array([0.0 if c.energy is None else c.energy for c in configs]),
            forces=np.concatenate([c.forces if c.forces is not None else np.zeros((c.n_atoms, 3))
                                   for c in configs]) if configs else z3,
            stress=np.stack([c.stress if c.stress is not None else np.zeros((3, 3)) for c in configs]),
            has_stress=np.array([c.stress is not None and c.periodic for c in configs]),
            magmoms=np.concatenate([c.magmoms if c.magmoms is not None else np.zeros(c.n_atoms)
                                    for c in configs]),
            has_magmoms=np.array([c.magmoms is not None for c in configs]),
            task=np.array([c.task for c in configs], dtype=np.int64),
            n_atoms=n_at)


@dataclass
class StepInputs:
    """Read-only data every rank sees for one global step."""

    model: ModelConfig
    loss: TaskLossConfig
    opts: RuntimeOptions
    layout: ShardLayout
    batches: list          # GraphShards per mini-batch (replica graph group size)
    labels: list           # BatchLabels per mini-batch
    replica_batches: list  # mini-batch ids per data-parallel replica
    lr: float


@dataclass
class RankState:
    shards: dict
    momentum: dict = field(default_factory=dict)


@dataclass
class RankResult:
    rank: int
    accepted: bool
    restores: Counter
    prefetch: list
    flops_mults: int
    metrics: list
    timeline: object = None
    plan_text: str = ""
    union: list = field(default_factory=list)
    grads: dict | None = None


# ---------------------------------------------------------------------------
# parameter restore / release


class ParamManager:
    """Owns the leaf tensors of one rank and their restore/release cycle."""

    def __init__(self, comms, layout: ShardLayout, state: RankState, plan, dtype, policy: str):
        self.comms = comms
        self.layout = layout
        self.state = state
        self.plan = plan
        self.dtype = np.dtype(dtype)
        self.policy = policy
        self.leaves = {n: T.Tensor(None, requires_grad=True, name=n) for n in layout.names}
        self.dense = [n for n in layout.names if not is_expert(n)]
        self.order = list(self.dense)
        self.recorded = False
        self.restores = Counter()
        self.live = False

    def record(self, accessed: list[str]):
        """Fix the dense prefetch order from the first forward's access order."""
        if self.recorded:
            return
        seen = [n for n in accessed if n in set(self.dense)]
        self.order = seen + [n for n in self.dense if n not in set(seen)]
        self.recorded = True

    def restore(self):
        if self.live:
            return
        shards = self.state.shards
        got = self.comms.fs.all_gather({n: shards[n] for n in self.order}, kind="param_gather")
        for n in self.order:
            full = unshard_segment([g[n] for g in got], self.layout.segment(n))
            self.leaves[n].data = full.astype(self.dtype)
            self.restores[n] += 1
        for n, full in restore_experts(self.comms.fs, self.plan, self.layout, shards).items():
            self.leaves[n].data = full.astype(self.dtype)
            self.restores[n] += 1
        self.live = True

    def release(self):
        for t in self.leaves.values():
            t.data = None
        self.live = False

    def enter(self, phase: int):
        if self.policy == "per_phase" or phase == 1:
            self.restore()

    def leave(self, phase: int):
        if self.policy == "per_phase" or phase == 4:
            self.release()


# ---------------------------------------------------------------------------
# loss


def loss_terms(ctx, pred, lab: BatchLabels, lcfg: TaskLossConfig, dtype) -> LossTerms:
    """Per-configuration loss components (replicated across the graph group)."""
    inp = ctx.inp
    dt = np.dtype(dtype)
    n_at = lab.n_atoms.astype(np.float64)
    c = lambda a: T.Tensor(np.asarray(a, dtype=dt))
    terms = {"energy": None, "force": None, "stress": None, "magmom": None}
    if lcfg.w_energy > 0:
        err = pred.energy - c(lab.energy[:, None])
        terms["energy"] = elementwise(err, lcfg) * c((1.0 / n_at)[:, None])
    if lcfg.w_force > 0:
        err = pred.forces - T.Tensor(lab.forces[inp.atom_gid].astype(dt), owners=inp.atom_gid)
        per = T.sum_(elementwise(err, lcfg), axis=1, keepdims=True)
        terms["force"] = ctx.config_sum(per) * c((1.0 / (3.0 * n_at))[:, None])
    if lcfg.w_stress > 0 and lab.has_stress.any():
        sig = stress_tensor(pred.stress_grad, inp)
        err = sig - c(lab.stress.reshape(-1, 9))
        mask = lab.has_stress.astype(np.float64) / 9.0
        terms["stress"] = T.sum_(elementwise(err, lcfg), axis=1, keepdims=True) * c(mask[:, None])
    if lcfg.w_magmom > 0 and lab.has_magmoms.any():
        err = pred.magmoms - T.Tensor(lab.magmoms[inp.atom_gid][:, None].astype(dt), owners=inp.atom_gid)
        per = ctx.config_sum(elementwise(err, lcfg))
        mask = lab.has_magmoms.astype(np.float64) / n_at
        terms["magmom"] = per * c(mask[:, None])
    return LossTerms(**terms)


# ---------------------------------------------------------------------------
# step


def _plan(comms, inp: StepInputs, routing):
    """Every rank derives the plan from global token counts; the merge checks agreement."""
    fs = comms.world.fs
    splits = {}
    for layer in inp.model.moe_layers:
        tot = np.zeros((fs, inp.model.n_experts), dtype=np.int64)
        for gs in inp.batches:
            tot += token_splits(layer, gs.inputs, fs, routing[layer], inp.model.n_experts)
        splits[layer] = tot
    plan = plan_generation(splits, fs)
    text = plan.serialize()
    got = comms.world_comm.all_gather(np.frombuffer(text.encode(), dtype=np.uint8), kind="plan_merge")
    return merge_local_plans([ExpertPlan.parse(bytes(b).decode()) for b in got]), text


def _routing(comms, inp: StepInputs, state: RankState):
    names = [f"{l}.router" for l in inp.model.moe_layers]
    got = comms.fs.all_gather({n: state.shards[n] for n in names}, kind="param_gather")
    full = {n: unshard_segment([g[n] for g in got], inp.layout.segment(n)) for n in names}
    return route_all(full, inp.model)


def _active(layouts, plan, moe_layers) -> set:
    act = set()
    for lay in layouts:
        for layer in moe_layers:
            act.update((layer, e) for e in lay.moe[layer].experts)
    return act


def rank_step(comms, inp: StepInputs, state: RankState, return_grads=False) -> RankResult:
    cfg, lcfg, opts = inp.model, inp.loss, inp.opts
    dt = np.dtype(opts.precision)
    f, g, d = comms.coords
    q = g * comms.world.fs + f
    det = opts.deterministic

    routing = _routing(comms, inp, state)
    plan, plan_text = _plan(comms, inp, routing)
    pm = ParamManager(comms, inp.layout, state, plan, dt, opts.restore_policy)
    shapes = {s.name: s.shape for s in inp.layout.segments}

    mb_grads, metrics, flops = [], [], 0
    active = set()
    with T.deterministic(det):
        for m in inp.replica_batches[d]:
            gs: GraphShards = inp.batches[m]
            layouts = rank_layouts(gs, comms.world.fs, routing, plan, cfg.moe_layers)
            active |= _active(layouts, plan, cfg.moe_layers)
            grads, met, mults = _minibatch(comms, pm, layouts[q], inp.labels[m], cfg, lcfg, opts, routing, dt)
            flops += mults
            if det:
                full = sync.fold_segmented(comms.graph, grads, shapes, dt)
            else:
                full = sync.reduce_plain(comms.graph, grads, shapes, dt)
            mb_grads.append(full)
            met["minibatch"] = m
            met["edges"] = int(gs.inputs[0].n_edges_global)
            metrics.append(met)
    rep = sync.tree_sum_dicts(mb_grads, det) if mb_grads else {n: np.zeros(s, dt) for n, s in shapes.items()}

    res = RankResult(comms.rank, True, pm.restores, list(pm.order), flops, metrics, plan_text=plan_text)
    if return_grads:
        res.grads = rep
    finite = all(bool(np.all(np.isfinite(v))) for v in rep.values())
    bad = comms.dp.all_reduce(np.array([0.0 if finite else 1.0]), op="max", kind="finite_check")
    bad = comms.graph.all_reduce(bad, op="max", kind="finite_check")
    if bad[0] > 0:
        res.accepted = False
        return res
    res.timeline, res.union = apply_update(comms, inp, state, rep, active)
    return res


def _minibatch(comms, pm: ParamManager, layout, lab: BatchLabels, cfg, lcfg, opts, routing, dt):
    inp = layout.inputs
    with T.count_ops() as ops:
        pm.enter(1)
        ctx = DistContext(layout, pm.leaves, routing, comms.graph, comms.fs, compress=opts.compress)
        x = T.Tensor(inp.x.astype(dt), requires_grad=True, owners=inp.atom_gid)
        strain = T.Tensor(np.zeros((inp.n_configs, 3, 3), dtype=dt), requires_grad=True)
        pred = forward(ctx, cfg, x, strain)
        pm.record(ctx.access_order)
        pm.leave(1)

        pm.enter(2)
        derivatives(pred, create_graph=True)
        pm.leave(2)

        terms = loss_terms(ctx, pred, lab, lcfg, dt)
        l_fs, l_em, totals, ww = weighted_split(terms, lab.task, lcfg)
        used = [pm.leaves[n] for n in ctx.access_order]
        det = T.is_deterministic()
        grads: dict = {}
        for phase, part in ((3, l_fs), (4, l_em)):
            pm.enter(phase)
            if part is not None:
                out = T.grad(part, used, segmented=used if det else ())
                for n, gr in zip(ctx.access_order, out):
                    _merge(grads, n, gr, det)
            pm.leave(phase)
    met = {"loss": float(np.mean(ww * totals)), "plain_loss": float(np.mean(totals)),
           "n_configs": int(len(totals)), "tasks": lab.task.tolist(),
           "totals": totals.tolist()}
    for k, v in terms.values().items():
        met[k] = float(np.mean(v))
    return grads, met, int(ops["total"])


def _merge(grads, name, gr, det):
    if det:
        cur = grads.get(name)
        if cur is None:
            grads[name] = gr
        else:
            for o, v in gr.parts.items():
                cur.parts[o] = v if o not in cur.parts else cur.parts[o] + v
    else:
        grads[name] = gr.data if name not in grads else grads[name] + gr.data


# ---------------------------------------------------------------------------
# update


def _shard_of(full: np.ndarray, seg, k: int) -> np.ndarray:
    flat = np.zeros(seg.padded, dtype=full.dtype)
    flat[:seg.size] = full.reshape(-1)
    lo, hi = seg.bounds(k)
    return flat[lo:hi]


def apply_update(comms, inp: StepInputs, state: RankState, rep: dict, active: set):
    """Replica sync (pipelined buckets for dense, sparse sync for experts) and SGD."""
    opts = inp.opts
    det = opts.deterministic
    f = comms.coords[0]
    layout = inp.layout
    n_total = sum(len(b) for b in inp.replica_batches)
    scale = 1.0 / n_total
    opt = SGD(inp.lr, opts.momentum)

    def update(name, g):
        dtp = state.shards[name].dtype
        g = (g * dtp.type(scale)).astype(dtp)
        state.shards[name], buf = opt.update(state.shards[name], g, state.momentum.get(name))
        if buf is not None:
            state.momentum[name] = buf

    dense = [n for n in layout.names if not is_expert(n)]
    sizes = [layout.segment(n).shard_size * np.dtype(opts.precision).itemsize for n in dense]
    buckets = make_buckets(dense, sizes, n_buckets=opts.n_buckets)
    sched = (pipelined_schedule if opts.pipelined else sequential_schedule)(len(buckets))
    carry = {}
    for b, s in sched.order():
        bk = buckets[b]
        if s == 0:
            vec = np.concatenate([_shard_of(rep[n], layout.segment(n), f) for n in bk.names])
            carry[b] = sync.stage_aggregate(comms, vec, det)
        elif s == 1:
            carry[b] = sync.stage_inter_rack(comms, carry[b], det)
        elif s == 2:
            carry[b] = sync.stage_broadcast(comms, carry[b])
        else:
            k = 0
            for n in bk.names:
                size = layout.segment(n).shard_size
                update(n, carry[b][k:k + size])
                k += size
            del carry[b]
        bk.advance(STAGES[s])
    assert all(bk.done for bk in buckets)

    def names_of(layer, e):
        pre = expert_prefix(layer, e)
        return [n for n in layout.names if n.startswith(pre)]

    ex = {n: _shard_of(rep[n], layout.segment(n), f) for n in layout.names if is_expert(n)}
    synced, union = sync.sparse_grad_sync(comms.dp, ex, active, names_of, det)
    for n, gr in synced.items():
        update(n, gr)
    return sched, union
