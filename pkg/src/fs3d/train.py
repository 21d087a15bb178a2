"""Training loop over logical ranks, checkpoints, metrics and evaluation."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .graph import batch_graphs, build_neighbor_list
from .model import Model, ModelConfig, ParameterStore, check_config, init_params
from .planner import greedy_batch
from .runtime.lifecycle import BatchLabels, RankState, StepInputs, rank_step
from .runtime.optim import scaled_lr, schedule_factor
from .runtime.partition import shard_batch
from .runtime.sharding import ShardLayout, make_layout, shard_segment, unshard
from .runtime.transport import RankComms, RankWorld, Transport, run_ranks

CKPT_MAGIC = b"FS3DCKPT"


class NumericError(ArithmeticError):
    pass


@dataclass
class StepMetrics:
    step: int
    epoch: int
    wall_time: float
    loss: float
    plain_loss: float
    components: dict
    task_loss: dict
    edges: int
    flops: int
    bytes: dict
    bubble_ratio: float
    accepted: bool
    lr: float
    edges_per_sec: float = field(init=False)

    def __post_init__(self):
        self.edges_per_sec = self.edges / self.wall_time if self.wall_time > 0 else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)


# ---------------------------------------------------------------------------
# checkpoints: 8-byte magic, u64 header length, JSON header, raw little-endian arrays


def save_checkpoint(path, store: ParameterStore, layout: ShardLayout, momentum: ParameterStore | None = None,
                    meta: dict | None = None) -> None:
    arrays, blobs = [], []
    for group, st in (("params", store), ("momentum", momentum)):
        if st is None:
            continue
        for name, arr in st.items():
            a = np.ascontiguousarray(arr)
            arrays.append([group, name, a.dtype.newbyteorder("<").str, list(a.shape)])
            blobs.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    header = json.dumps({"layout": layout.to_dict(), "arrays": arrays, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return (params, layout, momentum or None, meta)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", buf[8:16])
    head = json.loads(buf[16:16 + n])
    k = 16 + n
    stores = {"params": {}, "momentum": {}}
    for group, name, dt, shape in head["arrays"]:
        dt = np.dtype(dt)
        size = int(np.prod(shape)) * dt.itemsize
        stores[group][name] = np.frombuffer(buf[k:k + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        k += size
    mom = ParameterStore(stores["momentum"]) if stores["momentum"] else None
    return ParameterStore(stores["params"]), ShardLayout.from_dict(head["layout"]), mom, head["meta"]


def checkpoint_payload(path) -> bytes:
    """The array bytes of a checkpoint (independent of world dims)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (n,) = struct.unpack("<Q", buf[8:16])
    return buf[16 + n:]


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, rc: RunConfig, dataset, params: ParameterStore | None = None):
        if not dataset:
            raise ValueError("empty dataset")
        self.rc = rc
        self.cfg: ModelConfig = rc.model_config()
        self.lcfg = rc.loss_config()
        self.opts = rc.runtime_options()
        self.world = RankWorld(rc.fs, rc.gp, rc.dp, rc.rack_size)
        for c in dataset:
            check_config(self.cfg, c)
        self.dataset = list(dataset)
        store = params if params is not None else init_params(self.cfg, rc.seed, rc.residual_scale,
                                                              dtype=rc.precision)
        store = store.astype(rc.precision)
        self.layout = make_layout(store, rc.fs)
        self.states = []
        for r in range(self.world.size):
            f = self.world.coords(r)[0]
            self.states.append(RankState({s.name: shard_segment(store[s.name], s, f)
                                          for s in self.layout.segments}))
        self.graphs: dict[int, object] = {}
        self.step_count = 0
        self.history: list[StepMetrics] = []

    # data --------------------------------------------------------------

    def graph(self, i: int):
        if i not in self.graphs:
            self.graphs[i] = build_neighbor_list(self.dataset[i], self.cfg.r_cut)
        return self.graphs[i]

    def global_batches(self, epoch: int) -> list[list[int]]:
        """Seeded shuffle; a trailing partial batch is dropped."""
        order = np.random.default_rng([self.rc.seed, epoch]).permutation(len(self.dataset))
        b = self.rc.batch_size
        return [order[k:k + b].tolist() for k in range(0, len(order) - b + 1, b)]

    def step_inputs(self, idx: list[int]) -> StepInputs:
        rc = self.rc
        asg = greedy_batch([self.dataset[i].n_atoms for i in idx], rc.minibatches)
        batches, labels = [], []
        for b in range(rc.minibatches):
            mem = [idx[k] for k in asg.members(b)]
            cs = [self.dataset[i] for i in mem]
            bg = batch_graphs(cs, self.cfg.r_cut, graphs=[self.graph(i) for i in mem])
            batches.append(shard_batch(self.cfg, bg, rc.fs * rc.gp))
            labels.append(BatchLabels.from_configs(cs, self.lcfg))
        per = rc.minibatches // rc.dp
        replicas = [list(range(d * per, (d + 1) * per)) for d in range(rc.dp)]
        lr = scaled_lr(rc.base_lr, len(idx), rc.reference_batch) \
            * schedule_factor(rc.lr_schedule, self.step_count, self.total_steps())
        return StepInputs(self.cfg, self.lcfg, self.opts, self.layout, batches, labels, replicas, lr)

    def total_steps(self) -> int:
        """Planned optimizer steps: epochs x full batches, capped by max_steps."""
        n = self.rc.epochs * (len(self.dataset) // self.rc.batch_size)
        return min(n, self.rc.max_steps) if self.rc.max_steps else n

    # step --------------------------------------------------------------

    def step(self, idx: list[int], epoch: int = 0) -> StepMetrics:
        t0 = time.perf_counter()
        inp = self.step_inputs(idx)
        tr = Transport(self.world.size, timeout=self.rc.timeout)
        res = run_ranks(self.world.size,
                        lambda r: rank_step(RankComms(self.world, tr, r), inp, self.states[r]), tr)
        wall = time.perf_counter() - t0
        self.step_count += 1
        m = self._metrics(res, inp, tr, wall, epoch)
        self.history.append(m)
        if not np.isfinite(m.loss):
            raise NumericError(f"non-finite loss {m.loss} at step {self.step_count}")
        return m

    def _metrics(self, res, inp: StepInputs, tr: Transport, wall: float, epoch: int) -> StepMetrics:
        # graph rank 0 of every replica reports that replica's mini-batches
        lead = [r for r in res if r.rank % (self.rc.fs * self.rc.gp) == 0]
        mets = [m for r in lead for m in r.metrics]
        n = sum(m["n_configs"] for m in mets)
        comps = {}
        for k in ("energy", "force", "stress", "magmom"):
            if any(k in m for m in mets):
                comps[k] = sum(m.get(k, 0.0) * m["n_configs"] for m in mets) / n
        tasks: dict = {}
        for m in mets:
            for t, v in zip(m["tasks"], m["totals"]):
                tasks.setdefault(str(t), []).append(v)
        edges = sum(int(gs.inputs[0].n_edges_global) for gs in inp.batches)
        tl = res[0].timeline
        return StepMetrics(
            step=self.step_count, epoch=epoch, wall_time=wall,
            loss=float(np.mean([m["loss"] for m in mets])),
            plain_loss=sum(m["plain_loss"] * m["n_configs"] for m in mets) / n,
            components=comps, task_loss={t: float(np.mean(v)) for t, v in sorted(tasks.items())},
            edges=edges, flops=2 * sum(r.flops_mults for r in res),
            bytes=dict(sorted(tr.bytes.items())),
            bubble_ratio=float(tl.bubble_ratio) if tl is not None else 0.0,
            accepted=all(r.accepted for r in res), lr=inp.lr)

    def run(self, epochs: int | None = None, max_steps: int | None = None, on_step=None, start: int = 0):
        """Train epochs ``start .. start + epochs - 1``."""
        epochs = self.rc.epochs if epochs is None else epochs
        limit = (self.rc.max_steps or None) if max_steps is None else max_steps
        for ep in range(start, start + epochs):
            for idx in self.global_batches(ep):
                if limit is not None and self.step_count >= limit:
                    return self.history
                m = self.step(idx, ep)
                if on_step is not None:
                    on_step(m)
        return self.history

    # state -------------------------------------------------------------

    def _gather(self, key) -> ParameterStore:
        shards = []
        for f in range(self.rc.fs):
            st = self.states[self.world.rank(f, 0, 0)]
            got = key(st)
            # a parameter never updated yet has no buffer; that equals a zero buffer
            shards.append({n: got[n] if n in got else np.zeros_like(v) for n, v in st.shards.items()})
        return unshard(self.layout, shards)

    def params(self) -> ParameterStore:
        return self._gather(lambda s: s.shards)

    def momentum(self) -> ParameterStore | None:
        return self._gather(lambda s: s.momentum) if self.rc.momentum else None

    def replicas_agree(self) -> bool:
        """Every rank with the same shard index holds identical shards."""
        ref = {f: self.states[self.world.rank(f, 0, 0)].shards for f in range(self.rc.fs)}
        for r, st in enumerate(self.states):
            f = self.world.coords(r)[0]
            if any(not np.array_equal(st.shards[n], ref[f][n]) for n in ref[f]):
                return False
        return True

    def save(self, path) -> None:
        save_checkpoint(path, self.params(), self.layout, self.momentum(),
                        {"step": self.step_count, "model": self.cfg.to_dict()})


# ---------------------------------------------------------------------------
# evaluation


def evaluate(cfg: ModelConfig, params: ParameterStore, configs, dtype="float64", chunk: int = 16) -> dict:
    """Energy MAE per atom and force MAE of a single-worker model."""
    model = Model(cfg, params)
    e_err, f_err, n_at = [], [], 0
    for k in range(0, len(configs), chunk):
        cs = configs[k:k + chunk]
        with T.deterministic(True):
            e, f = model.energy_forces(cs, dtype)
        n = np.array([c.n_atoms for c in cs], dtype=np.float64)
        e_err.append(np.abs(e.astype(np.float64) - [c.energy for c in cs]) / n)
        f_err.append(np.abs(f.astype(np.float64) - np.concatenate([c.forces for c in cs])).reshape(-1))
        n_at += int(n.sum())
    e_err, f_err = np.concatenate(e_err), np.concatenate(f_err)
    return {"energy_mae": float(e_err.mean()), "force_mae": float(f_err.mean()), "n_atoms": n_at}


# ---------------------------------------------------------------------------
# throughput


def edges_per_second(edges_per_step: float, n_steps: int, seconds: float) -> float:
    return edges_per_step * n_steps / seconds


def bench_report(history: list[StepMetrics], warmup: int, total_seconds: float) -> dict:
    """Peak counts training-loop time of the measured steps only; sustained
    divides the same work by the whole wall clock, setup and I/O included."""
    meas = history[warmup:]
    if not meas:
        raise ValueError("no measured steps after warm-up")
    edges = sum(m.edges for m in meas)
    loop = sum(m.wall_time for m in meas)
    flops = sum(m.flops for m in meas)
    nbytes: dict = {}
    for m in meas:
        for k, v in m.bytes.items():
            nbytes[k] = nbytes.get(k, 0) + v
    return {"steps": len(meas), "warmup": warmup, "edges": edges, "flops": flops,
            "loop_seconds": loop, "total_seconds": total_seconds,
            "avg_step_seconds": loop / len(meas),
            "peak_edges_per_sec": edges / loop, "sustained_edges_per_sec": edges / total_seconds,
            "peak_flops_per_sec": flops / loop, "bytes": dict(sorted(nbytes.items()))}
