"""Expert parallelism inside one fully-sharded group.

Experts are owned by the shard ranks named in the step's :class:`ExpertPlan`.
An owner materializes its experts' full parameters with one parameter
all-to-all along the shard dimension; tokens travel to the owner and back
through the differentiable exchanges of :mod:`.partition`.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..model import BatchInputs, Routing, expert_prefix
from ..planner import ExpertPlan
from .partition import plan_owner, exchange_gather, moe_routes
from .sharding import ShardLayout, unshard_segment


def token_splits(layer: str, inputs: list[BatchInputs], fs: int, routing: Routing,
                 n_experts: int) -> np.ndarray:
    """(fs x experts) counts of tokens routed from each shard index.

    ``inputs`` are the per-rank inputs of one replica in graph-group order
    (index g * fs + f).
    """
    out = np.zeros((fs, n_experts), dtype=np.int64)
    edge = layer.endswith("moe0")
    for q, inp in enumerate(inputs):
        el = inp.src_z if edge else inp.z
        if len(el) == 0:
            continue
        topk = routing.experts_for(el)
        np.add.at(out[q % fs], topk.reshape(-1), 1)
    return out


def expert_names(plan: ExpertPlan, layout: ShardLayout, rank: int | None = None) -> list[str]:
    """Parameter names of planned experts in prefetch order (optionally one owner's)."""
    names = []
    for layer, e in plan.prefetch:
        if rank is not None and plan.owner(layer, e) != rank:
            continue
        pre = expert_prefix(layer, e)
        names.extend(n for n in layout.names if n.startswith(pre))
    return names


def restore_experts(comm, plan: ExpertPlan, layout: ShardLayout, shards: dict) -> dict:
    """Full parameters of the experts this shard rank owns, via one all-to-all."""
    payloads = [{n: shards[n] for n in expert_names(plan, layout, p)} for p in range(comm.size)]
    got = comm.all_to_all(payloads, kind="param_a2a")
    mine = expert_names(plan, layout, comm.index)
    return {n: unshard_segment([got[p][n] for p in range(comm.size)], layout.segment(n)) for n in mine}


def token_bytes(route, width: int, itemsize: int, self_index: int) -> int:
    """Bytes a dispatch route sends off-rank: off-owner tokens x width x scalar size."""
    return sum(len(ix) for p, ix in enumerate(route.send_idx) if p != self_index) * width * itemsize


def dispatch_combine(comm, layer: str, tokens: T.Tensor, elems: np.ndarray, gid: np.ndarray,
                     routing: Routing, plan: ExpertPlan, experts_fn, n_tok_global: int,
                     compress: bool = False) -> list[T.Tensor]:
    """Route local tokens to their experts' owners and back; one output per top-K slot.

    Token metadata is all-gathered first so every member builds the same routes.
    Output slot ``s`` row ``i`` is the output of expert ``topk[i, s]`` on token ``i``.
    """
    owners = tokens.owners if tokens.owners is not None else gid
    meta = comm.all_gather((np.asarray(gid), np.asarray(elems), np.asarray(owners)), kind="a2a_meta")
    mr = moe_routes(meta, routing, plan_owner(plan, layer), n_tok_global)[comm.index]
    sent = exchange_gather(tokens, mr.dispatch, comm, kind="a2a_tokens", compress=compress)
    ys = [experts_fn(e, T.slice_(sent, lo, hi)) for e, (lo, hi) in zip(mr.experts, mr.bounds)]
    y = T.concat(ys, axis=0) if ys else T.slice_(sent, 0, 0)
    return [exchange_gather(y, r, comm, kind="a2a_tokens", compress=compress) for r in mr.combine]

