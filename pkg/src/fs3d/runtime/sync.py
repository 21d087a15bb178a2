"""Gradient synchronization: graph-group fold, mini-batch tree, replica sync."""

from __future__ import annotations

import numpy as np

from ..tensor import SegmentedGrad
from .transport import sequential_reduce, tree_reduce


def fold_segmented(comm, grads: dict, shapes: dict, dtype) -> dict:
    """Merge per-owner partials from every graph rank and fold by ascending owner."""
    mine = {n: sg.parts for n, sg in grads.items() if sg.parts}
    got = comm.all_gather(mine, kind="grad_gather")
    out = {}
    for n, shape in shapes.items():
        parts = {}
        for rank_parts in got:
            for o, v in rank_parts.get(n, {}).items():
                parts[o] = v if o not in parts else parts[o] + v
        out[n] = SegmentedGrad(shape, np.dtype(dtype), parts).fold()
    return out


def reduce_plain(comm, grads: dict, shapes: dict, dtype) -> dict:
    """Sum plain per-rank gradients over the graph group (rank order)."""
    names = list(shapes)
    flat = np.concatenate([np.asarray(grads.get(n, np.zeros(shapes[n], dtype)), dtype=dtype).reshape(-1)
                           for n in names]) if names else np.zeros(0, dtype)
    tot = comm.all_reduce(flat, order="sequential", kind="grad_allreduce")
    return unflatten(tot, names, shapes)


def unflatten(flat: np.ndarray, names: list, shapes: dict) -> dict:
    out, k = {}, 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = flat[k:k + size].reshape(shapes[n])
        k += size
    return out


def tree_sum_dicts(items: list[dict], deterministic: bool = True) -> dict:
    """Elementwise sum of gradient dicts: fixed binary tree, or left to right."""
    red = tree_reduce if deterministic else sequential_reduce
    return red(items, lambda a, b: {n: a[n] + b[n] for n in a})


# ---------------------------------------------------------------------------
# hierarchical stages (data-parallel group split into racks)


def stage_aggregate(comms, vec: np.ndarray, deterministic=True):
    """Intra-rack aggregation onto the rack leader (None elsewhere)."""
    parts = comms.rack.gather(vec, root=0, kind="rack_aggregate")
    if parts is None:
        return None
    return (tree_reduce if deterministic else sequential_reduce)(parts)


def stage_inter_rack(comms, agg, deterministic=True):
    if not comms.is_leader:
        return None
    return comms.leaders.all_reduce(agg, order="tree" if deterministic else "sequential",
                                    kind="inter_rack")


def stage_broadcast(comms, agg):
    return comms.rack.broadcast(agg, root=0, kind="rack_broadcast")


def hierarchical_all_reduce(comms, vec: np.ndarray, deterministic=True) -> np.ndarray:
    agg = stage_aggregate(comms, vec, deterministic)
    agg = stage_inter_rack(comms, agg, deterministic)
    return stage_broadcast(comms, agg)


# ---------------------------------------------------------------------------
# sparse expert synchronization


def union_of_active(comm, active) -> list[tuple[str, int]]:
    """Union of every replica's active (layer, expert) set, sorted."""
    layers = sorted({l for l, _ in active})
    mine = np.array(sorted((layers.index(l), e) for l, e in active), dtype=np.int64).reshape(-1, 2)
    names = comm.all_gather(layers, kind="active_sets")
    sets = comm.all_gather(mine, kind="active_sets")
    out = set()
    for lay, arr in zip(names, sets):
        out.update((lay[i], int(e)) for i, e in arr.tolist())
    return sorted(out)


def sparse_grad_sync(comm, grads: dict, active, names_of, deterministic=True):
    """All-reduce expert gradients over the union of active sets only.

    ``grads`` maps parameter name to this replica's gradient (missing names
    are zero-filled); ``names_of(layer, e)`` lists an expert's parameter names.
    Returns (synchronized grads for union experts, union).
    """
    union = union_of_active(comm, active)
    if not union:
        return {}, union
    names = [n for l, e in union for n in names_of(l, e)]
    shapes = {n: grads[n].shape for n in names}
    flat = np.concatenate([grads[n].reshape(-1) for n in names])
    red = comm.all_reduce(flat, order="tree" if deterministic else "sequential", kind="expert_sync")
    return unflatten(red, names, shapes), union


def dense_expert_sync(comm, grads: dict, names: list, deterministic=True) -> dict:
    """Reference: all-reduce every expert gradient."""
    shapes = {n: grads[n].shape for n in names}
    flat = np.concatenate([grads[n].reshape(-1) for n in names])
    red = comm.all_reduce(flat, order="tree" if deterministic else "sequential", kind="expert_sync_dense")
    return unflatten(red, names, shapes)
