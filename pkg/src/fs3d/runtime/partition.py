"""Graph partitioning and the distributed differentiable exchanges.

An exchange moves rows between ranks according to a :class:`Route`. Its
adjoint scatters cotangent rows back and accumulates them in ascending
global-key order, which reproduces the accumulation order of a single-rank
``scatter_add`` over the same rows. Config-level reductions work the same way,
so a partitioned forward and backward are bitwise equal to the unpartitioned
ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..compress import QuantizedBlock, dequantize, quantize_by_type
from ..graph import NeighborGraph
from ..model import BatchInputs, Routing, make_inputs
from ..planner import lpt_assign
from ..tensor import Primitive, Tensor


@dataclass
class GraphPartition:
    n_ranks: int
    owner: np.ndarray           # atom -> rank
    local_index: np.ndarray     # atom -> row on its owner
    atoms: list                 # per rank: sorted global atom ids
    edges: list                 # per rank: sorted global edge ids (owned by target)
    halo: list                  # per rank: remote source atoms needed

    def edge_counts(self) -> list[int]:
        return [len(e) for e in self.edges]


def partition_graph(g: NeighborGraph, n_ranks: int) -> GraphPartition:
    """Atoms to ranks by LPT on per-atom edge counts; edges follow their target."""
    if n_ranks < 1:
        raise ValueError("need at least one rank")
    owner = np.asarray(lpt_assign(g.counts.tolist(), n_ranks), dtype=np.int64) if g.n_atoms else np.zeros(0, np.int64)
    atoms = [np.nonzero(owner == r)[0].astype(np.int64) for r in range(n_ranks)]
    local_index = np.zeros(g.n_atoms, dtype=np.int64)
    for a in atoms:
        local_index[a] = np.arange(len(a))
    edge_owner = owner[g.tgt] if g.n_edges else np.zeros(0, np.int64)
    edges = [np.nonzero(edge_owner == r)[0].astype(np.int64) for r in range(n_ranks)]
    halo = []
    for r in range(n_ranks):
        src = g.src[edges[r]]
        halo.append(np.unique(src[owner[src] != r]))
    return GraphPartition(n_ranks, owner, local_index, atoms, edges, halo)


# ---------------------------------------------------------------------------
# routes


@dataclass
class Route:
    """One rank's view of a row exchange within a group.

    Output row ``recv_pos[p][k]`` comes from peer ``p``; the local input rows
    ``send_idx[p]`` are what peer ``p`` asked for, with global keys
    ``send_key[p]``.
    """

    n_in: int
    n_out: int
    send_idx: list
    send_key: list
    recv_pos: list
    out_owners: np.ndarray | None = None
    in_owners: np.ndarray | None = None
    out_types: np.ndarray | None = None
    in_types: np.ndarray | None = None

    def received_from(self) -> list[int]:
        return [len(p) for p in self.recv_pos]

    def sent_to(self) -> list[int]:
        return [len(p) for p in self.send_idx]


def build_routes(n: int, n_in: list[int], src_rank: list, src_idx: list, key: list,
                 out_owners=None, in_owners=None, out_types=None, in_types=None) -> list[Route]:
    """Routes for every member from each destination's (rank, row, key) requests."""
    send_idx = [[None] * n for _ in range(n)]
    send_key = [[None] * n for _ in range(n)]
    recv_pos = [[None] * n for _ in range(n)]
    for r in range(n):
        sr = np.asarray(src_rank[r], dtype=np.int64)
        for p in range(n):
            m = np.nonzero(sr == p)[0]
            recv_pos[r][p] = m
            send_idx[p][r] = np.asarray(src_idx[r], dtype=np.int64)[m]
            send_key[p][r] = np.asarray(key[r], dtype=np.int64)[m]
    out = []
    for r in range(n):
        out.append(Route(
            n_in=int(n_in[r]), n_out=len(src_rank[r]),
            send_idx=send_idx[r], send_key=send_key[r], recv_pos=recv_pos[r],
            out_owners=None if out_owners is None else out_owners[r],
            in_owners=None if in_owners is None else in_owners[r],
            out_types=None if out_types is None else out_types[r],
            in_types=None if in_types is None else in_types[r]))
    return out


# ---------------------------------------------------------------------------
# raw (non-differentiable) exchanges


def _pack(rows: np.ndarray, types, compress: bool, comm, off_rank: bool):
    if compress and off_rank and rows.shape[0] and types is not None:
        blk = quantize_by_type(rows.reshape(rows.shape[0], -1), types)
        comm.t.count("a2a_scales", blk.scale_bytes)
        return blk, rows.shape
    return rows, None


def _unpack(obj, dtype):
    payload, shape = obj
    if isinstance(payload, QuantizedBlock):
        return dequantize(payload, dtype).reshape(shape)
    return payload


def route_gather(a: np.ndarray, route: Route, comm, kind: str, compress=False) -> np.ndarray:
    payloads = []
    for p in range(comm.size):
        idx = route.send_idx[p]
        types = None if route.in_types is None else route.in_types[idx]
        payloads.append(_pack(a[idx], types, compress, comm, p != comm.index))
    got = comm.all_to_all(payloads, kind=kind)
    out = np.zeros((route.n_out,) + a.shape[1:], dtype=a.dtype)
    for p, obj in enumerate(got):
        out[route.recv_pos[p]] = _unpack(obj, a.dtype)
    return out


def route_scatter(g: np.ndarray, route: Route, comm, kind: str, compress=False, op="sum") -> np.ndarray:
    payloads = []
    for p in range(comm.size):
        pos = route.recv_pos[p]
        types = None if route.out_types is None else route.out_types[pos]
        payloads.append(_pack(g[pos], types, compress, comm, p != comm.index))
    got = comm.all_to_all(payloads, kind=kind)
    idx = np.concatenate(route.send_idx) if comm.size else np.zeros(0, np.int64)
    keys = np.concatenate(route.send_key) if comm.size else np.zeros(0, np.int64)
    rows = np.concatenate([_unpack(obj, g.dtype).reshape((-1,) + g.shape[1:]) for obj in got], axis=0)
    order = np.argsort(keys, kind="stable")
    if op == "sum":
        out = np.zeros((route.n_in,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, idx[order], rows[order])
    else:
        out = np.full((route.n_in,) + g.shape[1:], -np.inf, dtype=g.dtype)
        np.maximum.at(out, idx[order], rows[order])
    return out


# ---------------------------------------------------------------------------
# differentiable exchanges


def _xg_fwd(a, route, comm, kind, compress):
    return route_gather(a, route, comm, kind, compress)


def _xg_vjp(n, g, want):
    at = n.attrs
    return (exchange_scatter(g, at["route"], at["comm"], at["kind"], at["compress"]),)


def _xs_fwd(a, route, comm, kind, compress):
    return route_scatter(a, route, comm, kind, compress)


def _xs_vjp(n, g, want):
    at = n.attrs
    return (exchange_gather(g, at["route"], at["comm"], at["kind"], at["compress"]),)


_xgather = Primitive("exchange_gather", _xg_fwd, _xg_vjp, owners_fn=lambda i, a: a["route"].out_owners)
_xscatter = Primitive("exchange_scatter", _xs_fwd, _xs_vjp, owners_fn=lambda i, a: a["route"].in_owners)


def exchange_gather(x: Tensor, route: Route, comm, kind="exchange", compress=False) -> Tensor:
    return _xgather(x, route=route, comm=comm, kind=kind, compress=compress)


def exchange_scatter(x: Tensor, route: Route, comm, kind="exchange", compress=False) -> Tensor:
    return _xscatter(x, route=route, comm=comm, kind=kind, compress=compress)


@dataclass
class SegmentSpec:
    """Local rows with global keys, each belonging to one of ``n_seg`` replicated segments."""

    keys: np.ndarray
    seg: np.ndarray
    n_seg: int


def _allsum_fwd(a, spec, comm):
    got = comm.all_gather((spec.keys, spec.seg, a), kind="segment_sum")
    keys = np.concatenate([k for k, _, _ in got])
    seg = np.concatenate([s for _, s, _ in got])
    rows = np.concatenate([r for _, _, r in got], axis=0)
    order = np.argsort(keys, kind="stable")
    out = np.zeros((spec.n_seg,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, seg[order], rows[order])
    return out


def _allsum_vjp(n, g, want):
    return (segment_broadcast(g, n.attrs["spec"], n.attrs["comm"]),)


def _bcast_fwd(a, spec, comm):
    return a[spec.seg]


def _bcast_vjp(n, g, want):
    return (segment_allsum(g, n.attrs["spec"], n.attrs["comm"]),)


_allsum = Primitive("segment_allsum", _allsum_fwd, _allsum_vjp, owners_fn=lambda i, a: None)
_bcast = Primitive("segment_broadcast", _bcast_fwd, _bcast_vjp, owners_fn=lambda i, a: None)


def segment_allsum(x: Tensor, spec: SegmentSpec, comm) -> Tensor:
    """Replicated per-segment sums of rows held across the group."""
    return _allsum(x, spec=spec, comm=comm)


def segment_broadcast(x: Tensor, spec: SegmentSpec, comm, owners=None) -> Tensor:
    """Local rows of replicated per-segment values (adjoint of the all-sum)."""
    return _bcast(x, spec=spec, comm=comm, owners=owners)


# ---------------------------------------------------------------------------
# per-mini-batch layout


@dataclass
class MoeRoutes:
    dispatch: Route
    combine: list                # one Route per top-K slot
    experts: list                # owned experts with rows, ascending
    bounds: list                 # (lo, hi) of each owned expert in the received rows


@dataclass
class RankLayout:
    inputs: BatchInputs
    halo: Route
    moe: dict                    # layer -> MoeRoutes
    atom_spec: SegmentSpec
    edge_spec: SegmentSpec


def halo_routes(part: GraphPartition, g: NeighborGraph, inputs: list[BatchInputs]) -> list[Route]:
    n = part.n_ranks
    src_rank, src_idx, key, out_own, in_own = [], [], [], [], []
    for r in range(n):
        src = inputs[r].src_gid
        src_rank.append(part.owner[src])
        src_idx.append(part.local_index[src])
        key.append(inputs[r].edge_gid)
        out_own.append(inputs[r].edge_owner)
        in_own.append(inputs[r].atom_gid)
    return build_routes(n, [len(i.atom_gid) for i in inputs], src_rank, src_idx, key,
                        out_owners=out_own, in_owners=in_own)


def member_tokens(inp: BatchInputs, edge_tokens: bool) -> tuple:
    """(global id, element, row owner) of one rank's tokens for a MoE layer."""
    if edge_tokens:
        return inp.edge_gid, inp.src_z, inp.edge_owner
    return inp.atom_gid, inp.z, inp.atom_gid


def moe_routes(tok: list, routing: Routing, owner_of, n_tok_global: int) -> list[MoeRoutes]:
    """Dispatch/combine routes for one MoE layer within one fully-sharded group.

    ``tok[f]`` holds (global id, element, row owner) arrays of shard ``f``'s
    tokens and ``owner_of(e)`` gives the shard index that owns expert ``e``.
    Dispatched rows are ordered by (expert, token id) on every owner.
    """
    n = len(tok)
    k = routing.topk.shape[1]
    topks, owns = [], []
    for gid, el, _ in tok:
        topk = routing.experts_for(el) if len(el) else np.zeros((0, k), np.int64)
        u, inv = np.unique(topk, return_inverse=True)
        topks.append(topk)
        owns.append(np.array([owner_of(int(e)) for e in u], dtype=np.int64)[inv.reshape(topk.shape)])
    # dispatch: owner d receives every (token, slot) pair whose expert it owns
    d_rank, d_idx, d_key, d_own, d_types = [], [], [], [], []
    for d in range(n):
        parts = []
        for f, (gid, el, own) in enumerate(tok):
            m = owns[f] == d
            rows = np.nonzero(m)[0]
            parts.append((np.full(len(rows), f), rows, topks[f][m] * n_tok_global + gid[rows],
                          own[rows], el[rows]))
        cat = [np.concatenate([p[j] for p in parts]).astype(np.int64) for j in range(5)]
        order = np.argsort(cat[2], kind="stable")
        for lst, arr in zip((d_rank, d_idx, d_key, d_own, d_types), cat):
            lst.append(arr[order])
    experts, bounds = [], []
    for d in range(n):
        ex = d_key[d] // max(n_tok_global, 1)
        owned = [int(x) for x in np.unique(ex)]
        experts.append(owned)
        bounds.append([tuple(int(v) for v in np.searchsorted(ex, [x, x + 1])) for x in owned])
    in_owners = [t[2] for t in tok]
    in_types = [t[1] for t in tok]
    dispatch = build_routes(n, [len(t[0]) for t in tok], d_rank, d_idx, d_key,
                            out_owners=d_own, in_owners=in_owners, out_types=d_types, in_types=in_types)
    # combine slot s: each token fetches row (expert, id) from its expert's owner
    combine = []
    for s in range(k):
        c_rank, c_idx, c_key = [], [], []
        for f, (gid, el, own) in enumerate(tok):
            o = owns[f][:, s]
            key = topks[f][:, s] * n_tok_global + gid
            pos = np.zeros(len(gid), dtype=np.int64)
            for d in np.unique(o):
                m = o == d
                pos[m] = np.searchsorted(d_key[d], key[m])
            c_rank.append(o)
            c_idx.append(pos)
            c_key.append(gid)
        combine.append(build_routes(n, [len(x) for x in d_key], c_rank, c_idx, c_key,
                                    out_owners=in_owners, in_owners=d_own,
                                    out_types=in_types, in_types=d_types))
    return [MoeRoutes(dispatch[d], [c[d] for c in combine], experts[d], bounds[d]) for d in range(n)]


@dataclass
class GraphShards:
    """Routing-independent pieces of one mini-batch split over a replica's ranks."""

    partition: GraphPartition
    inputs: list
    halo: list
    atom_specs: list
    edge_specs: list


def shard_batch(cfg, bg, n_ranks: int) -> GraphShards:
    part = partition_graph(bg.graph, n_ranks)
    inputs = [make_inputs(cfg, bg, part.atoms[q]) for q in range(n_ranks)]
    halo = halo_routes(part, bg.graph, inputs)
    atom_specs = [SegmentSpec(i.atom_gid, i.atom_cfg, i.n_configs) for i in inputs]
    edge_specs = [SegmentSpec(i.edge_gid, i.edge_cfg, i.n_configs) for i in inputs]
    return GraphShards(part, inputs, halo, atom_specs, edge_specs)


def rank_layouts(gs: GraphShards, fs: int, routing: dict, plan, moe_layers: list[str]) -> list[RankLayout]:
    """Full per-rank layouts; shard group g holds graph-group indices g*fs .. g*fs+fs-1."""
    n = len(gs.inputs)
    moe = [dict() for _ in range(n)]
    for layer in moe_layers:
        edge = layer.endswith("moe0")
        owner = plan_owner(plan, layer)
        for g0 in range(0, n, fs):
            members = list(range(g0, g0 + fs))
            tok = [member_tokens(gs.inputs[q], edge) for q in members]
            n_tok = gs.inputs[0].n_edges_global if edge else gs.inputs[0].n_atoms_global
            for q, mr in zip(members, moe_routes(tok, routing[layer], owner, n_tok)):
                moe[q][layer] = mr
    return [RankLayout(gs.inputs[q], gs.halo[q], moe[q], gs.atom_specs[q], gs.edge_specs[q])
            for q in range(n)]


def plan_owner(plan, layer):
    def owner(e):
        try:
            return plan.owner(layer, e)
        except KeyError:
            raise KeyError(f"token routed to unplanned expert {e} of {layer}") from None
    return owner


# ---------------------------------------------------------------------------
# distributed model context


class DistContext:
    """Model execution on one rank of a partitioned mini-batch."""

    def __init__(self, layout: RankLayout, params: dict, routing: dict, graph_comm, fs_comm,
                 compress: bool = False):
        self.inp = layout.inputs
        self.layout = layout
        self.params = params
        self.routing = routing
        self.graph_comm = graph_comm
        self.fs_comm = fs_comm
        self.compress = compress
        self.access_order: list[str] = []

    def param(self, name: str) -> Tensor:
        if name not in self.access_order:
            self.access_order.append(name)
        return self.params[name]

    def src_rows(self, x: Tensor) -> Tensor:
        return exchange_gather(x, self.layout.halo, self.graph_comm, kind="halo")

    def src_sum(self, rows: Tensor) -> Tensor:
        return exchange_scatter(rows, self.layout.halo, self.graph_comm, kind="halo")

    def src_max(self, rows: np.ndarray) -> np.ndarray:
        per_atom = route_scatter(rows, self.layout.halo, self.graph_comm, kind="halo", op="max")
        return route_gather(per_atom, self.layout.halo, self.graph_comm, kind="halo")

    def config_sum(self, rows: Tensor) -> Tensor:
        return segment_allsum(rows, self.layout.atom_spec, self.graph_comm)

    def config_rows(self, vals: Tensor, idx: np.ndarray, owners) -> Tensor:
        return segment_broadcast(vals, self.layout.edge_spec, self.graph_comm, owners=owners)

    def moe(self, layer, tokens, elems, gid, experts_fn):
        mr = self.layout.moe[layer]
        sent = exchange_gather(tokens, mr.dispatch, self.fs_comm, kind="a2a_tokens",
                               compress=self.compress)
        ys = [experts_fn(e, T.slice_(sent, lo, hi)) for e, (lo, hi) in zip(mr.experts, mr.bounds)]
        y = T.concat(ys, axis=0) if ys else T.slice_(sent, 0, 0)
        return [exchange_gather(y, r, self.fs_comm, kind="a2a_tokens", compress=self.compress)
                for r in mr.combine]
