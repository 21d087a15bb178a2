"""Expert-to-rank planning and mini-batch balancing (LPT greedy scheduling)."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class PlanMismatchError(RuntimeError):
    pass


def lpt_assign(loads, n_bins: int) -> list[int]:
    """Longest-processing-time greedy: heaviest item first onto the lightest bin.

    Ties in item load go to the lower item index; ties in bin load to the
    lower bin index. Returns the bin of every item.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    loads = [int(v) for v in loads]
    items = [(-v, i) for i, v in enumerate(loads)]
    heapq.heapify(items)
    bins = [(0, b) for b in range(n_bins)]
    heapq.heapify(bins)
    out = [0] * len(loads)
    while items:
        neg, i = heapq.heappop(items)
        load, b = heapq.heappop(bins)
        out[i] = b
        heapq.heappush(bins, (load - neg, b))
    return out


def makespan(loads, assignment, n_bins: int) -> int:
    tot = [0] * n_bins
    for v, b in zip(loads, assignment):
        tot[b] += int(v)
    return max(tot) if tot else 0


def optimal_makespan(loads, n_bins: int) -> int:
    """Exact minimum makespan by exhaustive search over bin load profiles."""
    items = tuple(sorted((int(v) for v in loads), reverse=True))

    @lru_cache(maxsize=None)
    def best(k: int, profile: tuple) -> int:
        if k == len(items):
            return max(profile)
        out = None
        seen = set()
        for b in range(n_bins):
            if profile[b] in seen:
                continue
            seen.add(profile[b])
            nxt = list(profile)
            nxt[b] += items[k]
            cand = best(k + 1, tuple(sorted(nxt)))
            out = cand if out is None else min(out, cand)
        return out

    return best(0, tuple([0] * n_bins))


def lpt_bound(n_bins: int) -> float:
    return 4.0 / 3.0 - 1.0 / (3.0 * n_bins)


# ---------------------------------------------------------------------------
# expert planning


@dataclass
class LayerPlan:
    active: list[int]
    owner: dict[int, int]
    tokens: dict[int, int]
    splits: np.ndarray  # (n_ranks, n_experts)

    def experts_of(self, rank: int) -> list[int]:
        return [e for e in self.active if self.owner[e] == rank]


@dataclass
class ExpertPlan:
    n_ranks: int
    n_experts: int
    layers: dict[str, LayerPlan] = field(default_factory=dict)
    prefetch: list[tuple[str, int]] = field(default_factory=list)

    def owner(self, layer: str, e: int) -> int:
        lp = self.layers[layer]
        if e not in lp.owner:
            raise KeyError(f"expert {e} of {layer} is not in the plan")
        return lp.owner[e]

    def serialize(self) -> str:
        lines = [f"# ranks {self.n_ranks} experts {self.n_experts}",
                 "layer expert owner tokens"]
        for layer, lp in self.layers.items():
            for e in lp.active:
                lines.append(f"{layer} {e} {lp.owner[e]} {lp.tokens[e]}")
        for layer, lp in self.layers.items():
            for r in range(self.n_ranks):
                row = " ".join(str(int(v)) for v in lp.splits[r])
                lines.append(f"split {layer} {r} {row}")
        lines.append("prefetch " + " ".join(f"{l}:{e}" for l, e in self.prefetch))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "ExpertPlan":
        """Inverse of :meth:`serialize`."""
        lines = text.splitlines()
        head = lines[0].split()
        plan = cls(int(head[2]), int(head[4]))
        rows: dict = {}
        for line in lines[2:]:
            parts = line.split()
            if parts[0] == "split":
                layer, r = parts[1], int(parts[2])
                rows.setdefault(layer, {})[r] = [int(v) for v in parts[3:]]
            elif parts[0] == "prefetch":
                plan.prefetch = [(t.rsplit(":", 1)[0], int(t.rsplit(":", 1)[1])) for t in parts[1:]]
            else:
                layer, e, o, tok = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
                lp = plan.layers.setdefault(layer, LayerPlan([], {}, {}, np.zeros((0, 0), np.int64)))
                lp.active.append(e)
                lp.owner[e] = o
                lp.tokens[e] = tok
        for layer, by_rank in rows.items():
            sp = np.array([by_rank[r] for r in range(plan.n_ranks)], dtype=np.int64)
            lp = plan.layers.setdefault(layer, LayerPlan([], {}, {}, sp))
            lp.splits = sp
        return plan

    def __eq__(self, other):
        return isinstance(other, ExpertPlan) and self.serialize() == other.serialize()


def plan_generation(splits: dict[str, np.ndarray], n_ranks: int) -> ExpertPlan:
    """Assign every expert with tokens to an owner rank by LPT on token counts.

    ``splits[layer]`` is a (source ranks x experts) token-count matrix; a
    layer's global load per expert is its column sum. Layers keep their given
    order, which also fixes the parameter prefetch order.
    """
    if n_ranks < 1:
        raise ValueError("n_ranks must be >= 1")
    n_exp = None
    plan = None
    for layer, sp in splits.items():
        sp = np.asarray(sp, dtype=np.int64)
        if sp.ndim != 2 or np.any(sp < 0) or sp.shape[0] != n_ranks:
            raise ValueError("splits must be a non-negative (ranks x experts) matrix")
        if plan is None:
            n_exp = sp.shape[1]
            plan = ExpertPlan(n_ranks, n_exp)
        totals = sp.sum(axis=0)
        active = [int(e) for e in np.nonzero(totals > 0)[0]]
        bins = lpt_assign([totals[e] for e in active], n_ranks)
        owner = {e: int(b) for e, b in zip(active, bins)}
        plan.layers[layer] = LayerPlan(active, owner, {e: int(totals[e]) for e in active}, sp.copy())
        plan.prefetch.extend((layer, e) for e in active)
    if plan is None:
        plan = ExpertPlan(n_ranks, 0)
    return plan


def merge_local_plans(plans: list[ExpertPlan]) -> ExpertPlan:
    if not plans:
        raise ValueError("no plans to merge")
    ref = plans[0].serialize()
    for r, p in enumerate(plans[1:], start=1):
        if p.serialize() != ref:
            raise PlanMismatchError(f"plan on rank {r} differs from rank 0")
    return plans[0]


# ---------------------------------------------------------------------------
# batching


@dataclass
class MiniBatchAssignment:
    batch_of: list[int]
    n_batches: int
    loads: list[int]

    def members(self, b: int) -> list[int]:
        return [i for i, k in enumerate(self.batch_of) if k == b]

    @property
    def makespan(self) -> int:
        return max(self.loads) if self.loads else 0


def greedy_batch(atom_counts, n_batches: int) -> MiniBatchAssignment:
    """Spread samples over ``n_batches`` mini-batches by LPT on atom counts."""
    counts = [int(c) for c in atom_counts]
    assign = lpt_assign(counts, n_batches)
    loads = [0] * n_batches
    for c, b in zip(counts, assign):
        loads[b] += c
    return MiniBatchAssignment(assign, n_batches, loads)


def brute_force_assignments(n_items: int, n_bins: int):
    return itertools.product(range(n_bins), repeat=n_items)
