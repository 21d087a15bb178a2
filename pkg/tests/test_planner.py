import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fs3d.planner import (ExpertPlan, PlanMismatchError, greedy_batch, lpt_assign, makespan,
                          merge_local_plans, optimal_makespan, plan_generation)


def brute_optimal(loads, m):
    """Oracle: minimum makespan over every item-to-bin assignment."""
    best = None
    for asg in itertools.product(range(m), repeat=len(loads)):
        tot = [0] * m
        for v, b in zip(loads, asg):
            tot[b] += v
        best = max(tot) if best is None else min(best, max(tot))
    return best


def test_lpt_witness():
    loads = [4, 3, 3, 2, 2]
    asg = lpt_assign(loads, 2)
    assert sorted(v for v, b in zip(loads, asg) if b == 0) == [2, 2, 4]
    assert makespan(loads, asg, 2) == 8
    assert brute_optimal(loads, 2) == optimal_makespan(loads, 2) == 7


def test_greedy_batch_witness():
    a = greedy_batch([8, 7, 6, 5, 4], 2)
    assert a.members(0) == [0, 3, 4] and a.members(1) == [1, 2]
    assert a.loads == [17, 13] and a.makespan == 17
    assert brute_optimal([8, 7, 6, 5, 4], 2) == 15


def test_equal_loads_balanced():
    plan = plan_generation({"L": np.array([[5] * 6, [0] * 6, [0] * 6])}, 3)
    assert [len(plan.layers["L"].experts_of(r)) for r in range(3)] == [2, 2, 2]
    a = greedy_batch([7] * 7, 3)
    assert max(a.loads) - min(a.loads) <= 7


def test_single_rank():
    loads = np.array([[3, 0, 5, 2]])
    plan = plan_generation({"L": loads}, 1)
    lp = plan.layers["L"]
    assert set(lp.owner.values()) == {0}
    assert sum(lp.tokens.values()) == 10
    assert greedy_batch([3, 1, 2], 1).members(0) == [0, 1, 2]


def test_inactive_experts_excluded():
    sp = np.array([[3, 0, 1, 0], [2, 0, 0, 0]])
    lp = plan_generation({"L": sp}, 2).layers["L"]
    assert lp.active == [0, 2]
    assert set(lp.owner) == {0, 2}
    assert lp.tokens == {0: 5, 2: 1}
    assert np.array_equal(lp.splits.sum(axis=0)[lp.active], [lp.tokens[e] for e in lp.active])


def test_zero_ranks_error():
    with pytest.raises(ValueError):
        plan_generation({"L": np.ones((1, 2), int)}, 0)
    with pytest.raises(ValueError):
        plan_generation({"L": np.ones((1, 2), int)}, 2)


def test_serialize_roundtrip_and_determinism():
    rng = np.random.default_rng(0)
    sp = {f"b{t}.moe{k}": rng.integers(0, 9, (2, 4)) for t in range(2) for k in (0, 1)}
    a, b = plan_generation(sp, 2), plan_generation({k: v.copy() for k, v in sp.items()}, 2)
    assert a.serialize() == b.serialize()
    assert ExpertPlan.parse(a.serialize()).serialize() == a.serialize()
    assert [l for l, _ in a.prefetch][:1] == ["b0.moe0"]


def test_merge_identical_and_mismatch():
    sp = {"L": np.array([[4, 3, 3, 2, 2], [0, 0, 0, 0, 0]])}
    plans = [plan_generation(sp, 2) for _ in range(4)]
    assert merge_local_plans(plans) is plans[0]
    bad = plan_generation({"L": np.array([[4, 3, 3, 2, 3], [0, 0, 0, 0, 0]])}, 2)
    with pytest.raises(PlanMismatchError):
        merge_local_plans(plans[:3] + [bad])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=7), st.integers(1, 3))
def test_lpt_bound_against_brute_force(loads, m):
    opt = brute_optimal(loads, m)
    assert optimal_makespan(loads, m) == opt
    bound = Fraction(4 * m - 1, 3 * m)
    assert Fraction(makespan(loads, lpt_assign(loads, m), m), opt) <= bound
    assert Fraction(greedy_batch(loads, m).makespan, opt) <= bound


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=12), st.integers(1, 4))
def test_assignment_complete(loads, m):
    a = greedy_batch(loads, m)
    assert len(a.batch_of) == len(loads) and all(0 <= b < m for b in a.batch_of)
    assert sum(a.loads) == sum(loads)
    assert sorted(i for b in range(m) for i in a.members(b)) == list(range(len(loads)))


def test_tie_breaks():
    # equal item loads go in index order onto bins in index order
    assert lpt_assign([2, 2, 2], 3) == [0, 1, 2]
    assert lpt_assign([1, 3, 3], 2) == [0, 0, 1]
