import pytest

from fs3d.verify import SUITES, planner_instances, run_suite


@pytest.mark.parametrize("name", [s for s in SUITES if s != "sharding"])
def test_quick_suites_pass(name):
    res = run_suite(name)
    assert res.passed, [c for c in res.checks if not c.passed]
    assert res.checks and res.to_dict()["suite"] == name


def test_sharding_modes():
    det = run_suite("sharding")
    assert det.passed and det.mode == "bitwise"
    tol = run_suite("sharding", deterministic=False)
    assert tol.mode == "tolerance" and tol.passed
    assert all(c.name.startswith("rel_diff_") and c.limit == 1e-5 for c in tol.checks)


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("nope")


def test_planner_instances_are_multisets():
    inst = list(planner_instances(max_items=3, max_bins=1, loads=range(1, 3)))
    assert [i for i, _ in inst] == [[1], [2], [1, 1], [1, 2], [2, 2], [1, 1, 1], [1, 1, 2], [1, 2, 2], [2, 2, 2]]
