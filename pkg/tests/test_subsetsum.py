import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ertickets.errors import BudgetError, DomainError, StructuralError
from ertickets.subsetsum import (
    SubsetSumInstance,
    binomial_ci,
    draw_values,
    min_errors,
    probe_lemma1,
    scaling_check,
    solve,
    solve_exact,
    solve_heuristic,
    subset_error,
)


def brute_force(values, avail, z):
    idx = [i for i in range(len(values)) if avail[i]]
    best = abs(z)
    for r in range(1, len(idx) + 1):
        for combo in itertools.combinations(idx, r):
            best = min(best, abs(z - sum(values[i] for i in combo)))
    return best


@settings(max_examples=80, deadline=None)
@given(
    values=st.lists(st.floats(-1, 1), min_size=1, max_size=11),
    z=st.floats(-1, 1),
    data=st.data(),
)
def test_exact_matches_brute_force(values, z, data):
    avail = data.draw(st.lists(st.booleans(), min_size=len(values), max_size=len(values)))
    inst = SubsetSumInstance(np.array(values), np.array(avail), z, 0.1)
    sol = solve_exact(inst)
    assert sol.achieved_error == pytest.approx(brute_force(values, avail, z), abs=1e-12)
    assert all(avail[i] for i in sol.chosen)
    assert sol.achieved_error == pytest.approx(subset_error(inst.values, sol.chosen, z), abs=1e-15)
    assert sol.feasible == (sol.achieved_error <= 0.1)


def test_empty_subset_allowed():
    inst = SubsetSumInstance.dense([0.9, 0.8], 0.0, 0.01)
    sol = solve_exact(inst)
    assert sol.chosen == () and sol.achieved_error == 0.0


def test_nothing_available():
    inst = SubsetSumInstance(np.array([0.5]), np.array([False]), 0.5, 0.1)
    assert solve(inst).achieved_error == 0.5
    assert solve_heuristic(inst).chosen == ()


def test_budget():
    inst = SubsetSumInstance.dense(np.full(31, 0.01), 0.2, 0.1)
    with pytest.raises(BudgetError):
        solve_exact(inst)
    # solve() falls back to the heuristic
    assert solve(inst).feasible


def test_heuristic_finds_good_subsets():
    rng = np.random.default_rng(0)
    for _ in range(20):
        inst = SubsetSumInstance.dense(rng.uniform(-1, 1, 60), rng.uniform(-1, 1), 1e-3)
        assert solve_heuristic(inst).feasible


def test_heuristic_never_beats_exact():
    rng = np.random.default_rng(1)
    for _ in range(20):
        inst = SubsetSumInstance.dense(rng.uniform(-1, 1, 26), rng.uniform(-1, 1), 0.01)
        assert solve_heuristic(inst, exact_part=20).achieved_error >= solve_exact(inst).achieved_error - 1e-15


def test_min_errors_vector():
    vals = np.array([0.5, -0.25, 0.125])
    errs = min_errors(vals, [0.375, 1.0, -0.3])
    assert errs == pytest.approx([0.0, 0.375, 0.05])


def test_instance_validation():
    with pytest.raises(DomainError):
        SubsetSumInstance.dense([0.1], 1.5, 0.1)
    with pytest.raises(DomainError):
        SubsetSumInstance.dense([0.1], 0.5, 0.0)
    with pytest.raises(StructuralError):
        SubsetSumInstance(np.array([0.1, 0.2]), np.array([True]), 0.0, 0.1)
    with pytest.raises(StructuralError):
        SubsetSumInstance.dense([], 0.0, 0.1)


def test_compacted():
    inst = SubsetSumInstance(np.array([0.1, 0.2, 0.3]), np.array([True, False, True]), 0.4, 0.1)
    c = inst.compacted()
    assert c.values.tolist() == [0.1, 0.3] and c.availability.all()


def test_value_laws():
    rng = np.random.default_rng(0)
    u = draw_values(rng, 20000, "uniform")
    prod = draw_values(rng, 20000, "product")
    assert u.min() >= -1 and u.max() <= 1
    # E|U(-1,1) * U(0,1)| = 1/4
    assert abs(np.abs(prod).mean() - 0.25) < 0.01
    with pytest.raises(DomainError):
        draw_values(rng, 3, "normal")


def test_binomial_ci():
    lo, hi = binomial_ci(0, 100)
    assert lo == 0.0
    # Clopper-Pearson upper bound at 0/100 is 1 - 0.025**(1/100)
    assert hi == pytest.approx(1 - 0.025 ** (1 / 100), rel=1e-9)
    lo, hi = binomial_ci(50, 100)
    assert lo < 0.5 < hi


class TestProbe:
    def test_deterministic_and_monotone(self):
        a = probe_lemma1(0.5, 0.05, 0.1, [4, 8, 16, 24], 200, seed=3)
        b = probe_lemma1(0.5, 0.05, 0.1, [24, 16, 8, 4], 200, seed=3)
        assert a.failures == b.failures
        s = a.smoothed_rate
        assert all(s[i] >= s[i + 1] for i in range(len(s) - 1))
        assert a.n_star is not None and a.n_star <= 24

    def test_dense_equals_unthinned(self):
        a = probe_lemma1(1.0, 0.05, 0.1, [4, 8, 12], 150, seed=0)
        b = probe_lemma1(0.4, 0.05, 0.1, [4, 8, 12], 150, seed=0, thinned=False)
        # identical random streams: availability is drawn in both but ignored in b
        assert a.failures == b.failures

    def test_thinning_hurts(self):
        dense = probe_lemma1(1.0, 0.05, 0.1, [10], 400, seed=1)
        thin = probe_lemma1(0.3, 0.05, 0.1, [10], 400, seed=1)
        assert thin.failure_rate[0] > dense.failure_rate[0]

    def test_no_n_star(self):
        r = probe_lemma1(0.1, 0.01, 0.01, [2, 3], 100, seed=0)
        assert r.n_star is None

    def test_csv_rows(self):
        r = probe_lemma1(0.5, 0.1, 0.1, [4, 8], 100, seed=0)
        rows = r.csv_rows()
        assert [row["n"] for row in rows] == [4, 8]
        assert set(rows[0]) == {"n", "trials", "failures", "failure_rate", "ci_halfwidth"}

    def test_budget_needs_fallback(self):
        with pytest.raises(BudgetError):
            probe_lemma1(1.0, 0.1, 0.1, [40], 100, seed=0)
        r = probe_lemma1(1.0, 0.1, 0.1, [40], 100, seed=0, heuristic_fallback=True)
        assert r.failures == [0]

    def test_adversarial(self):
        r = probe_lemma1(0.5, 0.05, 0.1, [8, 16, 24], 200, seed=0, adversarial_trials=50)
        assert r.adversarial["n"] == r.n_star
        assert 0 <= r.adversarial["mean_failure_rate"] <= r.adversarial["max_failure_rate"] <= 1

    def test_argument_checks(self):
        with pytest.raises(DomainError):
            probe_lemma1(0.0, 0.1, 0.1, [4], 100, seed=0)
        with pytest.raises(DomainError):
            probe_lemma1(0.5, 0.1, 0.1, [4], 10, seed=0)


def test_scaling_check():
    ok = scaling_check(20, 13, 0.5, 0.75)
    assert ok["predicted_ratio"] == pytest.approx(2.0)
    assert ok["ok"]
    assert not scaling_check(40, 13, 0.5, 0.75)["ok"]
