import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ertickets.errors import DomainError, StructuralError
from ertickets.experiments import run_trials
from ertickets.netcore import MaskedNetwork, conv_arch, fc_arch, forward, random_target, sample_domain
from ertickets.plans import make_plan, plan_uniform
from ertickets.tickets import (
    BlockMap,
    TrialReport,
    WidthPlan,
    aggregate,
    build_slt,
    build_wlt,
    compute_eps_schedule,
    compute_q,
    construct_slt,
    construct_wlt_conv,
    construct_wlt_fc,
    exact_path_probability,
    lower_bound_threshold,
    path_probability,
    prescale,
    probe_lower_bound,
    representable_rate,
    source_arch_for,
    theorem_success_probability,
)


def zero_bias(net):
    return net.with_params(biases=[np.zeros_like(b) for b in net.biases])


def dense_plan(arch):
    return make_plan(arch, "uniform", 1.0)


class TestComputeQ:
    def test_one_hidden_layer_case(self):
        # L = 2 coincides with the constant 2 of the one-hidden-layer bound
        target = random_target(fc_arch([3, 5, 2]), 0)
        wp = compute_q(target, plan_uniform(target.arch, 0.5), 0.1)
        assert math.log(200) / math.log(2) == pytest.approx(7.64, abs=0.01)
        assert wp.q[1] == 8
        assert wp.q[2] == 1
        # inputs feed q_0 univariate copies of each coordinate
        assert wp.source_arch.widths() == [3, 3 * wp.q[0], 5 * 8, 2]

    def test_dense_layers(self):
        target = random_target(fc_arch([3, 4, 2]), 0)
        assert compute_q(target, dense_plan(target.arch), 0.1).q == (1, 1, 1)

    def test_counts_nonzero_weights(self):
        arch = fc_arch([2, 2, 1])
        w1 = np.zeros((2, 2))
        w1[0, 0] = 1.0
        target = MaskedNetwork(arch, (w1, np.ones((1, 2))), (np.zeros(2), np.zeros(1)))
        q = compute_q(target, plan_uniform(arch, 0.5), 0.1).q
        # q_0 uses m_1 = 1, q_1 uses m_2 = 2
        assert q[1] == math.ceil(math.log(2 * 2 / 0.1) / math.log(2))
        assert q[0] == math.ceil(math.log(2 * 1 * q[1] / 0.1) / math.log(2))

    @settings(max_examples=50, deadline=None)
    @given(
        widths=st.lists(st.integers(1, 8), min_size=3, max_size=6),
        p=st.floats(0.05, 0.95),
        delta=st.floats(0.01, 0.5),
    )
    def test_recursion_is_minimal(self, widths, p, delta):
        target = random_target(fc_arch(widths), 1)
        wp = compute_q(target, plan_uniform(target.arch, p), delta)
        L = len(widths) - 1
        m = target.arch.weight_counts()
        for l in range(L):
            q = wp.q[l]
            need = L * m[l] * wp.q[l + 1] / delta
            # smallest integer with (1-p)^q <= delta / (L m q_next), up to rounding slack
            assert (1 - p) ** q * need <= 1 + 1e-6
            assert q == 1 or (1 - p) ** (q - 1) * need > 1 - 1e-6

    def test_errors(self):
        target = random_target(fc_arch([2, 2, 1]), 0)
        with pytest.raises(DomainError):
            compute_q(target, plan_uniform(target.arch, 0.5), 0.0)
        with pytest.raises(StructuralError):
            compute_q(target, plan_uniform(fc_arch([2, 1]), 0.5), 0.1)
        with pytest.raises(DomainError):
            WidthPlan((0, 1), 0.1, target.arch, (0.5,))
        with pytest.raises(DomainError):
            WidthPlan((2, 2), 0.1, target.arch, (0.5,))

    def test_success_probability_bound(self):
        target = random_target(fc_arch([2, 4, 1]), 0)
        plan = plan_uniform(target.arch, 0.5)
        wp = compute_q(target, plan, 0.1)
        prob = theorem_success_probability(wp.q, plan.p_per_layer, target.arch.weight_counts())
        assert prob >= 0.9

    def test_conv_source_arch(self):
        arch = conv_arch([2, 3, 1], 3, (4, 4))
        src = source_arch_for(arch, (2, 3, 1))
        assert src.layers[0].kernel_h == 1 and src.layers[0].out_channels == 4
        assert src.layers[1].in_channels == 4 and src.layers[1].out_channels == 9
        assert src.layers[2].kernel_h == 3


class TestWLT:
    @pytest.mark.parametrize("widths", [[3, 4, 2], [2, 5, 5, 1]])
    def test_dense_source_exact(self, widths):
        arch = fc_arch(widths)
        for seed in range(5):
            ticket, report = construct_wlt_fc(random_target(arch, seed), dense_plan(arch), 0.1, seed)
            assert report.success and report.max_error <= 1e-12

    def test_dense_conv_exact(self):
        arch = conv_arch([2, 2, 1], 3, (4, 4))
        ticket, report = construct_wlt_conv(random_target(arch, 0), dense_plan(arch), 0.1, 0)
        assert report.success and report.max_error <= 1e-12

    def test_single_weight_target(self):
        arch = fc_arch([2, 2, 1])
        w1 = np.zeros((2, 2))
        w1[0, 1] = 0.7
        w2 = np.zeros((1, 2))
        w2[0, 0] = -0.4
        target = MaskedNetwork(arch, (w1, w2), (np.zeros(2), np.zeros(1)))
        c = build_wlt(target, plan_uniform(arch, 0.5), 0.1, 0)
        assert c.report.success
        assert c.ticket.mask.nnz == [1, 1, 1]
        x = sample_domain(arch, 200, np.random.default_rng(0))
        assert np.abs(forward(c.ticket, x) - forward(target, x)).max() <= 1e-12

    def test_success_is_exact_and_contained(self):
        arch = fc_arch([3, 4, 2])
        plan = plan_uniform(arch, 0.5)
        for seed in range(30):
            c = build_wlt(random_target(arch, seed), plan, 0.1, seed)
            if c.report.success:
                assert c.report.contained
                assert c.ticket.mask.is_subset_of(c.source_mask)
                assert c.report.max_error <= 1e-9
            else:
                assert c.ticket is None and c.report.failure is not None

    def test_deterministic(self):
        arch = fc_arch([3, 4, 2])
        target = random_target(arch, 0)
        a = build_wlt(target, plan_uniform(arch, 0.5), 0.1, 11)
        b = build_wlt(target, plan_uniform(arch, 0.5), 0.1, 11)
        assert a.report.to_dict() == b.report.to_dict()
        assert all((x == y).all() for x, y in zip(a.source_mask.layers, b.source_mask.layers))

    def test_bias_compensation_mutation(self):
        arch = fc_arch([3, 4, 2], (-1.0, 1.0))
        target = random_target(arch, 2)
        plan = dense_plan(arch)
        good = build_wlt(target, plan, 0.1, 0)
        bad = build_wlt(target, plan, 0.1, 0, bias_compensation=False)
        assert good.report.success and good.report.max_error <= 1e-12
        assert not bad.report.success and bad.report.max_error > 1e-6

    def test_no_shift_for_nonnegative_domain(self):
        arch = fc_arch([3, 4, 2], (0.0, 1.0))
        target = random_target(arch, 2)
        a = build_wlt(target, dense_plan(arch), 0.1, 0)
        b = build_wlt(target, dense_plan(arch), 0.1, 0, bias_compensation=False)
        assert a.report.max_error == b.report.max_error

    def test_strict_mode_fails_more(self):
        arch = fc_arch([3, 4, 2])
        plan = plan_uniform(arch, 0.5)
        relaxed = strict = 0
        for seed in range(40):
            t = random_target(arch, seed)
            relaxed += not build_wlt(t, plan, 0.3, seed).report.success
            strict += not build_wlt(t, plan, 0.3, seed, require_all_copies=True).report.success
        assert strict >= relaxed

    def test_block_map(self):
        arch = fc_arch([2, 3, 1])
        c = build_wlt(random_target(arch, 0), plan_uniform(arch, 0.5), 0.1, 0)
        c.blocks.check(c.report.source_widths[1:])
        with pytest.raises(StructuralError):
            BlockMap((((0, 1), (1,)),)).check([2])

    def test_wrong_kind(self):
        with pytest.raises(StructuralError):
            construct_wlt_conv(random_target(fc_arch([2, 1]), 0), plan_uniform(fc_arch([2, 1]), 0.5), 0.1, 0)
        carch = conv_arch([1, 1], 1, (2, 2))
        with pytest.raises(StructuralError):
            construct_wlt_fc(random_target(carch, 0), plan_uniform(carch, 0.5), 0.1, 0)


class TestEpsSchedule:
    def test_two_layer_example(self):
        arch = fc_arch([1, 1, 1], (0.0, 1.0))
        target = MaskedNetwork(arch, (np.array([[1.0]]), np.array([[0.5]])), (np.zeros(1), np.zeros(1)))
        sched = compute_eps_schedule(target, 0.1)
        assert sched.B[1] == 1.0
        assert sched.eps_per_layer[1] == pytest.approx(0.05 / (2 * 1.05), rel=1e-12)
        assert sched.eps_per_layer[1] == pytest.approx(0.02381, abs=1e-5)

    def test_zero_target(self):
        arch = fc_arch([2, 3, 1])
        zero = MaskedNetwork(arch, (np.zeros((3, 2)), np.zeros((1, 3))), (np.zeros(3), np.zeros(1)))
        sched = compute_eps_schedule(zero, 0.1)
        # corners of [-1, 1]^2 give B_0 = 2
        assert sched.B == (2.0, 0.0)
        assert sched.eps_per_layer[0] == pytest.approx(0.05 / (3 * 1.05))
        assert sched.eps_per_layer[1] == pytest.approx(0.05 / 1.05)

    def test_norm_monotonicity(self):
        arch = fc_arch([2, 3, 3, 1])
        base = zero_bias(random_target(arch, 0, 0.2))
        big = base.with_params(weights=[base.weights[0], base.weights[1] * 4, base.weights[2]])
        a = compute_eps_schedule(base, 0.1).eps_per_layer
        b = compute_eps_schedule(big, 0.1).eps_per_layer
        assert b[0] < a[0]
        assert b[2] == pytest.approx(a[2], rel=0.5) or b[2] < a[2]

    def test_arguments(self):
        t = random_target(fc_arch([1, 1]), 0)
        with pytest.raises(DomainError):
            compute_eps_schedule(t, 1.5)
        with pytest.raises(DomainError):
            compute_eps_schedule(t, 0.1, domain_samples=10)


class TestSLT:
    def test_tiny_dense(self):
        arch = fc_arch([1, 1, 1], (0.0, 1.0))
        target = MaskedNetwork(arch, (np.array([[0.3]]), np.array([[1.0]])), (np.zeros(1), np.zeros(1)))
        ticket, report = construct_slt(target, dense_plan(arch), 0.1, 0.5, 0)
        assert report.success and report.contained
        x = np.linspace(0, 1, 101)[:, None]
        assert np.abs(forward(ticket, x) - forward(target, x)).max() <= 0.5

    def test_zero_target(self):
        arch = fc_arch([2, 3, 1])
        zero = MaskedNetwork(arch, (np.zeros((3, 2)), np.zeros((1, 3))), (np.zeros(3), np.zeros(1)))
        ticket, report = construct_slt(zero, plan_uniform(arch, 0.5), 0.1, 0.2, 0)
        assert report.success and report.max_error == 0.0
        assert ticket.mask.total_nnz == 0

    def test_bias_needs_flag(self):
        arch = fc_arch([1, 2, 1])
        with pytest.raises(DomainError):
            construct_slt(random_target(arch, 0), plan_uniform(arch, 0.5), 0.1, 0.2, 0)

    def test_conv_rejected(self):
        arch = conv_arch([1, 1], 1, (2, 2))
        with pytest.raises(StructuralError):
            construct_slt(random_target(arch, 0), plan_uniform(arch, 0.5), 0.1, 0.2, 0)

    def test_prescale(self):
        arch = fc_arch([2, 2, 1])
        net = random_target(arch, 0, weight_scale=3.0)
        scaled, factor = prescale(net)
        assert max(np.abs(w).max() for w in scaled.weights) <= 1.0
        assert max(np.abs(b).max() for b in scaled.biases) <= 1.0
        x = sample_domain(arch, 50, np.random.default_rng(0))
        np.testing.assert_allclose(forward(scaled, x) * factor, forward(net, x), atol=1e-12)


class TestLowerBound:
    def test_closed_form(self):
        assert path_probability(0.5, 1, 4) == 0.68359375
        assert exact_path_probability(0.5, 1, 4) == pytest.approx(0.68359375, abs=1e-15)

    def test_monte_carlo_d1(self):
        rate = representable_rate(0.5, 1, 4, 10_000, np.random.default_rng(0))
        assert abs(rate - 0.68359375) < 0.02

    def test_exact_matches_monte_carlo(self):
        rate = representable_rate(0.5, 4, 6, 20_000, np.random.default_rng(1))
        assert abs(rate - exact_path_probability(0.5, 4, 6)) < 0.015

    def test_dense_limit(self):
        assert path_probability(1 - 1e-12, 3, 1) == pytest.approx(1.0)

    def test_threshold(self):
        t = lower_bound_threshold(0.5, 4, 0.05)
        assert t == pytest.approx(math.log(1 / (1 - 0.95 ** 0.25)) / math.log(2))
        assert t == pytest.approx(6.29, abs=0.01)

    def test_probe(self):
        r = probe_lower_bound(0.5, 1, 0.05, [4, 8], 2000, 0)
        assert r.analytic[0] == 0.68359375
        assert r.csv_rows()[0]["n"] == 4
        assert r.n_min_analytic >= r.threshold
        with pytest.raises(DomainError):
            probe_lower_bound(1.0, 1, 0.05, [4], 100, 0)


def test_trial_report_roundtrip():
    r = TrialReport("wlt-fc", True, (3, 1), 0.0, 5, 7, wall_time=1.5, contained=True, source_widths=(2, 3, 1))
    d = r.to_dict()
    assert "wall_time" not in d
    assert TrialReport.from_dict(r.to_dict(include_timing=True)) == r


def test_run_trials_and_aggregate():
    arch = fc_arch([2, 3, 1])
    plan = plan_uniform(arch, 0.5)
    serial = run_trials("wlt", lambda i: random_target(arch, i), plan, 0.1, 12, 5)
    parallel = run_trials("wlt", lambda i: random_target(arch, i), plan, 0.1, 12, 5, jobs=2)
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in parallel]
    agg = aggregate(serial, 0.1)
    assert agg["trials"] == 12
    assert agg["failures"] == sum(not r.success for r in serial)
    lo, hi = agg["failure_rate_ci"]
    assert lo <= agg["failure_rate"] <= hi
    assert agg["all_contained"]
