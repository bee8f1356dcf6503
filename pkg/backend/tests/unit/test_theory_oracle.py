"""
Unit tests for the synthetic excess-loss bound checks
"""

import dataclasses
import os
import shutil
import sys
import tempfile

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../../src'))

from errors import InvariantViolation
from models.quad_scenario import THEORY_COLUMNS, BoundCheck, QuadScenario, Which
from models.rng import Rng
from services.theory_oracle_service import (
    bound_rhs, check_bound, check_suite_args, check_trace_cs, expected_excess_exact, optimal_lambda,
    random_scenario, run_theory_suite, sample_joint
)


def small_scenario(**overrides):
    params = dict(
        w_star=[0.0, 0.0], h=[1.0, 0.5], smoothness=1.0, delta=1.0, w_pre=[0.0, 0.0],
        mu_f=[0.1, 0.0], mu_l=[0.0, 0.1], var_f=[0.01, 0.01], var_l=[0.02, 0.02],
        var_cross=[0.005, 0.005],
    )
    params.update(overrides)
    return QuadScenario(**params)


class TestQuadScenario:
    """Unit tests for scenario construction"""

    def test_merge_endpoints_match_posteriors(self):
        sc = small_scenario()
        np.testing.assert_array_equal(sc.variance(Which.MERGE, 1.0), sc.var_f)
        np.testing.assert_array_equal(sc.variance(Which.MERGE, 0.0), sc.var_l)
        assert sc.trace(Which.FEDIT) == pytest.approx(0.02)
        assert sc.trace(Which.MERGE, 0.5) == pytest.approx(0.25 * 0.02 + 0.25 * 0.04 + 0.5 * 0.01)

    def test_loss_is_zero_at_optimum(self):
        sc = small_scenario(c3=0.3)
        assert sc.loss(sc.w_star) == 0.0
        assert sc.loss(np.array([1.0, 0.0])) == pytest.approx(0.5 + 0.3)
        assert sc.hessian_lipschitz == pytest.approx(1.8)

    def test_rejects_curvature_above_smoothness(self):
        with pytest.raises(InvariantViolation):
            small_scenario(h=[1.5, 0.5])

    def test_rejects_cross_above_min(self):
        with pytest.raises(InvariantViolation):
            small_scenario(var_cross=[0.02, 0.0])

    def test_rejects_means_outside_basin(self):
        with pytest.raises(InvariantViolation):
            small_scenario(mu_f=[2.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            small_scenario(h=[1.0])


class TestBoundChecks:
    """Unit tests for Monte Carlo bound checks"""

    def test_rhs_formula(self):
        sc = small_scenario()
        assert bound_rhs(sc, Which.FEDIT) == pytest.approx(0.5 * (1.0 + 0.02))
        cubic = small_scenario(c3=0.5)
        assert bound_rhs(cubic, Which.LOCAL) == pytest.approx((0.5 + 3.0 / 6.0) * (1.0 + 0.04))

    def test_sample_joint_covariance(self):
        sc = small_scenario()
        theta_f, theta_l = sample_joint(sc, 200_000, Rng(0))
        np.testing.assert_allclose(theta_f.mean(axis=0), sc.mu_f, atol=2e-3)
        np.testing.assert_allclose(theta_f.var(axis=0), sc.var_f, rtol=0.02)
        np.testing.assert_allclose(theta_l.var(axis=0), sc.var_l, rtol=0.02)
        cov = ((theta_f - theta_f.mean(axis=0)) * (theta_l - theta_l.mean(axis=0))).mean(axis=0)
        np.testing.assert_allclose(cov, sc.var_cross, rtol=0.05)

    @pytest.mark.parametrize("which,lam", [(Which.FEDIT, None), (Which.LOCAL, None), (Which.MERGE, 0.3)])
    def test_monte_carlo_matches_closed_form(self, which, lam):
        sc = small_scenario()
        check = check_bound(sc, which, Rng(1), lam, n=50_000)
        exact = expected_excess_exact(sc, which, lam)
        assert abs(check.lhs - exact) <= 4 * check.lhs_stderr
        assert check.holds
        assert check.escapes == 0

    def test_endpoint_lambdas_are_fixed(self):
        sc = small_scenario()
        assert check_bound(sc, Which.FEDIT, Rng(2), n=10_000).lam == 1.0
        assert check_bound(sc, Which.LOCAL, Rng(2), n=10_000).lam == 0.0
        with pytest.raises(ValueError):
            check_bound(sc, Which.MERGE, Rng(2), None, n=10_000)

    def test_minimum_sample_count(self):
        with pytest.raises(ValueError):
            check_bound(small_scenario(), Which.FEDIT, Rng(0), n=9_999)

    def test_closed_form_needs_pure_quadratic(self):
        with pytest.raises(ValueError):
            expected_excess_exact(small_scenario(c3=0.1), Which.FEDIT)

    def test_threaded_batches_match_serial(self):
        sc = small_scenario()
        serial = check_bound(sc, Which.MERGE, Rng(3), 0.5, n=30_000)
        threaded = check_bound(sc, Which.MERGE, Rng(3), 0.5, n=30_000, workers=3)
        assert serial == threaded

    def test_holds_uses_three_standard_errors(self):
        assert BoundCheck(0, Which.FEDIT, 1.0, lhs=1.2, lhs_stderr=0.1, rhs=1.0, n=10_000).holds
        assert not BoundCheck(0, Which.FEDIT, 1.0, lhs=1.31, lhs_stderr=0.1, rhs=1.0, n=10_000).holds

    @pytest.mark.parametrize("cubic", [False, True])
    def test_random_scenarios_satisfy_bound(self, cubic):
        sc = random_scenario(Rng(4), d=6, cubic=cubic)
        for which, lam in [(Which.FEDIT, None), (Which.LOCAL, None), (Which.MERGE, optimal_lambda(sc))]:
            assert check_bound(sc, which, Rng(5), lam, n=10_000).holds

    def test_optimal_lambda_tightens_bound(self):
        for i in range(20):
            sc = random_scenario(Rng(6).child(str(i)))
            lam = optimal_lambda(sc)
            assert bound_rhs(sc, Which.MERGE, lam) <= min(bound_rhs(sc, Which.FEDIT), bound_rhs(sc, Which.LOCAL)) * (1 + 1e-12)

    def test_trace_cauchy_schwarz(self):
        assert check_trace_cs(500, Rng(7)) == 500


class TestTheorySuite:
    """Unit tests for the suite runner"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_small_suite(self):
        path = os.path.join(self.temp_dir, 'theory.csv')
        result = run_theory_suite(2, Rng(0), n_samples=10_000, d=4, cs_trials=50, out_path=path)
        assert len(result.checks) == 2 * (2 + 5 + 1)
        assert result.all_hold
        assert result.cs_passes == 50
        frame = pd.read_csv(path)
        assert list(frame.columns) == THEORY_COLUMNS
        assert frame['holds'].all()

    def test_suite_is_deterministic(self):
        first = run_theory_suite(1, Rng(9), n_samples=10_000, d=3, cs_trials=10)
        second = run_theory_suite(1, Rng(9), n_samples=10_000, d=3, cs_trials=10)
        assert first.to_frame().equals(second.to_frame())

    def test_rejects_empty_suite(self):
        with pytest.raises(ValueError):
            run_theory_suite(0, Rng(0))

    @pytest.mark.parametrize("overrides", [
        {'n_trials': 0}, {'n_samples': 9_999}, {'d': 0}, {'cs_trials': -1}, {'workers': 0},
    ], ids=["trials", "samples", "dim", "cs_trials", "workers"])
    def test_rejects_unusable_arguments(self, overrides):
        args = dict(n_trials=1, n_samples=10_000, d=3, cs_trials=0, workers=1)
        check_suite_args(**args)
        args.update(overrides)
        with pytest.raises(ValueError):
            check_suite_args(**args)


class TestBoundShape:
    """The bound against its closed form in limiting cases"""

    def test_rhs_never_decreases_with_variance(self):
        bump = np.array([0.05, 0.0, 0.02, 0.0, 0.1])
        for i in range(10):
            sc = random_scenario(Rng(20).child(str(i)), d=5)
            wider_f = dataclasses.replace(sc, var_f=sc.var_f + bump)
            wider_l = dataclasses.replace(sc, var_l=sc.var_l + bump)
            for which, lam in [(Which.FEDIT, None), (Which.LOCAL, None), (Which.MERGE, 0.3)]:
                base = bound_rhs(sc, which, lam)
                assert bound_rhs(wider_f, which, lam) >= base
                assert bound_rhs(wider_l, which, lam) >= base
            assert bound_rhs(wider_f, Which.FEDIT) > bound_rhs(sc, Which.FEDIT)
            assert bound_rhs(wider_l, Which.LOCAL) > bound_rhs(sc, Which.LOCAL)

    def test_isotropic_curvature_closed_form(self):
        sc = small_scenario(h=[1.0, 1.0])
        exact = expected_excess_exact(sc, Which.FEDIT)
        assert exact == pytest.approx(0.5 * (0.1 ** 2 + 0.02))
        check = check_bound(sc, Which.FEDIT, Rng(21), n=50_000)
        assert abs(check.lhs - exact) <= 4 * check.lhs_stderr

    def test_bound_is_attained_on_the_basin_boundary(self):
        sc = small_scenario(h=[1.0, 1.0], mu_f=[1.0, 0.0], mu_l=[0.0, 0.5])
        assert expected_excess_exact(sc, Which.FEDIT) == pytest.approx(bound_rhs(sc, Which.FEDIT), rel=1e-12)
        assert expected_excess_exact(sc, Which.LOCAL) < bound_rhs(sc, Which.LOCAL)
