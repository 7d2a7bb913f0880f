"""ConfidenceBall₂ 测试：β、椭球子问题、选臂与秩一更新"""
import logging
import math

import numpy as np
import pytest

import confidence_ball
from bandit_types import NumericError, ProblemInstance, RngStream, ValidationError
from confidence_ball import (
    ConfidenceBall2,
    EllipsoidState,
    beta_param,
    max_norm_in_ellipsoid,
    play_restricted_cb2,
    run_cb2,
    select_arm,
    theorem1_bound,
    update,
)
from environment import BanditEnvironment, NoiseModel, regret
from self_test import best_boundary_sample, random_spd


class TestBeta:

    def test_log_term_vanishes(self):
        assert beta_param(3, 10, 100.0) == 0.0

    def test_formula_values(self):
        assert beta_param(2, 100, 0.05) == pytest.approx(128 * 2 * math.log(200000) ** 2)
        assert beta_param(2, 100, 0.05) == pytest.approx(38142.9, rel=1e-3)
        assert beta_param(1, 10, 0.01) == pytest.approx(10856.9, rel=1e-3)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            beta_param(1, 10, 101.0)
        with pytest.raises(ValidationError):
            beta_param(0, 10, 0.1)


class TestTheorem1Bound:

    def test_zero_scale(self):
        assert theorem1_bound(5, 0.0, 0.0, 100, 0.05) == 0.0

    def test_value(self):
        assert theorem1_bound(2, 1.0, 1.0, 100, 0.05) == pytest.approx(381429, rel=1e-3)

    def test_linear_in_d(self):
        assert theorem1_bound(4, 1.0, 0.5, 50, 0.1) == pytest.approx(2 * theorem1_bound(2, 1.0, 0.5, 50, 0.1))


class TestMaxNormInEllipsoid:

    def test_sphere_colinear_extension(self):
        nu, value = max_norm_in_ellipsoid(np.eye(2), [0.5, 0.0], 1.0)
        np.testing.assert_allclose(nu, [1.5, 0.0], atol=1e-9)
        assert value == pytest.approx(1.5)

    def test_centered_axis_aligned(self):
        nu, value = max_norm_in_ellipsoid(np.diag([4.0, 1.0]), [0.0, 0.0], 1.0)
        np.testing.assert_allclose(nu, [0.0, 1.0], atol=1e-12)
        assert value == pytest.approx(1.0)

    def test_offset_axis_aligned(self):
        nu, value = max_norm_in_ellipsoid(np.diag([4.0, 1.0]), [0.3, 0.0], 1.0)
        assert value == pytest.approx(1.05830, abs=1e-5)
        assert nu[0] == pytest.approx(0.4, abs=1e-9)
        assert abs(nu[1]) == pytest.approx(0.97980, abs=1e-5)

    def test_one_dimensional(self):
        nu, value = max_norm_in_ellipsoid(np.array([[1.0]]), [0.5], 1.0)
        np.testing.assert_allclose(nu, [1.5])
        nu, value = max_norm_in_ellipsoid(np.array([[4.0]]), [-0.2], 1.0)
        np.testing.assert_allclose(nu, [-0.7])
        assert value == pytest.approx(0.7)

    def test_zero_beta_returns_center(self):
        nu, value = max_norm_in_ellipsoid(np.diag([2.0, 3.0]), [0.1, -0.2], 0.0)
        np.testing.assert_array_equal(nu, [0.1, -0.2])
        assert value == pytest.approx(math.hypot(0.1, 0.2))

    def test_not_positive_definite(self):
        with pytest.raises(NumericError, match="条件数"):
            max_norm_in_ellipsoid(np.diag([1.0, -1.0]), [0.0, 0.0], 1.0)

    def test_not_symmetric(self):
        with pytest.raises(NumericError):
            max_norm_in_ellipsoid(np.array([[1.0, 0.5], [0.0, 1.0]]), [0.0, 0.0], 1.0)

    def test_beats_boundary_sampling(self):
        rng = RngStream(2024)
        for d in (1, 2, 3):
            for i in range(30):
                A = random_spd(d, rng)
                center = rng.uniform(-2.0, 2.0, size=d)
                beta = (0.1, 1.0, 10.0)[i % 3]
                nu, value = max_norm_in_ellipsoid(A, center, beta)
                diff = nu - center
                assert float(diff @ A @ diff) == pytest.approx(beta, rel=1e-6)
                assert value >= np.linalg.norm(center) - 1e-12
                best = best_boundary_sample(A, center, beta, 20000, rng)
                assert value >= best * (1.0 - 1e-6)

    def test_top_semi_axis_lower_bound(self):
        A = np.diag([9.0, 4.0, 1.0])
        for beta in (0.1, 1.0, 10.0):
            _, value = max_norm_in_ellipsoid(A, [0.0, 0.0, 0.5], beta)
            assert value >= math.sqrt(beta / 9.0)
            assert value >= 0.5


class TestSelectArm:

    def test_interval_case(self):
        state = EllipsoidState(d=1, A=np.eye(1), xr_sum=np.array([0.5]), theta_hat=np.array([0.5]), beta=1.0)
        np.testing.assert_allclose(select_arm(state), [1.0])

    def test_degenerate_center_tie_break(self):
        state = EllipsoidState(d=2, A=np.diag([4.0, 1.0]), xr_sum=np.zeros(2), theta_hat=np.zeros(2), beta=1.0)
        np.testing.assert_allclose(select_arm(state), [0.0, 1.0], atol=1e-12)

    def test_offset_center(self):
        state = EllipsoidState(d=2, A=np.diag([4.0, 1.0]), xr_sum=np.zeros(2),
                               theta_hat=np.array([0.3, 0.0]), beta=1.0)
        arm = select_arm(state)
        np.testing.assert_allclose(arm, [0.37797, 0.92582], atol=1e-5)
        assert np.linalg.norm(arm) == pytest.approx(1.0, abs=1e-9)

    def test_zero_point_falls_back_to_first_axis(self):
        state = EllipsoidState(d=3, A=np.eye(3), xr_sum=np.zeros(3), theta_hat=np.zeros(3), beta=0.0)
        np.testing.assert_array_equal(select_arm(state), [1.0, 0.0, 0.0])


class TestUpdate:

    def test_one_dimensional(self):
        state = update(EllipsoidState.initial(1, 1.0), [1.0], 0.7)
        np.testing.assert_allclose(state.A, [[2.0]])
        np.testing.assert_allclose(state.theta_hat, [0.35])
        assert state.t == 1

    def test_null_update(self):
        state = update(EllipsoidState.initial(2, 1.0), [0.6, 0.8], 1.0)
        after = update(state, [0.0, 0.0], 3.0)
        np.testing.assert_array_equal(after.A, state.A)
        np.testing.assert_allclose(after.theta_hat, state.theta_hat, atol=1e-14)

    def test_two_dimensional(self):
        state = EllipsoidState.initial(2, 1.0)
        state = update(state, [1.0, 0.0], 1.0)
        state = update(state, [0.0, 1.0], 2.0)
        np.testing.assert_allclose(state.theta_hat, [0.5, 1.0])

    def test_consistency_with_direct_recomputation(self):
        rng = RngStream(8)
        d = 4
        state = EllipsoidState.initial(d, 1.0)
        arms, rewards = [], []
        for _ in range(200):
            x = rng.normal(d)
            x /= np.linalg.norm(x)
            r = float(rng.uniform(-1.0, 1.0))
            state = update(state, x, r)
            arms.append(x)
            rewards.append(r)
        X = np.asarray(arms)
        A = np.eye(d) + X.T @ X
        np.testing.assert_allclose(state.A, A, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(state.theta_hat, np.linalg.solve(A, X.T @ np.asarray(rewards)), rtol=1e-8, atol=1e-12)

    def test_contains(self):
        state = EllipsoidState.initial(2, 1.0)
        assert state.contains([0.6, 0.8])
        assert not state.contains([1.0, 1.0])


class TestRunCb2:

    def test_noise_free_one_dimensional(self):
        instance = ProblemInstance.create([1.0])
        n = 20
        record = run_cb2(instance, n, 0.01, NoiseModel.for_instance(instance), RngStream(0))
        assert record.is_complete
        assert all(abs(abs(a[0]) - 1.0) < 1e-12 for a in record.arms)
        assert record.cumulative_performance >= n - 2

    def test_zero_theta_zero_regret(self):
        instance = ProblemInstance.create([0.0, 0.0], sigma=0.1)
        record = run_cb2(instance, 30, 0.01, NoiseModel.for_instance(instance), RngStream(1))
        assert regret(record, instance) == 0.0

    def test_regret_below_bound(self):
        instance = ProblemInstance.create([1.0, 0.0])
        record = run_cb2(instance, 50, 0.01, NoiseModel.for_instance(instance), RngStream(2))
        assert regret(record, instance) < theorem1_bound(2, 1.0, 0.0, 50, 0.01)
        assert all(np.linalg.norm(a) <= 1.0 + 1e-9 for a in record.arms)

    def test_restricted_support(self):
        instance = ProblemInstance.create([0.0, 2.0, 0.0, 0.0], sigma=0.05)
        record = run_cb2(instance, 40, 0.01, NoiseModel.for_instance(instance), RngStream(3), support=[1])
        assert record.metadata["support"] == [1]
        arms = np.asarray(record.arms)
        assert not np.any(arms[:, [0, 2, 3]])

    def test_empty_support_plays_zero(self):
        instance = ProblemInstance.create([1.0, 0.0])
        env = BanditEnvironment(instance, NoiseModel.for_instance(instance), RngStream(0))
        record = env.new_record("cb2", 5)
        assert play_restricted_cb2(env, record, [], 5, 0.01) is None
        assert record.is_complete
        assert not np.any(np.asarray(record.arms))

    def test_deterministic(self):
        instance = ProblemInstance.create([0.5, -0.5, 0.2], sigma=0.3)
        noise = NoiseModel.for_instance(instance)
        a = run_cb2(instance, 40, 0.05, noise, RngStream(4))
        b = run_cb2(instance, 40, 0.05, noise, RngStream(4))
        assert a.rewards == b.rewards

    def test_dimension_above_budget_logged_at_debug(self, caplog):
        with caplog.at_level(logging.DEBUG, logger="confidence_ball"):
            ConfidenceBall2(5, 3, 0.1)
        messages = [r for r in caplog.records if "维度" in r.message]
        assert messages and all(r.levelno == logging.DEBUG for r in messages)

    def test_run_warns_once_per_shape(self, caplog, monkeypatch):
        monkeypatch.setattr(confidence_ball, "_WARNED_SHAPES", set())
        instance = ProblemInstance.create([0.5, 0.0, 0.0, 0.5, 0.0])
        noise = NoiseModel.for_instance(instance)
        with caplog.at_level(logging.WARNING, logger="confidence_ball"):
            for seed in range(3):
                run_cb2(instance, 3, 0.1, noise, RngStream(seed))
        warnings = [r for r in caplog.records if r.levelno == logging.WARNING and "维度" in r.message]
        assert len(warnings) == 1

    def test_records_theta_coverage(self):
        instance = ProblemInstance.create([0.3, -0.4], sigma=0.05)
        record = run_cb2(instance, 60, 0.01, NoiseModel.for_instance(instance), RngStream(6))
        assert record.metadata["theta_covered"] is True

    def test_empty_support_has_no_coverage_flag(self):
        instance = ProblemInstance.create([1.0, 0.0])
        record = run_cb2(instance, 5, 0.01, NoiseModel.for_instance(instance), RngStream(0), support=[])
        assert "theta_covered" not in record.metadata


class TestNoiseFreeConsistency:

    @pytest.mark.parametrize("theta", [
        [0.6, 0.8],
        [1.0, -2.0],
        [0.48, -0.6, 0.64],
        [2.0, 0.0, -1.0],
    ])
    def test_estimate_error_non_increasing(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = theta.shape[0]
        algo = ConfidenceBall2(d, 100, 0.05)
        errors = []
        for _ in range(100):
            x = algo.select_arm()
            algo.update(x, float(x @ theta))
            errors.append(float(np.linalg.norm(algo.state.theta_hat - theta)))
        for before, after in zip(errors[d - 1:], errors[d:]):
            assert after <= before * (1.0 + 1e-9) + 1e-12
        assert errors[-1] < errors[d - 1]
