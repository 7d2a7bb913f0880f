"""SL-UCB 测试：阈值、探索臂、估计器、停止判定、活跃集与完整运行"""
import math

import numpy as np
import pytest

from bandit_types import ProblemInstance, RngStream, UndefinedQuantityError, ValidationError
from environment import NoiseModel, pull, regret
from sparse_bandit import (
    PHASE_EXPLOIT,
    PHASE_EXPLORE,
    SlucbConfig,
    SparseLinearUCB,
    SupportExplorationState,
    a_min_set,
    active_set,
    cap_active_set,
    concentration_check,
    explore_support,
    exploration_threshold,
    phase_bounds,
    run_slucb,
    run_slucb_detailed,
    sample_exploring_arm,
    should_stop,
    stopping_window,
    subspace_loss,
    theorem2_bound,
    update_estimate,
)


def _state(K, t, theta_hat):
    """构造 θ̂ 为给定值的探索状态"""
    return SupportExplorationState(K=K, t=t, sums=np.asarray(theta_hat, dtype=float) * t / K)


class TestThreshold:

    def test_zero_bounds(self):
        config = SlucbConfig(sigma2_bar=0.0, theta2_bar=0.0, delta=0.01, n=10)
        assert exploration_threshold(config, 100) == 0.0

    def test_value(self):
        config = SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=0.01, n=10)
        assert exploration_threshold(config, 100) == pytest.approx(2 * math.sqrt(2 * math.log(20000)))
        assert exploration_threshold(config, 100) == pytest.approx(8.9010, abs=1e-4)

    def test_sqrt_log_scaling(self):
        low = SlucbConfig(sigma2_bar=0.5, theta2_bar=0.5, delta=2.0 / math.e, n=10)
        high = SlucbConfig(sigma2_bar=0.5, theta2_bar=0.5, delta=2.0 / math.e ** 4, n=10)
        assert exploration_threshold(high, 1) == pytest.approx(2 * exploration_threshold(low, 1))

    def test_threshold_scale(self):
        base = SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=0.01, n=10)
        scaled = SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=0.01, n=10, threshold_scale=0.25)
        assert exploration_threshold(scaled, 50) == pytest.approx(0.25 * exploration_threshold(base, 50))

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=1.5, n=10)
        with pytest.raises(ValidationError):
            SlucbConfig(sigma2_bar=-1.0, theta2_bar=1.0, delta=0.1, n=10)
        with pytest.raises(ValidationError):
            SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=0.1, n=0)
        with pytest.raises(ValidationError):
            SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=0.1, n=10, min_rounds=0)
        with pytest.raises(ValidationError):
            SlucbConfig(sigma2_bar=1.0, theta2_bar=1.0, delta=0.1, n=10, max_active=0)


class TestExploringArm:

    def test_one_dimensional(self):
        rng = RngStream(0)
        assert {float(sample_exploring_arm(1, rng)[0]) for _ in range(50)} == {-1.0, 1.0}

    def test_unit_norm(self):
        rng = RngStream(1)
        for K in (1, 2, 7, 100):
            assert np.linalg.norm(sample_exploring_arm(K, rng)) == pytest.approx(1.0, abs=1e-12)

    def test_coordinates_are_fair(self):
        rng = RngStream(2)
        draws = 100_000
        total = np.zeros(4)
        for _ in range(draws):
            total += sample_exploring_arm(4, rng)
        assert np.all(np.abs(total / draws) <= 4.0 / math.sqrt(draws))


class TestEstimator:

    def test_single_arm_cross_talk(self):
        x = np.array([1.0, 1.0]) / math.sqrt(2.0)
        state = update_estimate(SupportExplorationState(K=2), x, 1.0 / math.sqrt(2.0))
        np.testing.assert_allclose(state.theta_hat, [1.0, 1.0], atol=1e-12)

    def test_orthogonal_design_recovers_theta(self):
        instance = ProblemInstance.create([1.0, 0.0])
        noise = NoiseModel.for_instance(instance)
        rng = RngStream(0)
        state = SupportExplorationState(K=2)
        for x in (np.array([1.0, 1.0]) / math.sqrt(2.0), np.array([1.0, -1.0]) / math.sqrt(2.0)):
            state = update_estimate(state, x, pull(instance, x, noise, rng))
        np.testing.assert_allclose(state.theta_hat, [1.0, 0.0], atol=1e-12)

    def test_zero_reward_keeps_sums(self):
        state = update_estimate(SupportExplorationState(K=3), [0.5, 0.5, 0.5], 2.0)
        after = update_estimate(state, [0.5, -0.5, 0.5], 0.0)
        np.testing.assert_array_equal(after.sums, state.sums)
        assert after.t == 2

    def test_unbiased(self):
        theta = np.array([0.6, -0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        instance = ProblemInstance.create(theta, sigma=0.1)
        noise = NoiseModel.for_instance(instance)
        rng = RngStream(3)
        t, prefixes = 5, 10_000
        estimates = np.zeros((prefixes, instance.K))
        for i in range(prefixes):
            state = SupportExplorationState(K=instance.K)
            for _ in range(t):
                x = sample_exploring_arm(instance.K, rng)
                state = update_estimate(state, x, pull(instance, x, noise, rng))
            estimates[i] = state.theta_hat
        band = 4.0 * (instance.theta_l2 + instance.sigma_l2) * math.sqrt(2.0) / math.sqrt(t * prefixes)
        assert np.all(np.abs(estimates.mean(axis=0) - theta) <= band)


class TestStoppingRule:

    def test_second_condition_not_met(self):
        assert not should_stop(_state(1, 9, [1.0]), b=1.0, n=100)

    def test_both_conditions_met(self):
        assert should_stop(_state(1, 25, [1.0]), b=1.0, n=100)

    def test_zero_estimate_continues(self):
        assert not should_stop(_state(3, 10, [0.0, 0.0, 0.0]), b=1.0, n=100)

    def test_budget_exhaustion(self):
        assert should_stop(_state(3, 100, [0.0, 0.0, 0.0]), b=1.0, n=100)

    def test_requires_observation(self):
        with pytest.raises(ValidationError):
            should_stop(SupportExplorationState(K=2), b=1.0, n=10)


class TestActiveSet:

    def test_absolute_threshold(self):
        assert active_set([0.9, 0.05, -0.5], b=1.0, T=25) == [0, 2]

    def test_zero_threshold(self):
        assert active_set([0.0, 0.1, -0.2, 0.0], b=0.0, T=4) == [1, 2]

    def test_zero_estimate(self):
        assert active_set([0.0, 0.0], b=1.0, T=4) == []

    def test_a_min_and_subspace_loss(self):
        theta = np.array([0.0, 0.9, 0.1, 0.0])
        assert a_min_set(theta, b=0.2, n=1) == [1]
        assert subspace_loss([3.0, 4.0], [1]) == pytest.approx(1.0)
        assert subspace_loss([3.0, 4.0], [0, 1]) == pytest.approx(0.0)

    def test_cap_keeps_largest_estimates(self):
        theta_hat = [0.2, -0.9, 0.0, 0.5, 0.7]
        assert cap_active_set(theta_hat, [4, 3, 1, 0], 2) == [1, 4]

    def test_cap_ties_prefer_smaller_index(self):
        assert cap_active_set([0.5, -0.5, 0.5], [0, 1, 2], 2) == [0, 1]

    def test_cap_without_limit(self):
        assert cap_active_set([0.1, 0.2, 0.3], [2, 0], None) == [0, 2]
        assert cap_active_set([0.1, 0.2, 0.3], [2, 0], 5) == [0, 2]


class TestDiagnosticBounds:

    def test_phase_bounds(self):
        t_min, t_max = phase_bounds(8.901, 5.0, 1, 10_000)
        assert t_min == pytest.approx(1584.6, abs=0.1)
        assert t_max == pytest.approx(14261, abs=1)
        assert t_max == pytest.approx(9 * t_min)

    def test_phase_bounds_scale_with_sqrt_n(self):
        a = phase_bounds(2.0, 1.0, 4, 100)
        b = phase_bounds(2.0, 1.0, 4, 400)
        assert b[0] == pytest.approx(2 * a[0])
        assert b[1] == pytest.approx(2 * a[1])

    def test_phase_bounds_undefined(self):
        with pytest.raises(UndefinedQuantityError):
            phase_bounds(1.0, 0.0, 1, 100)

    def test_stopping_window(self):
        lower, upper = stopping_window(26.7, 5.0, 10_000)
        assert lower == pytest.approx(26.7 ** 2 / 25)
        assert upper == math.ceil(9 * 26.7 ** 2 / 25)
        assert stopping_window(1e6, 1.0, 50) == (50.0, 50)
        with pytest.raises(UndefinedQuantityError):
            stopping_window(1.0, 0.0, 10)

    def test_theorem2_bound(self):
        assert theorem2_bound(0.0, 0.0, 100, 0.01, 2, 10_000) == 0.0
        assert theorem2_bound(1.0, 1.0, 100, 0.01, 2, 10_000) == pytest.approx(934_963, rel=1e-3)
        assert theorem2_bound(1.0, 1.0, 100, 0.01, 4, 40_000) == pytest.approx(
            4 * theorem2_bound(1.0, 1.0, 100, 0.01, 2, 10_000))


class TestConcentrationCheck:

    def test_noise_free_single_coordinate(self):
        instance = ProblemInstance.create([0.7])
        config = SlucbConfig(sigma2_bar=0.0, theta2_bar=0.7, delta=0.01, n=50)
        result = explore_support(instance, config, NoiseModel.for_instance(instance), RngStream(0))
        np.testing.assert_allclose(result.trajectory, np.full((len(result.trajectory), 1), 0.7))
        assert concentration_check(instance, result.trajectory, result.b)

    def test_zero_radius_fails(self):
        instance = ProblemInstance.create([1.0, 0.0], sigma=0.2)
        assert not concentration_check(instance, [np.array([1.01, 0.0])], b=0.0)

    def test_empty_trajectory(self):
        assert concentration_check(ProblemInstance.create([1.0]), [], b=1.0)


class TestRunSlucb:

    def test_zero_theta(self):
        instance = ProblemInstance.create(np.zeros(20), sigma=0.1)
        config = SlucbConfig(sigma2_bar=instance.sigma_l2, theta2_bar=1.0, delta=0.01, n=200)
        record, T, active = run_slucb(instance, config, NoiseModel.for_instance(instance), RngStream(0))
        assert record.is_complete
        assert regret(record, instance) == 0.0

    def test_budget_exhaustion(self):
        instance = ProblemInstance.create([1.0, 0.0, 0.0], sigma=0.1)
        config = SlucbConfig(sigma2_bar=1.0, theta2_bar=1e6, delta=0.01, n=5)
        record, T, active = run_slucb(instance, config, NoiseModel.for_instance(instance), RngStream(0))
        assert T == 5
        assert active == []
        assert record.phases == [PHASE_EXPLORE] * 5
        assert record.metadata["T"] == 5
        assert record.metadata["active_set"] == []

    def test_empty_active_set_plays_zero(self):
        config = SlucbConfig(sigma2_bar=0.0, theta2_bar=1.0, delta=0.01, n=10)
        agent = SparseLinearUCB(3, config, RngStream(0))
        agent.state = _state(3, 4, [0.0, 0.0, 0.0])
        agent._start_exploitation()
        assert agent.active == []
        assert agent.cb2 is None
        np.testing.assert_array_equal(agent.select_arm(), np.zeros(3))
        agent.observe(np.zeros(3), 0.0)

    def test_min_rounds_delays_stop(self):
        instance = ProblemInstance.create(np.eye(20)[0], sigma=0.05)
        config = SlucbConfig(sigma2_bar=instance.sigma_l2, theta2_bar=1.0, delta=0.01, n=2000, min_rounds=1200)
        result = run_slucb_detailed(instance, config, NoiseModel.for_instance(instance), RngStream(4))
        assert result.T >= 1200
        assert result.record.phases[:1200] == [PHASE_EXPLORE] * 1200

    def test_min_rounds_beyond_budget(self):
        instance = ProblemInstance.create([1.0, 0.0], sigma=0.0)
        config = SlucbConfig(sigma2_bar=0.0, theta2_bar=1.0, delta=0.1, n=30, min_rounds=100)
        result = run_slucb_detailed(instance, config, NoiseModel.for_instance(instance), RngStream(0))
        assert result.T == 30
        assert result.record.is_complete

    def test_max_active_caps_phase_two(self):
        config = SlucbConfig(sigma2_bar=0.0, theta2_bar=1.0, delta=0.01, n=50, max_active=2)
        agent = SparseLinearUCB(5, config, RngStream(0))
        agent.b = 0.01
        agent.state = _state(5, 4, [0.3, -0.8, 0.6, 0.0, 0.1])
        agent._start_exploitation()
        assert agent.active == [1, 2]
        assert agent.cb2.state.d == 2
        arm = agent.select_arm()
        assert not np.any(arm[[0, 3, 4]])

    def test_phase_two_arms(self):
        instance = ProblemInstance.create(np.eye(20)[0], sigma=0.05)
        config = SlucbConfig(sigma2_bar=instance.sigma_l2, theta2_bar=1.0, delta=0.01, n=2000)
        result = run_slucb_detailed(instance, config, NoiseModel.for_instance(instance), RngStream(4))
        assert result.T < config.n
        assert result.active == [0]
        exploit = [a for a, p in zip(result.record.arms, result.record.phases) if p == PHASE_EXPLOIT]
        assert len(exploit) == config.n - result.T
        for arm in exploit:
            assert np.linalg.norm(arm) <= 1.0 + 1e-9
            assert not np.any(arm[1:])
        assert concentration_check(instance, result.trajectory, result.b)
        assert subspace_loss(instance.theta, result.active) <= 9 * instance.S * result.b ** 2 / math.sqrt(config.n)
        assert regret(result.record, instance) < 2.0 * result.T

    def test_deterministic(self):
        instance = ProblemInstance.create(np.eye(15)[3] * -1.0, sigma=0.1)
        config = SlucbConfig(sigma2_bar=instance.sigma_l2, theta2_bar=1.0, delta=0.05, n=600)
        noise = NoiseModel.for_instance(instance)
        a = run_slucb(instance, config, noise, RngStream(10))
        b = run_slucb(instance, config, noise, RngStream(10))
        assert a[1] == b[1]
        assert a[2] == b[2]
        assert a[0].rewards == b[0].rewards
        assert all(np.array_equal(x, y) for x, y in zip(a[0].arms, b[0].arms))


class TestSupportRecovery:
    """K=100, θ = 5·e₁, σ = 0.1·𝟙, θ̄₂ = 5, σ̄₂ = 1, δ = 0.01, n = 10⁴"""

    def test_event_frequency_and_containment(self):
        K, n = 100, 10_000
        instance = ProblemInstance.create(5.0 * np.eye(K)[0], sigma=0.1)
        config = SlucbConfig(sigma2_bar=1.0, theta2_bar=5.0, delta=0.01, n=n)
        noise = NoiseModel.for_instance(instance)
        seeds = 200
        xi_runs = 0
        for seed in range(seeds):
            result = explore_support(instance, config, noise, RngStream(RngStream.spawn_seed(7, seed)))
            if not concentration_check(instance, result.trajectory, result.b):
                continue
            xi_runs += 1
            lower, upper = stopping_window(result.b, 5.0, n)
            assert lower <= result.T <= upper
            assert set(result.active) <= set(instance.support)
            assert set(a_min_set(instance.theta, result.b, n)) <= set(result.active)
            assert result.active == [0]
        assert xi_runs / seeds >= 0.90
