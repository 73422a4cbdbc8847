import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tqc_lab.actor import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Policy,
    TemperatureState,
    deterministic_action,
    log1m_tanh_sq,
    policy_loss,
    sample_action,
    sample_with_noise,
    target_entropy,
    temperature_loss,
    temperature_step,
)
from tqc_lab.numeric import AdamState, DenseNetSpec, ParamVector, finite_diff_check, init_params


def constant_policy(mean, log_std, low=-1.0, high=1.0, state_dim=1):
    """Policy whose head ignores the state: zero weights, bias = (mean, log_std)."""
    mean = np.atleast_1d(np.asarray(mean, float))
    log_std = np.atleast_1d(np.asarray(log_std, float))
    a = len(mean)
    spec = DenseNetSpec(state_dim, (), 2 * a)
    params = ParamVector.from_layers(spec, [(np.zeros((state_dim, 2 * a)), np.concatenate([mean, log_std]))])
    return Policy(spec, params, np.full(a, low, float), np.full(a, high, float))


class TestSampling:
    def test_clamp_floor_is_deterministic(self, rng):
        pol = constant_policy(0.0, -100.0)
        actions = [sample_action(pol, np.zeros(1), rng)[0][0] for _ in range(20)]
        assert max(abs(a) for a in actions) < 1e-7

    def test_log_std_clamped(self):
        pol = constant_policy([0.0, 0.0], [-50.0, 9.0])
        s = sample_with_noise(pol, np.zeros((1, 1)), np.zeros((1, 2)))
        assert s.log_std.tolist() == [[LOG_STD_MIN, LOG_STD_MAX]]
        assert s.clamp_mask.tolist() == [[False, False]]

    def test_actions_within_bounds(self, rng):
        pol = constant_policy([5.0, -5.0], [2.0, 2.0], low=-2.0, high=3.0)
        a, lp = sample_action(pol, np.zeros((5000, 1)), rng)
        assert np.all(a >= -2.0) and np.all(a <= 3.0)
        assert np.all(np.isfinite(lp))

    def test_inside_open_interval_moderate(self, rng):
        pol = constant_policy(0.4, 0.0)
        a, _ = sample_action(pol, np.zeros((5000, 1)), rng)
        assert np.all(np.abs(a) < 1.0)

    @given(st.floats(-30, 30))
    def test_log1m_tanh_sq_reference(self, u):
        ref = -2.0 * np.log(np.cosh(u))
        assert log1m_tanh_sq(u) == pytest.approx(ref, rel=1e-6, abs=1e-8)

    def test_density_histogram(self, rng):
        pol = constant_policy(0.3, -0.4, low=-2.0, high=3.0)
        actions, _ = sample_action(pol, np.zeros((100_000, 1)), rng)

        # density at grid actions by inverting the squash, then mapping back through the policy
        def density(a):
            u = np.arctanh((a - pol.offset) / pol.scale)
            noise = (u - 0.3) / np.exp(-0.4)
            s = sample_with_noise(pol, np.zeros((len(a), 1)), noise)
            return np.exp(s.log_prob)

        edges = np.linspace(-1.9, 2.9, 41)
        hist, _ = np.histogram(actions[:, 0], bins=edges)
        fine = np.linspace(-1.9, 2.9, 40 * 200 + 1)
        p = density(fine[:, None])
        cell = np.diff(fine)
        mid_mass = 0.5 * (p[1:] + p[:-1]) * cell
        predicted = mid_mass.reshape(40, 200).sum(axis=1) * len(actions)
        assert np.all(np.abs(hist - predicted) <= 5 * np.sqrt(predicted) + 5)
        whole = np.linspace(-2 + 1e-9, 3 - 1e-9, 200_001)
        assert np.trapezoid(density(whole[:, None]), whole) == pytest.approx(1.0, abs=1e-3)


class TestDeterministic:
    def test_zero_mean(self):
        assert deterministic_action(constant_policy(0.0, 0.0), np.zeros(1)).tolist() == [0.0]

    def test_large_mean_hits_upper_bound(self):
        assert deterministic_action(constant_policy(50.0, 0.0, -2, 3), np.zeros(1))[0] == pytest.approx(3.0)

    def test_matches_sample_mode(self, rng):
        pol = constant_policy(0.7, LOG_STD_MIN)
        a, _ = sample_action(pol, np.zeros(1), rng)
        assert a[0] == pytest.approx(deterministic_action(pol, np.zeros(1))[0], abs=1e-7)


def _critics(rng, state_dim=2, action_dim=1, n=2, m=3):
    spec = DenseNetSpec(state_dim + action_dim, (5,), m)
    return spec, init_params(spec, rng, ensemble=n)


class TestPolicyLoss:
    def test_constant_critics(self, rng):
        spec = DenseNetSpec(2, (), 4)
        critics = ParamVector.from_layers(spec, [(np.zeros((2, 4)), np.full(4, 2.5))])
        critics = ParamVector.stack([critics, critics])
        pol = constant_policy(0.1, 0.2)
        states = np.zeros((8, 1))
        noise = rng.standard_normal((8, 1))
        loss, _, smp = policy_loss(spec, critics, pol, states, 0.3, noise)
        assert loss == pytest.approx(np.mean(0.3 * smp.log_prob) - 2.5, abs=1e-12)

    def test_gradient_finite_differences(self, rng):
        cspec, critics = _critics(rng)
        pol = Policy.create(2, 1, (6,), rng)
        states = rng.standard_normal((7, 2))
        noise = rng.standard_normal((7, 1))

        def loss(params):
            value, grad, _ = policy_loss(cspec, critics, pol.with_params(params), states, 0.4, noise)
            return value, grad

        report = finite_diff_check(pol.spec, pol.params, loss, tolerance=1e-4)
        assert report.passed, report.max_rel_error

    def test_increasing_critic_pushes_mean_up(self, rng):
        spec = DenseNetSpec(2, (), 1)
        critics = ParamVector.stack([ParamVector.from_layers(spec, [(np.array([[0.0], [1.0]]), np.zeros(1))])])
        pol = constant_policy(0.0, -1.0)
        _, grad, _ = policy_loss(spec, critics, pol, np.zeros((16, 1)), 0.0, rng.standard_normal((16, 1)))
        (_, db), = grad.layers()
        assert db[0] < 0  # descent increases the mean


class TestTemperature:
    @pytest.mark.parametrize("dim", [1, 6, 17])
    def test_target_entropy(self, dim):
        assert target_entropy(dim) == -dim

    def test_zero_gradient(self):
        temp = TemperatureState(0.3, -1.0)
        _, grad = temperature_loss(np.full(16, 1.0), temp)
        assert grad == 0.0

    @pytest.mark.parametrize("offset, direction", [(1.0, -1), (-1.0, 1)])
    def test_step_direction(self, offset, direction):
        temp = TemperatureState(0.0, -2.0)
        log_probs = np.full(32, -(temp.target_entropy + offset))
        new, _ = temperature_step(log_probs, temp, AdamState.zeros((1,), lr=3e-4))
        assert np.sign(new.alpha - temp.alpha) == direction

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3).filter(lambda x: abs(x) > 1e-3), st.integers(2, 40))
    def test_monotone_under_fixed_entropy(self, excess, steps):
        temp = TemperatureState(0.0, -1.0)
        opt = AdamState.zeros((1,), lr=1e-2)
        lp = np.full(4, -(temp.target_entropy + excess))
        alphas = [temp.alpha]
        for _ in range(steps):
            temp, opt = temperature_step(lp, temp, opt)
            alphas.append(temp.alpha)
            assert temp.alpha > 0
        diffs = np.diff(alphas)
        assert np.all(np.sign(diffs) == -np.sign(excess))
