import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tqc_lab.distributional import (
    StrategyKind,
    TargetStrategy,
    build_target_atoms,
    build_target_distribution,
    critic_loss,
    critic_loss_terms,
    dropped_counts,
    huber_quantile_loss,
    mean_of_atoms,
    pool_and_truncate,
    quantile_fractions,
    shared_target_loss_terms,
    sorted_target_loss_terms,
)
from tqc_lab.errors import InvalidArgumentError


def rho_ref(u, tau, kappa=1.0):
    h = 0.5 * u * u if abs(u) <= kappa else kappa * (abs(u) - 0.5 * kappa)
    return abs(tau - (1.0 if u < 0 else 0.0)) * h


def loss_ref(theta, y, tau, kappa=1.0):
    total = 0.0
    for m, t in enumerate(theta):
        for yi in y:
            total += rho_ref(yi - t, tau[m], kappa)
    return total / (len(theta) * len(y))


def targets(kind, atoms, drop=1, **kw):
    defaults = dict(r=0.0, done=False, gamma=1.0, alpha=0.0, logp_next=0.0)
    defaults.update(kw)
    out = build_target_distribution(TargetStrategy(kind, drop), np.array(atoms, float), **defaults)
    return out


class TestFractions:
    @pytest.mark.parametrize("m, expected", [(1, [0.5]), (2, [0.25, 0.75])])
    def test_small(self, m, expected):
        assert quantile_fractions(m).tolist() == expected

    def test_m25_ends(self):
        tau = quantile_fractions(25)
        assert tau[0] == pytest.approx(0.02, abs=1e-15)
        assert tau[-1] == pytest.approx(0.98, abs=1e-15)

    def test_zero_rejected(self):
        with pytest.raises(InvalidArgumentError):
            quantile_fractions(0)

    @given(st.integers(1, 300))
    def test_invariants(self, m):
        tau = quantile_fractions(m)
        assert len(tau) == m and np.all(np.diff(tau) > 0)
        assert tau[0] > 0 and tau[-1] < 1
        np.testing.assert_allclose(tau, [(2 * i - 1) / (2 * m) for i in range(1, m + 1)], rtol=0, atol=1e-15)


class TestHuberQuantile:
    @pytest.mark.parametrize(
        "u, tau, expected",
        [(0.0, 0.3, 0.0), (2.0, 0.5, 0.75), (-0.5, 0.9, 0.0125)],
    )
    def test_examples(self, u, tau, expected):
        assert huber_quantile_loss(u, tau) == pytest.approx(expected, abs=1e-15)

    @given(st.floats(-50, 50), st.floats(0.01, 0.99), st.floats(0.1, 5))
    def test_matches_reference_and_nonnegative(self, u, tau, kappa):
        val = huber_quantile_loss(u, tau, kappa)
        assert val >= 0
        assert val == pytest.approx(rho_ref(u, tau, kappa), rel=1e-12, abs=1e-15)


class TestPoolAndTruncate:
    def test_example(self):
        out = pool_and_truncate([[1, 3, 5], [2, 4, 6]], 1)
        assert out.values.tolist() == [1, 2, 3, 4]
        assert out.critic_index.tolist() == [0, 1, 0, 1]

    def test_d0_sorted_union(self):
        assert pool_and_truncate([[1, 3, 5], [2, 4, 6]], 0).values.tolist() == [1, 2, 3, 4, 5, 6]

    @pytest.mark.parametrize("d", [0, 1, 2])
    def test_all_equal(self, d):
        out = pool_and_truncate(np.full((2, 3), 7.0), d)
        assert out.values.tolist() == [7.0] * ((3 - d) * 2)
        # stable ties: lower critic index first
        assert out.critic_index.tolist() == sorted(out.critic_index.tolist())

    def test_bad_drop(self):
        with pytest.raises(InvalidArgumentError):
            pool_and_truncate([[1, 2, 3]], 3)

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(1, 4).flatmap(
            lambda n: st.integers(1, 5).flatmap(
                lambda m: st.tuples(
                    arrays(np.float64, (n, m), elements=st.integers(-5, 5).map(float)),
                    st.integers(0, m - 1),
                )
            )
        )
    )
    def test_against_sorted_oracle(self, case):
        atoms, d = case
        n, m = atoms.shape
        out = pool_and_truncate(atoms, d)
        pooled = sorted((v, i) for i, row in enumerate(atoms.tolist()) for v in row)
        keep = pooled[: (m - d) * n]
        assert out.values.tolist() == [v for v, _ in keep]
        assert out.critic_index.tolist() == [i for _, i in keep]
        # permutation invariance of the multiset
        perm = np.random.default_rng(0).permutation(n)
        assert pool_and_truncate(atoms[perm], d).values.tolist() == out.values.tolist()
        # monotone trimmed mean
        means = [mean_of_atoms(pool_and_truncate(atoms, dd).values) for dd in range(m)]
        assert all(a >= b - 1e-12 for a, b in zip(means, means[1:]))

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10, allow_nan=False)),
        st.integers(0, 4),
    )
    def test_dropped_counts_conservation(self, atoms, d):
        counts = dropped_counts(atoms, d)
        assert counts.shape == (3, 4)
        assert np.all(counts.sum(axis=1) == d * 4)


class TestTargetAtoms:
    def test_formula(self):
        assert build_target_atoms(1.0, False, 0.99, np.array([2.0]), 0.0, 0.0)[0] == pytest.approx(2.98)

    def test_terminal(self):
        out = build_target_atoms(5.0, True, 0.99, np.array([1.0, -3.0, 8.0]), 0.2, -1.0)
        assert out.tolist() == [5.0, 5.0, 5.0]

    def test_entropy_bonus(self):
        out = build_target_atoms(0.0, False, 0.99, np.array([1.0]), 0.2, -1.0)
        assert out[0] == pytest.approx(1.188, abs=1e-12)

    def test_order_preserved_batched(self):
        z = np.array([[[3.0, 1.0, 2.0]], [[0.0, 5.0, -1.0]]])
        out = build_target_atoms(np.array([1.0, 2.0]), np.array([False, True]), 0.5, z, 0.0, np.zeros(2))
        assert out[0, 0].tolist() == [2.5, 1.5, 2.0]
        assert out[1, 0].tolist() == [2.0, 2.0, 2.0]


class TestStrategies:
    def test_tqc_ptqb_coincide(self):
        for atoms in ([[1, 3, 5], [2, 4, 6]], [[1, 2, 6], [3, 4, 5]]):
            tqc = targets("tqc", atoms).values[0, 0]
            ptqb = targets("ptqb", atoms).values[0, 0]
            assert tqc.tolist() == ptqb.tolist() == [1, 2, 3, 4]

    def test_tqc_ptqb_diverge(self):
        atoms = [[1, 2, 3], [4, 5, 9]]
        assert targets("tqc", atoms).values[0, 0].tolist() == [1, 2, 3, 4]
        assert targets("ptqb", atoms).values[0, 0].tolist() == [1, 2, 4, 5]

    def test_qb_argmin_mean(self):
        out = targets("qb", [[3.0, 3.0, 3.0], [1.0, 2.0, 3.0]])
        assert out.values[0, 0].tolist() == [1.0, 2.0, 3.0]

    def test_qb_tie_lowest_index(self):
        out = targets("qb", [[1.0, 3.0], [2.0, 2.0]])
        assert out.values[0, 0].tolist() == [1.0, 3.0]

    def test_tqb_per_critic(self):
        out = targets("tqb", [[1, 3, 5], [2, 4, 6]])
        assert not out.shared
        assert out.for_critic(0)[0].tolist() == [1, 3]
        assert out.for_critic(1)[0].tolist() == [2, 4]

    @pytest.mark.parametrize("kind, size", [("tqc", 8), ("ptqb", 8), ("tqb", 4), ("qb", 5)])
    def test_count_contract(self, kind, size, rng):
        out = targets(kind, rng.standard_normal((2, 5)), drop=1)
        assert out.values.shape[-1] == size == TargetStrategy(kind, 1).target_size(2, 5)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (1, 6), elements=st.floats(-10, 10, allow_nan=False)), st.integers(0, 5))
    def test_single_critic_equivalence(self, atoms, d):
        outs = [targets(k, atoms, drop=d, r=0.3, gamma=0.9).values[0, 0] for k in ("tqc", "ptqb", "tqb")]
        assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])

    def test_enumerated_small_cases_match_definitions(self):
        # N=2, M=3, d=1 over all assignments of 1..6 to the two critics
        for left in itertools.combinations(range(1, 7), 3):
            right = [v for v in range(1, 7) if v not in left]
            atoms = [list(left), right]
            tqc = targets("tqc", atoms).values[0, 0].tolist()
            ptqb = targets("ptqb", atoms).values[0, 0].tolist()
            assert tqc == [1, 2, 3, 4]
            assert ptqb == sorted(sorted(left)[:2] + right[:2])

    def test_d0_identity(self, rng):
        atoms = rng.standard_normal((3, 4))
        out = targets("tqc", atoms, drop=0).values[0, 0]
        assert out.tolist() == sorted(atoms.ravel().tolist())


class TestCriticLoss:
    def test_zero(self):
        assert critic_loss([0.0], [0.0], [0.5]) == 0.0

    def test_quarter(self):
        assert critic_loss([0.0], [1.0], [0.5]) == pytest.approx(0.25)

    def test_empty_target(self):
        with pytest.raises(InvalidArgumentError):
            critic_loss([0.0], np.zeros(0), [0.5])

    def test_double_loop_reference(self, rng):
        theta = rng.standard_normal(3)
        y = rng.standard_normal(4) * 2
        tau = quantile_fractions(3)
        assert critic_loss(theta, y, tau) == pytest.approx(loss_ref(theta, y, tau), rel=1e-12)

    def test_gradient_finite_difference(self, rng):
        theta = rng.standard_normal(4)
        y = rng.standard_normal(6) * 3
        tau = quantile_fractions(4)
        _, grad = critic_loss_terms(theta, y, tau)
        h = 1e-6
        for m in range(4):
            e = np.zeros(4)
            e[m] = h
            num = (loss_ref(theta + e, y, tau) - loss_ref(theta - e, y, tau)) / (2 * h)
            assert grad[m] == pytest.approx(num, rel=1e-5, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(-10, 10, allow_subnormal=False).filter(lambda v: v == 0 or abs(v) > 1e-100),
        st.floats(-10, 10, allow_subnormal=False).filter(lambda v: v == 0 or abs(v) > 1e-100),
    )
    def test_nonnegative_zero_iff_equal(self, a, b):
        val = critic_loss([a], [b], [0.5])
        assert val >= 0
        assert (val == 0) == (a == b)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 12), st.booleans())
    def test_sorted_target_matches_brute_force(self, seed, m, k, with_ties):
        rng = np.random.default_rng(seed)
        tau = quantile_fractions(m)
        theta = rng.standard_normal((3, 4, m)) * 2
        y = rng.standard_normal((1, 4, k)) * 2
        if with_ties:
            y = np.round(y)
            theta = np.round(theta * 2) / 2
        y = np.sort(y, axis=-1)
        fast = sorted_target_loss_terms(theta, y, tau)
        slow = critic_loss_terms(theta, y, tau)
        np.testing.assert_allclose(fast[0], slow[0], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(fast[1], slow[1], rtol=1e-10, atol=1e-12)

    def test_shared_target_matches_brute_force(self, rng):
        tau = quantile_fractions(7)
        theta = rng.standard_normal((2, 5, 7)) * 3
        shift = rng.standard_normal(5)
        y = np.sort(rng.standard_normal(11) * 2)
        fast_loss, fast_grad = shared_target_loss_terms(theta, shift, y, tau)
        slow_loss, slow_grad = critic_loss_terms(theta, shift[:, None] + y, tau)
        np.testing.assert_allclose(fast_loss, slow_loss, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(fast_grad, slow_grad, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
    def test_quantile_regression_fixed_point(self, tau, rng):
        samples = rng.standard_normal(2000) * 10
        theta = np.array([0.0])
        # gradient descent on the mean loss; kappa=1 is small next to the spread
        for lr in (5.0, 1.0, 0.2, 0.05):
            for _ in range(300):
                _, g = critic_loss_terms(theta, samples, np.array([tau]))
                theta = theta - 10 * lr * g
        oracle = np.sort(samples)[int(np.ceil(tau * len(samples))) - 1]
        assert theta[0] == pytest.approx(oracle, abs=0.5)
