"""Quick gradient and property self-tests behind ``tqc-lab check``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from tqc_lab.actor import Policy, TemperatureState, policy_loss, temperature_step
from tqc_lab.distributional import (
    TargetStrategy,
    build_target_distribution,
    critic_loss_terms,
    huber_quantile_grad,
    huber_quantile_loss,
    mean_of_atoms,
    pool_and_truncate,
    quantile_fractions,
    sorted_target_loss_terms,
)
from tqc_lab.envs import pointmass_oracle_return
from tqc_lab.numeric import AdamState, DenseNetSpec, backward, finite_diff_check, forward, init_params


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def random_quantile_instance(rng: np.random.Generator, margin: float = 0.05):
    """A random MLP, input, target and fractions with every residual away from Huber kinks."""
    while True:
        in_dim, out_dim = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(0, 3))))
        spec = DenseNetSpec(in_dim, hidden, out_dim)
        params = init_params(spec, rng)
        x = rng.standard_normal(in_dim)
        y = rng.standard_normal(out_dim) * 2.0
        tau = quantile_fractions(out_dim)
        u = y - forward(spec, params, x)[0]
        if np.all(np.abs(u) > margin) and np.all(np.abs(np.abs(u) - 1.0) > margin):
            return spec, params, x, y, tau


def quantile_loss_fn(spec, x, y, tau):
    def loss(p):
        out, trace = forward(spec, p, x)
        u = y - out
        return float(huber_quantile_loss(u, tau).sum()), backward(trace, -huber_quantile_grad(u, tau))

    return loss


def _gradients(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        spec, params, x, y, tau = random_quantile_instance(rng)
        worst = max(worst, finite_diff_check(spec, params, quantile_loss_fn(spec, x, y, tau)).max_rel_error)
    return CheckResult("mlp gradients vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}")


def _policy_gradient(rng) -> CheckResult:
    spec = DenseNetSpec(3, (6,), 4)
    critics = init_params(spec, rng, ensemble=2)
    pol = Policy.create(2, 1, (5,), rng)
    states = rng.standard_normal((6, 2))
    noise = rng.standard_normal((6, 1))

    def loss(p):
        value, grad, _ = policy_loss(spec, critics, pol.with_params(p), states, 0.3, noise)
        return value, grad

    report = finite_diff_check(pol.spec, pol.params, loss)
    return CheckResult("policy gradient vs finite differences", report.passed, f"max rel err {report.max_rel_error:.2e}")


def _truncation(rng) -> CheckResult:
    ok = pool_and_truncate([[1, 3, 5], [2, 4, 6]], 1).values.tolist() == [1, 2, 3, 4]
    atoms = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 9.0]])
    kw = dict(r=0.0, done=False, gamma=1.0, alpha=0.0, logp_next=0.0)
    tqc = build_target_distribution(TargetStrategy("tqc", 1), atoms, **kw).values.ravel().tolist()
    ptqb = build_target_distribution(TargetStrategy("ptqb", 1), atoms, **kw).values.ravel().tolist()
    ok &= tqc == [1, 2, 3, 4] and ptqb == [1, 2, 4, 5]
    for _ in range(50):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        a = rng.standard_normal((n, m))
        means = [mean_of_atoms(pool_and_truncate(a, d).values) for d in range(m)]
        ok &= all(x >= y - 1e-12 for x, y in zip(means, means[1:]))
        ok &= len(pool_and_truncate(a, m - 1).values) == n
    return CheckResult("truncation algebra", bool(ok))


def _fast_loss(rng) -> CheckResult:
    tau = quantile_fractions(5)
    th = rng.standard_normal((2, 8, 5)) * 2
    y = np.sort(rng.standard_normal((1, 8, 9)) * 2, axis=-1)
    a, b = critic_loss_terms(th, y, tau), sorted_target_loss_terms(th, y, tau)
    err = max(np.abs(a[0] - b[0]).max(), np.abs(a[1] - b[1]).max())
    return CheckResult("sorted-target loss matches pairwise loss", err < 1e-10, f"max abs diff {err:.1e}")


def _temperature(rng) -> CheckResult:
    temp = TemperatureState(0.0, -1.0)
    moves = []
    for excess in (1.0, -1.0):
        new, _ = temperature_step(np.full(8, -(temp.target_entropy + excess)), temp, AdamState.zeros((1,)))
        moves.append(new.alpha - temp.alpha)
    return CheckResult("temperature descent direction", moves[0] < 0 < moves[1])


def _oracle(rng) -> CheckResult:
    value = pointmass_oracle_return(1.0)
    return CheckResult("point-mass oracle return from x=1", abs(value + 3.85) < 1e-12, f"{value:.6f}")


CHECKS: list[Callable[[np.random.Generator], CheckResult]] = [
    _gradients, _policy_gradient, _truncation, _fast_loss, _temperature, _oracle,
]


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check(rng) for check in CHECKS]
