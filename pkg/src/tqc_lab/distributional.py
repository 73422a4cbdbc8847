"""Quantile atoms, the quantile Huber loss and TD target construction.

Atoms for a batch of transitions are held as ``(B, N, M)`` arrays: batch,
critic, quantile. Pooling flattens the critic and quantile axes in
critic-major order, so a stable sort breaks ties toward the lower critic
index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from tqc_lab.errors import InvalidArgumentError


def quantile_fractions(n_atoms: int) -> np.ndarray:
    """Midpoints ``(2m - 1) / 2M`` of M equal-probability bins."""
    if int(n_atoms) != n_atoms or n_atoms < 1:
        raise InvalidArgumentError(f"number of atoms must be a positive integer, got {n_atoms}")
    m = np.arange(1, n_atoms + 1, dtype=np.float64)
    return (2.0 * m - 1.0) / (2.0 * n_atoms)


def huber(u, kappa: float = 1.0):
    a = np.abs(u)
    return np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))


def huber_quantile_loss(u, tau, kappa: float = 1.0):
    """Asymmetric Huber loss ``|tau - 1{u<0}| * L_H(u)``, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.abs(tau - (u < 0))
    out = weight * huber(u, kappa)
    return float(out) if out.ndim == 0 else out


def huber_quantile_grad(u, tau, kappa: float = 1.0):
    """Derivative of :func:`huber_quantile_loss` with respect to ``u``."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * np.clip(u, -kappa, kappa)


@dataclass(frozen=True)
class PooledAtomSet:
    """Ascending pooled atoms with the index of the critic each came from."""

    values: np.ndarray
    critic_index: np.ndarray


def _check_drop(n_atoms: int, drop: int) -> None:
    if int(drop) != drop or not 0 <= drop < n_atoms:
        raise InvalidArgumentError(f"drop must satisfy 0 <= d < M={n_atoms}, got {drop}")


def sort_pooled(atoms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort ``(..., N, M)`` atoms pooled over critics.

    Returns sorted values ``(..., N*M)`` and the critic index of each.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    n, m = atoms.shape[-2:]
    flat = atoms.reshape(*atoms.shape[:-2], n * m)
    order = np.argsort(flat, axis=-1, kind="stable")
    return np.take_along_axis(flat, order, axis=-1), order // m


def pool_and_truncate(atom_vectors, drop: int) -> PooledAtomSet:
    """Keep the ``(M - d) * N`` smallest atoms of the union of N critics.

    ``atom_vectors`` is ``(N, M)`` for one state-action pair or
    ``(B, N, M)`` for a batch.
    """
    atoms = np.asarray(atom_vectors, dtype=np.float64)
    if atoms.ndim not in (2, 3) or atoms.shape[-2] < 1:
        raise InvalidArgumentError(f"expected (N, M) or (B, N, M) atoms, got {atoms.shape}")
    n, m = atoms.shape[-2:]
    _check_drop(m, drop)
    values, critic = sort_pooled(atoms)
    keep = (m - drop) * n
    return PooledAtomSet(values[..., :keep], critic[..., :keep])


def dropped_counts(atoms: np.ndarray, drop: int) -> np.ndarray:
    """How many of the ``d * N`` truncated atoms each critic contributed.

    ``atoms`` is ``(B, N, M)``; the result is an integer array ``(B, N)``.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    n, m = atoms.shape[-2:]
    _check_drop(m, drop)
    _, critic = sort_pooled(atoms)
    removed = critic[..., (m - drop) * n :]
    counts = np.zeros((*atoms.shape[:-2], n), dtype=np.int64)
    for idx in range(n):
        counts[..., idx] = (removed == idx).sum(axis=-1)
    return counts


def build_target_atoms(r, done, gamma: float, kept_atoms, alpha: float, logp_next):
    """Shift and scale kept next-state atoms into TD target atoms.

    ``y_i = r + gamma * (z_i - alpha * logp_next)``, and ``y_i = r`` on
    terminal transitions. Scalars or batched ``r``/``done``/``logp_next``
    of shape ``(B,)`` with ``kept_atoms`` of shape ``(B, ..., K)``.
    """
    z = np.asarray(kept_atoms, dtype=np.float64)
    if z.size == 0:
        raise InvalidArgumentError("no atoms to build a target from")
    r = np.asarray(r, dtype=np.float64)
    not_done = 1.0 - np.asarray(done, dtype=np.float64)
    logp = np.asarray(logp_next, dtype=np.float64)
    extra = z.ndim - r.ndim
    expand = (...,) + (None,) * extra
    return r[expand] + not_done[expand] * gamma * (z - alpha * logp[expand])


class StrategyKind(str, enum.Enum):
    TQC = "tqc"  # truncate the pooled mixture
    PTQB = "ptqb"  # pool per-critic truncations
    TQB = "tqb"  # each critic trains on its own truncation
    QB = "qb"  # atoms of the critic with the lowest mean


@dataclass(frozen=True)
class TargetStrategy:
    kind: StrategyKind = StrategyKind.TQC
    drop: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if int(self.drop) != self.drop or self.drop < 0:
            raise InvalidArgumentError(f"drop must be a non-negative integer, got {self.drop}")

    def target_size(self, n_critics: int, n_atoms: int) -> int:
        k = n_atoms - self.drop
        if self.kind in (StrategyKind.TQC, StrategyKind.PTQB):
            return k * n_critics
        if self.kind is StrategyKind.TQB:
            return k
        return n_atoms


@dataclass(frozen=True)
class TargetAtomSet:
    """Target atoms ``(B, C, K)`` where C is 1 when all critics share a target."""

    values: np.ndarray
    strategy: StrategyKind

    @property
    def shared(self) -> bool:
        return self.values.shape[1] == 1

    def for_critic(self, n: int) -> np.ndarray:
        return self.values[:, 0 if self.shared else n]


def select_next_atoms(strategy: TargetStrategy, atoms: np.ndarray) -> np.ndarray:
    """Pick the next-state atoms each strategy bootstraps from, before shifting.

    ``atoms`` is ``(B, N, M)``; returns ``(B, C, K)``.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    b, n, m = atoms.shape
    kind = strategy.kind
    if kind is StrategyKind.QB:
        best = np.argmin(atoms.mean(axis=-1), axis=-1)
        return atoms[np.arange(b), best][:, None, :]
    _check_drop(m, strategy.drop)
    k = m - strategy.drop
    if kind is StrategyKind.TQC:
        return pool_and_truncate(atoms, strategy.drop).values[:, None, :]
    per_critic = np.sort(atoms, axis=-1, kind="stable")[..., :k]
    if kind is StrategyKind.TQB:
        return per_critic
    pooled = np.sort(per_critic.reshape(b, 1, n * k), axis=-1, kind="stable")
    return pooled


def build_target_distribution(
    strategy: TargetStrategy,
    target_critic_atoms,
    r,
    done,
    gamma: float,
    alpha: float,
    logp_next,
) -> TargetAtomSet:
    """TD target atoms for every trained critic under ``strategy``.

    ``target_critic_atoms`` holds target-network atoms at ``(s', a')``, shape
    ``(N, M)`` for one transition or ``(B, N, M)`` for a batch.
    """
    atoms = np.asarray(target_critic_atoms, dtype=np.float64)
    if atoms.ndim == 2:
        atoms = atoms[None]
        r, done, logp_next = (np.atleast_1d(x) for x in (r, done, logp_next))
    if atoms.ndim != 3:
        raise InvalidArgumentError(f"expected (B, N, M) atoms, got {atoms.shape}")
    z = select_next_atoms(strategy, atoms)
    values = build_target_atoms(r, done, gamma, z, alpha, logp_next)
    return TargetAtomSet(values, strategy.kind)


def critic_loss_terms(predicted, target, fractions, kappa: float = 1.0):
    """Per-sample quantile Huber loss and its gradient in the predicted atoms.

    ``predicted`` is ``(..., M)`` and ``target`` ``(..., K)`` with matching
    (broadcastable) leading axes. The loss of one sample is
    ``sum_m sum_i rho_{tau_m}(y_i - theta_m) / (K * M)``.
    """
    theta = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if y.shape[-1] == 0:
        raise InvalidArgumentError("target atom set is empty")
    tau = np.asarray(fractions, dtype=np.float64)
    if tau.shape != theta.shape[-1:]:
        raise InvalidArgumentError(
            f"{tau.shape[0]} fractions for {theta.shape[-1]} predicted atoms"
        )
    m, k = theta.shape[-1], y.shape[-1]
    u = y[..., None, :] - theta[..., :, None]
    neg = u < 0
    weight = np.where(neg, 1.0 - tau[:, None], tau[:, None])
    a = np.abs(u)
    small = a <= kappa
    loss = (weight * np.where(small, 0.5 * u * u, kappa * (a - 0.5 * kappa))).sum(axis=(-2, -1))
    dtheta = -(weight * np.clip(u, -kappa, kappa)).sum(axis=-1)
    scale = 1.0 / (k * m)
    return loss * scale, dtheta * scale


def critic_loss(predicted, target, fractions, kappa: float = 1.0) -> float:
    """Quantile Huber loss of predicted atoms against a target atom set.

    Batched inputs are averaged over their leading axes.
    """
    loss, _ = critic_loss_terms(predicted, target, fractions, kappa)
    return float(np.mean(loss))


def mean_of_atoms(atoms) -> float:
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.size == 0:
        raise InvalidArgumentError("mean of an empty atom set")
    return float(atoms.mean())


def shared_target_loss_terms(predicted, shift, target_sorted, fractions, kappa: float = 1.0):
    """Same as :func:`critic_loss_terms` when every sample shares one sorted target.

    Sample ``j`` uses atoms ``shift[j] + target_sorted``; ``predicted`` is
    ``(..., J, M)`` and ``shift`` ``(J,)``. Runs in ``O((M + K) log K)`` per
    sample using prefix sums over the sorted target.
    """
    theta = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(target_sorted, dtype=np.float64)
    k = y.shape[0]
    if k == 0:
        raise InvalidArgumentError("target atom set is empty")
    tau = np.asarray(fractions, dtype=np.float64)
    m = theta.shape[-1]
    center = y[k // 2]
    y = y - center
    q = theta - np.asarray(shift, dtype=np.float64)[:, None] - center

    p1 = np.concatenate([[0.0], np.cumsum(y)])
    p2 = np.concatenate([[0.0], np.cumsum(y * y)])
    ia = np.searchsorted(y, q - kappa, side="left")
    i0 = np.searchsorted(y, q, side="left")
    ic = np.searchsorted(y, q + kappa, side="right")
    n_a, n_b, n_c, n_d = ia, i0 - ia, ic - i0, k - ic
    s_a = p1[ia]
    s_b, s_c, s_d = p1[i0] - p1[ia], p1[ic] - p1[i0], p1[k] - p1[ic]
    q_b, q_c = p2[i0] - p2[ia], p2[ic] - p2[i0]

    loss, grad = _piecewise_terms(q, n_a, n_b, n_c, n_d, s_a, s_b, s_c, s_d, q_b, q_c, tau, kappa)
    scale = 1.0 / (k * m)
    return loss.sum(axis=-1) * scale, grad * scale


def _piecewise_terms(q, n_a, n_b, n_c, n_d, s_a, s_b, s_c, s_d, q_b, q_c, tau, kappa):
    """Loss and d/dq of ``sum_i rho_tau(y_i - q)`` from region counts and sums.

    Regions split sorted targets by ``q - kappa``, ``q`` and ``q + kappa``.
    """
    lo, hi = 1.0 - tau, tau
    grad = lo * kappa * n_a - lo * (s_b - n_b * q) - hi * (s_c - n_c * q) - hi * kappa * n_d
    loss = (
        lo * kappa * (n_a * (q - 0.5 * kappa) - s_a)
        + lo * 0.5 * (q_b - 2.0 * q * s_b + n_b * q * q)
        + hi * 0.5 * (q_c - 2.0 * q * s_c + n_c * q * q)
        + hi * kappa * (s_d - n_d * (q + 0.5 * kappa))
    )
    return loss, grad


def sorted_target_loss_terms(predicted, target_sorted, fractions, kappa: float = 1.0):
    """Same result as :func:`critic_loss_terms` for targets sorted ascending.

    ``predicted`` ``(..., M)`` and ``target_sorted`` ``(..., K)`` broadcast
    over leading axes. Each row costs a sort of ``K + 3M`` values instead of
    the ``K * M`` pairwise terms.
    """
    theta = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(target_sorted, dtype=np.float64)
    tau = np.asarray(fractions, dtype=np.float64)
    m, k = theta.shape[-1], y.shape[-1]
    if k == 0:
        raise InvalidArgumentError("target atom set is empty")
    lead = np.broadcast_shapes(theta.shape[:-1], y.shape[:-1])
    rows = int(np.prod(lead, dtype=np.int64))
    q = np.broadcast_to(theta, lead + (m,)).reshape(rows, m)
    y = np.broadcast_to(y, lead + (k,)).reshape(rows, k)
    center = y[:, k // 2 : k // 2 + 1]
    y = y - center
    q = q - center

    # rank each threshold among the targets; tie order is irrelevant since
    # both branches of the loss agree at u = 0 and |u| = kappa
    thresholds = np.concatenate([q - kappa, q, q + kappa], axis=1)
    order = np.argsort(np.concatenate([y, thresholds], axis=1), axis=1)
    is_target = order < k
    below = np.cumsum(is_target, axis=1)
    pick = ~is_target
    ranks = np.empty((rows, 3 * m), dtype=np.int64)
    ranks[np.nonzero(pick)[0], order[pick] - k] = below[pick]
    ia, i0, ic = ranks[:, :m], ranks[:, m : 2 * m], ranks[:, 2 * m :]

    zero = np.zeros((rows, 1))
    p1 = np.concatenate([zero, np.cumsum(y, axis=1)], axis=1)
    p2 = np.concatenate([zero, np.cumsum(y * y, axis=1)], axis=1)
    at = lambda p, i: np.take_along_axis(p, i, axis=1)
    p1a, p10, p1c, p1k = at(p1, ia), at(p1, i0), at(p1, ic), p1[:, k:]
    p2a, p20, p2c = at(p2, ia), at(p2, i0), at(p2, ic)
    loss, grad = _piecewise_terms(
        q, ia, i0 - ia, ic - i0, k - ic,
        p1a, p10 - p1a, p1c - p10, p1k - p1c,
        p20 - p2a, p2c - p20, tau, kappa,
    )
    scale = 1.0 / (k * m)
    return (loss.sum(axis=1) * scale).reshape(lead), (grad * scale).reshape(lead + (m,))
