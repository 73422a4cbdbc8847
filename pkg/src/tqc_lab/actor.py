"""Squashed-Gaussian policy, its loss against quantile critics, and entropy temperature."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from tqc_lab.errors import InvalidArgumentError
from tqc_lab.numeric import (
    AdamState,
    DenseNetSpec,
    ParamVector,
    adam_step,
    backward,
    forward,
    init_params,
)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class Policy:
    """MLP state -> (mean, log-std) followed by tanh and an affine map to bounds."""

    spec: DenseNetSpec
    params: ParamVector
    low: np.ndarray
    high: np.ndarray

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        hidden_sizes=(256, 256),
        rng: np.random.Generator | None = None,
        low=-1.0,
        high=1.0,
    ) -> Policy:
        spec = DenseNetSpec(state_dim, tuple(hidden_sizes), 2 * action_dim)
        rng = np.random.default_rng() if rng is None else rng
        low = np.broadcast_to(np.asarray(low, dtype=np.float64), (action_dim,)).copy()
        high = np.broadcast_to(np.asarray(high, dtype=np.float64), (action_dim,)).copy()
        return cls(spec, init_params(spec, rng), low, high)

    @property
    def state_dim(self) -> int:
        return self.spec.input_dim

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim // 2

    @property
    def scale(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    @property
    def offset(self) -> np.ndarray:
        return 0.5 * (self.high + self.low)

    def with_params(self, params: ParamVector) -> Policy:
        return replace(self, params=params)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class PolicySample:
    """A reparameterised draw with the intermediates its gradient needs."""

    action: np.ndarray
    log_prob: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    clamp_mask: np.ndarray
    noise: np.ndarray
    pre_tanh: np.ndarray
    squashed: np.ndarray
    trace: object


def _head(policy: Policy, states: np.ndarray):
    out, trace = forward(policy.spec, policy.params, states)
    a = policy.action_dim
    mean, raw_log_std = out[..., :a], out[..., a:]
    mask = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    return mean, np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX), mask, trace


def sample_with_noise(policy: Policy, states: np.ndarray, noise: np.ndarray) -> PolicySample:
    """Draw actions for ``states`` using fixed standard-normal ``noise``."""
    mean, log_std, mask, trace = _head(policy, states)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mean.shape:
        raise InvalidArgumentError(f"noise shape {noise.shape} != action shape {mean.shape}")
    u = mean + np.exp(log_std) * noise
    t = np.tanh(u)
    action = policy.offset + policy.scale * t
    log_prob = (
        -0.5 * noise**2 - log_std - _HALF_LOG_2PI - log1m_tanh_sq(u) - np.log(policy.scale)
    ).sum(axis=-1)
    return PolicySample(action, log_prob, mean, log_std, mask, noise, u, t, trace)


def sample_action(policy: Policy, state, rng: np.random.Generator):
    """Sample ``(action, log_prob)`` for one state ``(S,)`` or a batch ``(B, S)``."""
    state = np.asarray(state, dtype=np.float64)
    shape = state.shape[:-1] + (policy.action_dim,)
    s = sample_with_noise(policy, state, rng.standard_normal(shape))
    return s.action, (float(s.log_prob) if s.log_prob.ndim == 0 else s.log_prob)


def deterministic_action(policy: Policy, state) -> np.ndarray:
    mean, _, _, _ = _head(policy, np.asarray(state, dtype=np.float64))
    return policy.offset + policy.scale * np.tanh(mean)


def critic_atoms(critic_spec: DenseNetSpec, critic_params: ParamVector, states, actions):
    """Atoms ``(N, B, M)`` of an ensemble of critics on ``concat(s, a)``."""
    x = np.concatenate([np.asarray(states, float), np.asarray(actions, float)], axis=-1)
    return forward(critic_spec, critic_params, x)


def policy_loss(
    critic_spec: DenseNetSpec,
    critic_params: ParamVector,
    policy: Policy,
    states: np.ndarray,
    alpha: float,
    noise: np.ndarray,
):
    """Entropy-penalised policy loss against the mean of all critic atoms.

    Returns ``(loss, grad, sample)`` where ``grad`` is d loss / d policy
    parameters with the reparameterisation ``noise`` held fixed. No atom is
    truncated here.
    """
    states = np.asarray(states, dtype=np.float64)
    batch = states.shape[0]
    smp = sample_with_noise(policy, states, noise)
    atoms, ctrace = critic_atoms(critic_spec, critic_params, states, smp.action)
    n_critics, _, n_atoms = atoms.shape
    q = atoms.mean(axis=(0, 2))
    loss = float(np.mean(alpha * smp.log_prob - q))

    upstream = np.full(atoms.shape, 1.0 / (n_critics * n_atoms))
    _, dx = backward(ctrace, upstream, return_input_grad=True)
    dq_da = dx[:, policy.state_dim :]

    t = smp.squashed
    dl_du = (alpha * 2.0 * t - dq_da * policy.scale * (1.0 - t * t)) / batch
    dl_dmean = dl_du
    dl_dlogstd = (-alpha / batch + dl_du * np.exp(smp.log_std) * smp.noise) * smp.clamp_mask
    grad = backward(smp.trace, np.concatenate([dl_dmean, dl_dlogstd], axis=-1))
    return loss, grad, smp


def target_entropy(action_dim: int) -> float:
    return -float(action_dim)


@dataclass(frozen=True)
class TemperatureState:
    log_alpha: float = 0.0
    target_entropy: float = -1.0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


def temperature_loss(log_probs, temp: TemperatureState) -> tuple[float, float]:
    """Loss ``mean(log_alpha * (-log_pi - H_T))`` and its derivative in log_alpha."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size == 0:
        raise InvalidArgumentError("temperature loss needs a nonempty batch")
    excess = -lp - temp.target_entropy
    grad = float(np.mean(excess))
    return temp.log_alpha * grad, grad


def temperature_step(log_probs, temp: TemperatureState, opt: AdamState):
    """One Adam descent step on ``log_alpha``."""
    _, grad = temperature_loss(log_probs, temp)
    new, opt = adam_step(np.array([temp.log_alpha]), np.array([grad]), opt)
    return replace(temp, log_alpha=float(new[0])), opt
