"""Environments: the single-state bandit-like MDP, a point mass, and a constant-reward stub.

Every environment exposes ``reset(rng) -> state`` and
``step(action, rng) -> (next_state, reward, done)``. ``done_is_terminal``
tells the learner whether ``done`` should stop bootstrapping; a time
limit is not a terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from tqc_lab.errors import EnvStateError, InvalidArgumentError


class Env(Protocol):
    state_dim: int
    action_dim: int
    low: np.ndarray
    high: np.ndarray
    done_is_terminal: bool

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, action, rng: np.random.Generator) -> tuple[np.ndarray, float, bool]: ...


TOY_A0 = 0.3
TOY_A1 = 0.9
TOY_NU = 5.0
TOY_SIGMA = 0.25
TOY_GAMMA = 0.99


def toy_mean_reward(a):
    """Cosine with slowly increasing amplitude on [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    if np.any((a < -1.0) | (a > 1.0)) or not np.all(np.isfinite(a)):
        raise InvalidArgumentError("toy actions must lie in [-1, 1]")
    out = (TOY_A0 + 0.5 * (TOY_A1 - TOY_A0) * (a + 1.0)) * np.cos(TOY_NU * a)
    return float(out) if out.ndim == 0 else out


def toy_sample_reward(a, rng: np.random.Generator, sigma: float = TOY_SIGMA):
    mean = toy_mean_reward(a)
    if sigma == 0.0:
        return mean
    noise = rng.normal(0.0, sigma, size=np.shape(mean))
    out = mean + noise
    return float(out) if np.ndim(out) == 0 else out


def _as_action(action, dim: int) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (dim,):
        raise InvalidArgumentError(f"expected action of dimension {dim}, got {action.shape}")
    return action


class SingleStateMDP:
    """One state, actions in [-1, 1], Gaussian reward around ``toy_mean_reward``. Never ends."""

    state_dim = 1
    action_dim = 1
    done_is_terminal = True

    def __init__(self, sigma: float = TOY_SIGMA, gamma: float = TOY_GAMMA):
        self.sigma = sigma
        self.gamma = gamma
        self.low = np.array([-1.0])
        self.high = np.array([1.0])

    def reset(self, rng):
        return np.zeros(1)

    def step(self, action, rng):
        a = float(np.clip(_as_action(action, 1)[0], -1.0, 1.0))
        return np.zeros(1), float(toy_sample_reward(a, rng, self.sigma)), False


@dataclass
class PointMassEnv:
    """x' = clip(x + 0.1 a, -1, 1) with reward -x^2 of the pre-step position."""

    horizon: int = 200
    step_size: float = 0.1

    state_dim = 1
    action_dim = 1
    done_is_terminal = False

    def __post_init__(self):
        self.low = np.array([-1.0])
        self.high = np.array([1.0])
        self._x = None
        self._t = 0

    def reset(self, rng, x0: float | None = None):
        self._x = float(rng.uniform(-1.0, 1.0)) if x0 is None else float(x0)
        self._t = 0
        return np.array([self._x])

    def step(self, action, rng):
        if self._x is None:
            raise EnvStateError("step called before reset or after the episode ended")
        a = float(np.clip(_as_action(action, 1)[0], -1.0, 1.0))
        reward = -self._x * self._x
        self._x = float(np.clip(self._x + self.step_size * a, -1.0, 1.0))
        self._t += 1
        state = np.array([self._x])
        done = self._t >= self.horizon
        if done:
            self._x = None
        return state, reward, done


@dataclass
class ConstantRewardEnv:
    """Fixed reward every step; the state is a random draw that carries no signal."""

    reward: float = 0.0
    horizon: int = 50
    state_dim: int = 1
    action_dim: int = 1

    done_is_terminal = False

    def __post_init__(self):
        self.low = -np.ones(self.action_dim)
        self.high = np.ones(self.action_dim)
        self._t = None

    def reset(self, rng):
        self._t = 0
        return rng.uniform(-1.0, 1.0, size=self.state_dim)

    def step(self, action, rng):
        if self._t is None:
            raise EnvStateError("step called before reset or after the episode ended")
        _as_action(action, self.action_dim)
        self._t += 1
        done = self._t >= self.horizon
        if done:
            self._t = None
        return rng.uniform(-1.0, 1.0, size=self.state_dim), float(self.reward), done


def pointmass_oracle_return(x0: float, gamma: float | None = None, horizon: int = 200,
                            step_size: float = 0.1) -> float:
    """Best achievable return from ``x0``: head for the origin at full speed.

    Undiscounted unless ``gamma`` is given.
    """
    x = float(x0)
    total = 0.0
    discount = 1.0
    for _ in range(horizon):
        total += discount * (-x * x)
        a = float(np.clip(-x / step_size, -1.0, 1.0))
        x = float(np.clip(x + step_size * a, -1.0, 1.0))
        if gamma is not None:
            discount *= gamma
        if x == 0.0:
            break
    return total


def pointmass_passive_return(x0: float, horizon: int = 200) -> float:
    """Return of the do-nothing policy, the reference for normalised scores."""
    return -horizon * float(x0) ** 2


ENVS = {
    "pointmass": PointMassEnv,
    "toy": SingleStateMDP,
    "constant": ConstantRewardEnv,
}


def make_env(name: str):
    try:
        return ENVS[name]()
    except KeyError:
        raise InvalidArgumentError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
