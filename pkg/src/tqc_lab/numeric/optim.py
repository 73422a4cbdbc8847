"""Adam and exponential-moving-average parameter tracking."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from tqc_lab.errors import InvalidArgumentError, NumericError
from tqc_lab.numeric.mlp import ParamVector


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, **hyper) -> AdamState:
        return cls(np.zeros(shape), np.zeros(shape), **hyper)

    @classmethod
    def for_params(cls, params: ParamVector | np.ndarray, **hyper) -> AdamState:
        data = params.data if isinstance(params, ParamVector) else np.asarray(params)
        return cls.zeros(data.shape, **hyper)


def _as_array(x):
    return x.data if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    Works on a :class:`ParamVector` or a plain array and returns the same
    kind of object together with the advanced state. Inputs are not mutated.
    """
    p = _as_array(params)
    g = _as_array(grads)
    if p.shape != g.shape or state.m.shape != p.shape:
        raise InvalidArgumentError(
            f"shape mismatch: params {p.shape}, grads {g.shape}, state {state.m.shape}"
        )
    finite = np.isfinite(g)
    if not finite.all():
        index = int(np.flatnonzero(~finite.ravel())[0])
        raise NumericError(f"non-finite gradient component at flat index {index}", index=index)

    t = state.t + 1
    m = state.beta1 * state.m
    m += (1.0 - state.beta1) * g
    v = state.beta2 * state.v
    v += (1.0 - state.beta2) * (g * g)
    # lr * m_hat / (sqrt(v_hat) + eps), computed in a single scratch buffer
    step = np.sqrt(v)
    step /= np.sqrt(1.0 - state.beta2**t)
    step += state.eps
    np.divide(m, step, out=step)
    step *= state.lr / (1.0 - state.beta1**t)
    new = p - step
    new_state = replace(state, m=m, v=v, t=t)
    if isinstance(params, ParamVector):
        return ParamVector(params.spec, new), new_state
    return new, new_state


def ema_update(target: ParamVector, online: ParamVector, beta: float) -> ParamVector:
    """Move ``target`` a fraction ``beta`` of the way toward ``online``."""
    if not 0.0 < beta <= 1.0:
        raise InvalidArgumentError(f"beta must lie in (0, 1], got {beta}")
    target.check_compatible(online)
    return ParamVector(target.spec, beta * online.data + (1.0 - beta) * target.data)
