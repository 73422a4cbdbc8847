"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from tqc_lab.numeric.mlp import DenseNetSpec, ParamVector

LossFn = Callable[[ParamVector], "tuple[float, ParamVector]"]


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def finite_diff_check(
    spec: DenseNetSpec,
    params: ParamVector,
    loss_fn: LossFn,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient to central differences.

    ``loss_fn(params)`` returns ``(loss, grad)``; only the loss is used for
    the numeric side.
    """
    _, analytic = loss_fn(params)
    analytic = np.asarray(analytic.data, dtype=np.float64)

    def scalar(data):
        return float(loss_fn(ParamVector(spec, data))[0])

    numeric = numeric_gradient(scalar, params.data, step)
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err)) if err.size else 0
    return GradCheckReport(float(err.max(initial=0.0)), worst, analytic, numeric, tolerance)
