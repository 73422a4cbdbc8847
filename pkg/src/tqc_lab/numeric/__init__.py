from tqc_lab.numeric.gradcheck import GradCheckReport, finite_diff_check, numeric_gradient
from tqc_lab.numeric.mlp import (
    DenseNetSpec,
    ParamVector,
    Trace,
    backward,
    forward,
    init_params,
    zero_params,
)
from tqc_lab.numeric.optim import AdamState, adam_step, ema_update

__all__ = [
    "AdamState",
    "DenseNetSpec",
    "GradCheckReport",
    "ParamVector",
    "Trace",
    "adam_step",
    "backward",
    "ema_update",
    "finite_diff_check",
    "forward",
    "init_params",
    "numeric_gradient",
    "zero_params",
]
