"""Dense ReLU networks with hand-written reverse-mode differentiation.

Parameters live in one flat float64 array per network. A leading axis on
that array turns a single network into an ensemble of identically shaped
networks that are evaluated with one batched matmul per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tqc_lab.errors import (
    InputShapeError,
    InvalidArgumentError,
    LayoutMismatchError,
    TraceConsumedError,
)


@dataclass(frozen=True)
class DenseNetSpec:
    """Shape of a fully connected net: ReLU on hidden layers, identity output."""

    input_dim: int
    hidden_sizes: tuple[int, ...] = ()
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        sizes = (self.input_dim, *self.hidden_sizes, self.output_dim)
        if any(int(s) != s or s < 1 for s in sizes):
            raise InvalidArgumentError(f"layer sizes must be positive integers, got {sizes}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_sizes, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)

    def slices(self) -> list[tuple[slice, slice]]:
        """(weight, bias) slices of the flat layout, layer by layer."""
        out = []
        offset = 0
        for fan_in, fan_out in self.layer_shapes:
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            out.append((w, b))
        return out


@dataclass
class ParamVector:
    """Flat parameters of one network, shape ``(P,)``, or an ensemble, ``(E, P)``."""

    spec: DenseNetSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim not in (1, 2) or self.data.shape[-1] != self.spec.num_params:
            raise LayoutMismatchError(
                f"expected (..., {self.spec.num_params}) parameters, got {self.data.shape}"
            )

    @property
    def ensemble_size(self) -> int | None:
        return self.data.shape[0] if self.data.ndim == 2 else None

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Weight ``(..., fan_in, fan_out)`` and bias ``(..., fan_out)`` views."""
        lead = self.data.shape[:-1]
        return [
            (
                self.data[..., ws].reshape(*lead, fan_in, fan_out),
                self.data[..., bs],
            )
            for (ws, bs), (fan_in, fan_out) in zip(self.spec.slices(), self.spec.layer_shapes)
        ]

    @classmethod
    def from_layers(
        cls, spec: DenseNetSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]
    ) -> ParamVector:
        if len(layers) != len(spec.layer_shapes):
            raise LayoutMismatchError(
                f"spec has {len(spec.layer_shapes)} layers, got {len(layers)}"
            )
        lead = np.shape(layers[0][1])[:-1]
        data = np.empty((*lead, spec.num_params))
        for (w, b), (ws, bs), shape in zip(layers, spec.slices(), spec.layer_shapes):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (*lead, *shape) or b.shape != (*lead, shape[1]):
                raise LayoutMismatchError(f"layer of shape {w.shape} does not match {shape}")
            data[..., ws] = w.reshape(*lead, -1)
            data[..., bs] = b
        return cls(spec, data)

    @classmethod
    def stack(cls, members: Sequence[ParamVector]) -> ParamVector:
        spec = members[0].spec
        if any(m.spec != spec or m.data.ndim != 1 for m in members):
            raise LayoutMismatchError("can only stack single networks with one spec")
        return cls(spec, np.stack([m.data for m in members]))

    def member(self, index: int) -> ParamVector:
        if self.data.ndim != 2:
            raise LayoutMismatchError("not an ensemble")
        return ParamVector(self.spec, self.data[index].copy())

    def copy(self) -> ParamVector:
        return ParamVector(self.spec, self.data.copy())

    def zeros_like(self) -> ParamVector:
        return ParamVector(self.spec, np.zeros_like(self.data))

    def check_compatible(self, other: ParamVector) -> None:
        if self.spec != other.spec or self.data.shape != other.data.shape:
            raise LayoutMismatchError(
                f"layout mismatch: {self.spec}/{self.data.shape} vs {other.spec}/{other.data.shape}"
            )


def init_params(
    spec: DenseNetSpec, rng: np.random.Generator, ensemble: int | None = None
) -> ParamVector:
    """Weights and biases uniform in +-1/sqrt(fan_in), drawn layer by layer."""
    lead = () if ensemble is None else (ensemble,)
    layers = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(*lead, fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(*lead, fan_out))
        layers.append((w, b))
    return ParamVector.from_layers(spec, layers)


def zero_params(spec: DenseNetSpec, ensemble: int | None = None) -> ParamVector:
    lead = () if ensemble is None else (ensemble,)
    return ParamVector(spec, np.zeros((*lead, spec.num_params)))


@dataclass
class Trace:
    """Everything one backward pass needs; usable exactly once."""

    params: ParamVector
    layer_inputs: list[np.ndarray]
    masks: list[np.ndarray]
    input_shape: tuple[int, ...]
    squeezed: bool
    output_shape: tuple[int, ...]
    consumed: bool = field(default=False)


def forward(
    spec: DenseNetSpec, params: ParamVector, x: np.ndarray
) -> tuple[np.ndarray, Trace]:
    """Evaluate the network and record a trace for :func:`backward`.

    ``x`` may be a single input ``(in,)``, a batch ``(B, in)`` or, for
    ensembles, one batch per member ``(E, B, in)``. Ensemble outputs carry
    the member axis first.
    """
    if params.spec != spec:
        raise LayoutMismatchError("parameters were built for a different spec")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != spec.input_dim:
        raise InputShapeError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    max_ndim = 3 if params.ensemble_size is not None else 2
    if x.ndim > max_ndim:
        raise InputShapeError(f"input of shape {x.shape} has too many axes")
    if x.ndim == 3 and x.shape[0] != params.ensemble_size:
        raise InputShapeError(
            f"per-member input has {x.shape[0]} members, ensemble has {params.ensemble_size}"
        )
    squeezed = x.ndim == 1
    h = x[None, :] if squeezed else x

    layers = params.layers()
    layer_inputs, masks = [], []
    for i, (w, b) in enumerate(layers):
        layer_inputs.append(h)
        z = h @ w
        z += b[..., None, :]
        if i < len(layers) - 1:
            masks.append(z > 0)
            np.maximum(z, 0.0, out=z)
        h = z
    out = h[..., 0, :] if squeezed else h
    trace = Trace(params, layer_inputs, masks, x.shape, squeezed, out.shape)
    return out, trace


def backward(
    trace: Trace, upstream_grad: np.ndarray, return_input_grad: bool = False
) -> ParamVector | tuple[ParamVector, np.ndarray]:
    """Pull ``upstream_grad`` (d loss / d output) back to the parameters.

    With ``return_input_grad`` the gradient with respect to the network input
    is returned as well, summed over ensemble members when the input was
    shared between them.
    """
    if trace.consumed:
        raise TraceConsumedError("trace already used by a backward pass")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != trace.output_shape:
        raise InputShapeError(
            f"upstream gradient shape {g.shape} != output shape {trace.output_shape}"
        )
    trace.consumed = True
    if trace.squeezed:
        g = g[..., None, :]

    params = trace.params
    layers = params.layers()
    grad = params.zeros_like()
    slices = params.spec.slices()
    lead = params.data.shape[:-1]
    for i in range(len(layers) - 1, -1, -1):
        h_in = trace.layer_inputs[i]
        w, _ = layers[i]
        dw = np.swapaxes(h_in, -1, -2) @ g
        db = g.sum(axis=-2)
        ws, bs = slices[i]
        grad.data[..., ws] = dw.reshape(*lead, -1)
        grad.data[..., bs] = db
        if i > 0 or return_input_grad:
            g = g @ np.swapaxes(w, -1, -2)
            if i > 0:
                g *= trace.masks[i - 1]

    if not return_input_grad:
        return grad
    dx = g
    if params.ensemble_size is not None and len(trace.input_shape) < 3:
        dx = dx.sum(axis=0)
    return grad, dx.reshape(trace.input_shape)
