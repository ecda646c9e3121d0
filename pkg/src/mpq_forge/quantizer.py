"""Uniform fake quantization with a learnable step size.

``Q_b(v; s) = round(clip(v / s, min_b, max_b)) * s``

The backward pass is the straight-through estimator: rounding is treated as
identity inside the clip range, and the step-size gradient follows the
learned-step-size rule with the ``1 / sqrt(N * max_b)`` gradient scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, parameter, record

WEIGHTS = "weights"
ACTIVATIONS = "activations"
# Any bit-width at or above this is treated as full precision (quantizer bypassed).
FULL_PRECISION = 32
MIN_SCALE = 1e-6
STATS_FALLBACK_SCALE = 1e-3


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    kind: str

    def __post_init__(self):
        if self.kind not in (WEIGHTS, ACTIVATIONS):
            raise ValueError(f"kind must be {WEIGHTS!r} or {ACTIVATIONS!r}, got {self.kind!r}")
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bit-width must be an integer >= 2, got {self.bits}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.kind == WEIGHTS else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.kind == WEIGHTS else 2 ** self.bits - 1

    @property
    def bypass(self) -> bool:
        return self.bits >= FULL_PRECISION


class ScaleFactor:
    """A learnable positive step size owned by one layer and one QuantSpec."""

    def __init__(self, value: float, layer: int, spec: QuantSpec, name: Optional[str] = None):
        if not value > 0:
            raise ValueError(f"scale factor must be positive, got {value}")
        self.param = parameter(np.array(float(value)), name=name or f"s[{layer}]{spec.kind[0]}{spec.bits}")
        self.layer = layer
        self.spec = spec
        self.uses = 0

    @property
    def value(self) -> float:
        return float(self.param.data)

    @value.setter
    def value(self, v: float) -> None:
        if not v > 0:
            raise ValueError(f"scale factor must be positive, got {v}")
        self.param.data = np.array(float(v))

    def clamp(self, floor: float = MIN_SCALE) -> None:
        if not self.param.data >= floor:
            self.param.data = np.array(floor)

    def __repr__(self) -> str:
        return f"ScaleFactor(layer={self.layer}, {self.spec.kind}, b={self.spec.bits}, s={self.value:.6g})"


def round_half_away(x: np.ndarray) -> np.ndarray:
    # floor(|x| + 0.5) misrounds 0.49999999999999994; compare the fraction instead.
    ax = np.abs(x)
    r = np.floor(ax)
    return np.sign(x) * (r + ((ax - r) >= 0.5))


def _check_scale(s: float) -> float:
    s = float(s)
    if not s > 0:
        raise ValueError(f"quantizer scale must be positive, got {s}")
    return s


def quantize_integer(v, s: float, spec: QuantSpec) -> np.ndarray:
    """Integer grid codes ``round(clip(v / s))``."""
    s = _check_scale(s)
    return round_half_away(np.clip(np.asarray(v, dtype=np.float64) / s, spec.qmin, spec.qmax))


def quantize_forward(v, s: float, spec: QuantSpec) -> np.ndarray:
    return quantize_integer(v, s, spec) * float(s)


def step_grad_scale(n_elements: int, spec: QuantSpec) -> float:
    return 1.0 / math.sqrt(n_elements * spec.qmax)


def quantize_backward(upstream, v, s: float, spec: QuantSpec, grad_scale: bool = True):
    """Return ``(grad_v, grad_s)`` for upstream gradient ``upstream``."""
    s = _check_scale(s)
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    u = v / s
    lo, hi = spec.qmin, spec.qmax
    inside = (u > lo) & (u < hi)
    grad_v = np.where(inside, upstream, 0.0)
    dq_ds = np.where(u <= lo, float(lo), np.where(u >= hi, float(hi), round_half_away(u) - u))
    grad_s = float(np.sum(upstream * dq_ds))
    if grad_scale:
        grad_s *= step_grad_scale(v.size, spec)
    return grad_v, grad_s


def fake_quant(v: Tensor, scale: Tensor, spec: QuantSpec, grad_scale: bool = True) -> Tensor:
    """Differentiable quantize-dequantize of ``v`` with scalar step ``scale``."""
    s = _check_scale(scale.data)
    vd = v.data
    out = quantize_forward(vd, s, spec)

    def backward_fn(g):
        gv, gs = quantize_backward(g, vd, s, spec, grad_scale)
        return gv, np.array(gs)

    return record("fake_quant", out, (v, scale), backward_fn)


def init_scale_statistics(w, spec: QuantSpec) -> float:
    """``2 * mean(|w|) / sqrt(max_b)``, or a small fallback for all-zero input."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot initialise a scale from an empty tensor")
    m = float(np.mean(np.abs(w)))
    if m == 0.0:
        return STATS_FALLBACK_SCALE
    return 2.0 * m / math.sqrt(spec.qmax)


def init_scale_uniform(spec: QuantSpec) -> float:
    return 0.1 / spec.bits
