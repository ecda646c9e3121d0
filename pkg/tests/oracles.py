"""Independent reference implementations used by the tests.

Nothing here calls into the package's own gradient or solver code.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    """Worst elementwise relative error, with ``floor`` guarding near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Boolean mask of entries at least ``margin`` from every value in ``points``."""
    ok = np.ones(x.shape, dtype=bool)
    for p in points:
        ok &= np.abs(x - p) >= margin
    return ok


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct seven-loop convolution (cross-correlation)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for r in range(oh):
                for col in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, ic, r * stride + i, col * stride + j] * w[oc, ic, i, j]
                    out[b, oc, r, col] = acc
    return out


def round_half_away_ref(u: float) -> int:
    """Scalar reference rounding using exact rational arithmetic."""
    from fractions import Fraction

    q = Fraction(u)
    mag = abs(q)
    whole = math.floor(mag)
    r = whole + (1 if mag - whole >= Fraction(1, 2) else 0)
    return r if q >= 0 else -r


def quant_ref(v: float, s: float, qmin: int, qmax: int) -> float:
    """Scalar clip-then-round quantizer evaluated independently of the package."""
    u = min(max(v / s, qmin), qmax)
    return round_half_away_ref(u) * s


def ste_surrogate(v: np.ndarray, s: float, s0: float, qmin: int, qmax: int, v0=None) -> np.ndarray:
    """Quantizer surrogate whose exact derivatives at ``(v0, s0)`` are the straight-through ones.

    Inside the grid the rounding residual ``round(u0) - u0`` is frozen at the
    base point, giving ``v + residual * s`` (slope 1 in v, residual in s); in
    the clip region the quantizer is already ``min_b * s`` or ``max_b * s``.
    ``v0`` defaults to ``v``.
    """
    v0 = v if v0 is None else v0
    u0 = v0 / s0
    r0 = np.array([round_half_away_ref(x) for x in u0.ravel()], dtype=np.float64).reshape(u0.shape) - u0
    inside = (u0 > qmin) & (u0 < qmax)
    return np.where(inside, v + r0 * s, np.where(u0 <= qmin, qmin * s, qmax * s))


def naive_ilp(importance, bitops, size_bits, allowed, bitops_limit, size_limit, maximize=False):
    """Enumerate every assignment with itertools; returns (choices, objective) or None.

    Order: objective (exactly rounded sum), then total BitOps, then the
    per-layer (i, j) sequence.
    """
    L, n, _ = importance.shape
    per_layer = [[(i, j) for i in range(n) for j in range(n) if allowed[l, i, j]] for l in range(L)]
    sign = -1.0 if maximize else 1.0
    best = None
    for choice in itertools.product(*per_layer):
        bo = sum(int(bitops[l, i, j]) for l, (i, j) in enumerate(choice))
        sz = sum(int(size_bits[l, i]) for l, (i, _) in enumerate(choice))
        if bitops_limit is not None and bo > bitops_limit:
            continue
        if size_limit is not None and sz > size_limit:
            continue
        obj = math.fsum(float(importance[l, i, j]) for l, (i, j) in enumerate(choice))
        key = (sign * obj, bo, choice)
        if best is None or key < best[0]:
            best = (key, obj)
    if best is None:
        return None
    return best[0][2], best[1]


def knapsack_dp(importance: np.ndarray, unit_costs: np.ndarray, capacity: int, maximize: bool = False) -> float:
    """Optimal objective of the multiple-choice knapsack by dynamic programming over integer costs.

    ``unit_costs[l, i, j]`` are non-negative integers; runtime is O(L * n^2 * capacity).
    """
    L = importance.shape[0]
    worst = -np.inf if maximize else np.inf
    best = np.full(capacity + 1, worst)
    best[0] = 0.0
    for l in range(L):
        nxt = np.full(capacity + 1, worst)
        for v, c in zip(importance[l].ravel(), unit_costs[l].ravel()):
            c = int(c)
            if c > capacity:
                continue
            cand = np.full(capacity + 1, worst)
            cand[c:] = best[:capacity + 1 - c] + v
            nxt = np.maximum(nxt, cand) if maximize else np.minimum(nxt, cand)
        best = nxt
    return float(best.max() if maximize else best.min())
