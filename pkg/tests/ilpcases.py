"""Seeded random ILP instances and a ResNet18-shaped instance."""

from __future__ import annotations

import numpy as np

from mpq_forge.allocator import IlpInstance
from mpq_forge.costs import Budget

ORACLE_LIMIT = 10 ** 7


def random_instance(rng: np.random.Generator, L: int, n: int, both: bool = False, pinned: bool = False):
    """Importances in (0, 1), random layer sizes and a feasible random budget."""
    importance = rng.uniform(0.0, 1.0, (L, n, n))
    bits = np.sort(rng.choice(np.arange(2, 9), n, replace=False))
    macs = rng.integers(1, 1000, L)
    params = rng.integers(1, 1000, L)
    bo = macs[:, None, None] * bits[None, :, None] * bits[None, None, :]
    sz = params[:, None] * bits[None, :]
    allowed = np.ones((L, n, n), dtype=bool)
    if pinned and L > 1:
        l = int(rng.integers(L))
        allowed[l] = False
        allowed[l, n - 1, n - 1] = True
    lo = sum(bo[l][allowed[l]].min() for l in range(L))
    hi = sum(bo[l][allowed[l]].max() for l in range(L))
    size = None
    if both:
        slo = sum(sz[l][allowed[l].any(axis=1)].min() for l in range(L))
        shi = sum(sz[l][allowed[l].any(axis=1)].max() for l in range(L))
        size = int(rng.integers(slo, shi + 1))
    budget = Budget(bitops=int(rng.integers(lo, hi + 1)), size_bits=size)
    return IlpInstance([f"l{k}" for k in range(L)], bits, importance, bo, sz, budget, allowed)


def oracle_suite(seed: int, count: int = 200):
    """``count`` instances with L <= 6, n <= 4 small enough for exhaustive search."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        while True:
            L, n = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            if n ** (2 * L) <= ORACLE_LIMIT:
                break
        out.append(random_instance(rng, L, n, both=k % 3 == 0, pinned=k % 5 == 0))
    return out


# The 19 searched weight layers of ResNet18 at 224x224: 16 residual-block 3x3 convs and the 3
# downsampling 1x1 shortcut convs (stem and classifier held at high precision, as is common).
_BLOCK_MACS = [115_605_504] * 4 + [57_802_752] + [115_605_504] * 3 \
    + [57_802_752] + [115_605_504] * 3 + [57_802_752] + [115_605_504] * 3
_BLOCK_PARAMS = [36_864] * 4 + [73_728] + [147_456] * 3 + [294_912] + [589_824] * 3 \
    + [1_179_648] + [2_359_296] * 3
RESNET18_MACS = _BLOCK_MACS + [6_422_528] * 3
RESNET18_PARAMS = _BLOCK_PARAMS + [8_192, 32_768, 131_072]
RESNET18_BITS = (2, 3, 4, 5, 8)


def resnet18_instance(seed: int, structured: bool = True) -> IlpInstance:
    """L=19, n=5 (25 combos per layer), BitOps budget at the uniform 3-bit level."""
    rng = np.random.default_rng(seed)
    L, bits = len(RESNET18_MACS), np.array(RESNET18_BITS)
    if structured:
        # indicator-like values: shrinking with bit-width, per-layer sensitivity, small noise
        decay = 1.0 / np.sqrt(2.0 ** bits)
        sw = rng.uniform(0.05, 0.2, (L, 1)) * decay * rng.uniform(0.9, 1.1, (L, 5))
        sa = rng.uniform(0.1, 0.6, (L, 1)) * decay * rng.uniform(0.9, 1.1, (L, 5))
        importance = sa[:, None, :] + sw[:, :, None]
    else:
        importance = rng.uniform(0.0, 1.0, (L, 5, 5))
    macs = np.array(RESNET18_MACS, dtype=np.int64)
    params = np.array(RESNET18_PARAMS, dtype=np.int64)
    bo = macs[:, None, None] * bits[None, :, None] * bits[None, None, :]
    sz = params[:, None] * bits[None, :]
    return IlpInstance([f"layer{k}" for k in range(L)], bits, importance, bo, sz,
                       Budget(bitops=int(9 * macs.sum())))
