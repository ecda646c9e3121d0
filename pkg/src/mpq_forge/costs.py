"""Per-layer MAC counts, BitOps and weight payload size.

BitOps of a layer is ``macs * b_w * b_a``; bias adds and non-MAC ops are
ignored. Model size counts the quantized weight payload only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .models import CONV, LINEAR, Model


@dataclass(frozen=True)
class LayerCostStats:
    layer: int
    name: str
    kind: str
    macs: int
    params: int


@dataclass(frozen=True)
class Budget:
    bitops: Optional[int] = None
    size_bits: Optional[int] = None

    def __post_init__(self):
        if self.bitops is None and self.size_bits is None:
            raise ValueError("a budget needs a BitOps limit, a size limit, or both")
        for label, v in (("bitops", self.bitops), ("size_bits", self.size_bits)):
            if v is not None and (int(v) != v or v <= 0):
                raise ValueError(f"{label} limit must be a positive integer, got {v}")


def layer_stats(model: Model) -> list[LayerCostStats]:
    stats = []
    for i, (layer, (in_shape, out_shape)) in enumerate(zip(model.layers, model.trace_shapes())):
        if layer.kind == LINEAR:
            fan_in, fan_out = layer.weight.shape
            macs = fan_in * fan_out
        elif layer.kind == CONV:
            out_c, in_c, kh, kw = layer.weight.shape
            _, oh, ow = out_shape
            macs = oh * ow * out_c * in_c * kh * kw
        else:
            raise ValueError(f"unsupported layer kind {layer.kind!r}")
        stats.append(LayerCostStats(i, layer.name, layer.kind, int(macs), int(layer.params)))
    return stats


def bitops(stats: LayerCostStats, b_w: int, b_a: int) -> int:
    return stats.macs * int(b_w) * int(b_a)


def total_bitops(stats: Sequence[LayerCostStats], pairs: Sequence[tuple[int, int]]) -> int:
    if len(stats) != len(pairs):
        raise ValueError(f"{len(pairs)} bit pairs for {len(stats)} layers")
    return sum(bitops(s, bw, ba) for s, (bw, ba) in zip(stats, pairs))


def model_size_bits(stats: Sequence[LayerCostStats], weight_bits: Sequence[int]) -> int:
    if len(stats) != len(weight_bits):
        raise ValueError(f"{len(weight_bits)} weight bit-widths for {len(stats)} layers")
    return sum(s.params * int(b) for s, b in zip(stats, weight_bits))


def size_bytes(bits: int) -> int:
    return math.ceil(bits / 8)


def compression_rate(stats: Sequence[LayerCostStats], weight_bits: Sequence[int],
                     baseline_bits: int = 32) -> float:
    full = model_size_bits(stats, [baseline_bits] * len(stats))
    return full / model_size_bits(stats, weight_bits)


STATS_HEADER = "layer\tname\tkind\tmacs\tparams"


def dump_stats(stats: Sequence[LayerCostStats], path, exempt: Sequence[int] = ()) -> None:
    """Write stats as text. ``exempt`` lists layers pinned to the top bit option."""
    lines = ["# mpq-forge layer stats v1", f"# exempt = {','.join(str(l) for l in sorted(exempt))}",
             STATS_HEADER]
    lines += [f"{s.layer}\t{s.name}\t{s.kind}\t{s.macs}\t{s.params}" for s in stats]
    Path(path).write_text("\n".join(lines) + "\n")


def load_stats(path) -> list[LayerCostStats]:
    return load_stats_file(path)[0]


def load_stats_file(path) -> tuple[list[LayerCostStats], list[int]]:
    """Stats and the exempt layer indices recorded alongside them."""
    text = Path(path).read_text().splitlines()
    exempt: list[int] = []
    for ln in text:
        if ln.startswith("# exempt = "):
            value = ln[len("# exempt = "):].strip()
            exempt = [int(v) for v in value.split(",")] if value else []
    rows = [ln for ln in text if ln and not ln.startswith("#")]
    if not rows or rows[0] != STATS_HEADER:
        raise ValueError(f"{path}: not a layer stats file")
    stats = []
    for ln in rows[1:]:
        layer, name, kind, macs, params = ln.split("\t")
        stats.append(LayerCostStats(int(layer), name, kind, int(macs), int(params)))
    return stats, exempt
