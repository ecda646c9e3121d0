"""Joint training of bit-specific scale factors used as layer importance indicators.

Every quantized layer owns one weight scale and one activation scale per bit
option, ``2 * L * n`` in total. One atomic update runs ``n`` passes with the
whole network at a uniform bit-width ``b_k`` followed by one pass with a
random per-layer assignment, accumulating gradients, and then takes a single
optimizer step with the gradients averaged over the ``n + 1`` passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .models import Model
from .quantizer import (
    ACTIVATIONS,
    WEIGHTS,
    QuantSpec,
    ScaleFactor,
    init_scale_statistics,
    init_scale_uniform,
)

STATISTICS = "statistics"
UNIFORM = "uniform"

# Seeds are split into independent streams so toggling one knob leaves the others alone.
DATA_STREAM = 0
ASSIGN_STREAM = 1


class DivergenceError(RuntimeError):
    pass


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), which])


def check_bits(bits: Sequence[int]) -> tuple[int, ...]:
    bits = tuple(int(b) for b in bits)
    if not bits:
        raise ValueError("bit option list is empty")
    if any(b < 2 for b in bits) or any(a >= b for a, b in zip(bits, bits[1:])):
        raise ValueError(f"bit options must be strictly increasing integers >= 2, got {bits}")
    return bits


class ScaleBank:
    """``weight[l][i]`` and ``act[l][i]`` scale factors for layer ``l`` and bit ``bits[i]``."""

    def __init__(self, bits: Sequence[int], weight: list[list[ScaleFactor]], act: list[list[ScaleFactor]]):
        self.bits = check_bits(bits)
        if len(weight) != len(act):
            raise ValueError("weight and activation banks cover different layer counts")
        self.weight = weight
        self.act = act

    @property
    def num_layers(self) -> int:
        return len(self.weight)

    def __len__(self) -> int:
        return sum(len(r) for r in self.weight) + sum(len(r) for r in self.act)

    @classmethod
    def _empty(cls, num_layers: int, bits: Sequence[int]) -> "ScaleBank":
        bits = check_bits(bits)
        weight = [[ScaleFactor(1.0, l, QuantSpec(b, WEIGHTS)) for b in bits] for l in range(num_layers)]
        act = [[ScaleFactor(1.0, l, QuantSpec(b, ACTIVATIONS)) for b in bits] for l in range(num_layers)]
        return cls(bits, weight, act)

    @classmethod
    def uniform(cls, model: Model, bits: Sequence[int]) -> "ScaleBank":
        bank = cls._empty(len(model.layers), bits)
        for sf in bank.factors():
            sf.value = init_scale_uniform(sf.spec)
        return bank

    @classmethod
    def statistics(cls, model: Model, bits: Sequence[int], x: np.ndarray) -> "ScaleBank":
        """Initialise from weight statistics and from activations of the batch ``x``.

        Activation scales come from one full-precision forward pass, so every
        bit option of a layer starts from the same input statistics and differs
        only through its grid size.
        """
        bank = cls._empty(len(model.layers), bits)
        for l, layer in enumerate(model.layers):
            for sf in bank.weight[l]:
                sf.value = init_scale_statistics(layer.weight.data, sf.spec)

        def init_act(l, xin):
            for sf in bank.act[l]:
                sf.value = init_scale_statistics(xin, sf.spec)

        with T.no_grad():
            model.forward(x, None, on_input=init_act)
        return bank

    def factors(self) -> list[ScaleFactor]:
        return [sf for row in self.weight for sf in row] + [sf for row in self.act for sf in row]

    def parameters(self) -> list[T.Tensor]:
        return [sf.param for sf in self.factors()]

    def quant_pairs(self, assignment: Sequence[tuple[int, int]]):
        if len(assignment) != self.num_layers:
            raise ValueError(f"assignment covers {len(assignment)} layers, bank has {self.num_layers}")
        return [(self.weight[l][i], self.act[l][j]) for l, (i, j) in enumerate(assignment)]

    def clamp(self) -> None:
        for sf in self.factors():
            sf.clamp()

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        w = np.array([[sf.value for sf in row] for row in self.weight])
        a = np.array([[sf.value for sf in row] for row in self.act])
        return w, a


@dataclass(frozen=True)
class IndicatorReport:
    bits: tuple
    layer_names: tuple
    weight: tuple  # weight[l][i]
    act: tuple  # act[l][j]
    seed: int = 0
    steps: int = 0
    init: str = STATISTICS
    loss_curve: tuple = field(default=(), compare=False)

    @classmethod
    def from_bank(cls, bank: ScaleBank, layer_names, **meta) -> "IndicatorReport":
        w, a = bank.values()
        return cls(
            bits=tuple(bank.bits),
            layer_names=tuple(layer_names),
            weight=tuple(tuple(float(v) for v in row) for row in w),
            act=tuple(tuple(float(v) for v in row) for row in a),
            **meta,
        )

    def to_text(self) -> str:
        lines = [
            "# mpq-forge indicator report v1",
            f"# seed = {self.seed}",
            f"# steps = {self.steps}",
            f"# init = {self.init}",
            f"# bits = {','.join(map(str, self.bits))}",
            f"# layers = {','.join(self.layer_names)}",
            f"# loss_curve = {','.join(repr(x) for x in self.loss_curve)}",
            "layer\tname\tkind\tbit\tvalue",
        ]
        for l, name in enumerate(self.layer_names):
            for kind, table in (("w", self.weight), ("a", self.act)):
                for b, v in zip(self.bits, table[l]):
                    lines.append(f"{l}\t{name}\t{kind}\t{b}\t{v!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "IndicatorReport":
        meta: dict[str, str] = {}
        rows = []
        for ln in Path(path).read_text().splitlines():
            if ln.startswith("# ") and " = " in ln:
                key, _, value = ln[2:].partition(" = ")
                meta[key] = value
            elif ln and not ln.startswith("#") and not ln.startswith("layer\t"):
                rows.append(ln.split("\t"))
        try:
            bits = tuple(int(b) for b in meta["bits"].split(","))
            names = tuple(meta["layers"].split(","))
        except KeyError as e:
            raise ValueError(f"{path}: indicator report header lacks {e}") from None
        L, n = len(names), len(bits)
        tables = {"w": [[None] * n for _ in range(L)], "a": [[None] * n for _ in range(L)]}
        for layer, name, kind, b, v in rows:
            l = int(layer)
            if names[l] != name:
                raise ValueError(f"{path}: layer {l} named {name!r}, header says {names[l]!r}")
            tables[kind][l][bits.index(int(b))] = float(v)
        if any(v is None for t in tables.values() for row in t for v in row):
            raise ValueError(f"{path}: indicator report is missing entries")
        curve = meta.get("loss_curve", "")
        return cls(
            bits=bits,
            layer_names=names,
            weight=tuple(tuple(r) for r in tables["w"]),
            act=tuple(tuple(r) for r in tables["a"]),
            seed=int(meta.get("seed", 0)),
            steps=int(meta.get("steps", 0)),
            init=meta.get("init", STATISTICS),
            loss_curve=tuple(float(x) for x in curve.split(",")) if curve else (),
        )


def importance_table(report: IndicatorReport, alpha: float) -> np.ndarray:
    """``table[l, i, j] = act[l][j] + alpha * weight[l][i]``."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    w = np.asarray(report.weight, dtype=np.float64)
    a = np.asarray(report.act, dtype=np.float64)
    return a[:, None, :] + alpha * w[:, :, None]


@dataclass
class IndicatorConfig:
    steps: int = 300
    lr: float = 0.01
    scale_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    data_fraction: float = 0.5
    init: str = STATISTICS
    cosine: bool = True
    grad_scale: bool = True


@dataclass
class StepMetrics:
    loss: float
    passes: int
    random_assignment: list


PassHook = Callable[[int, list], None]


def atomic_update_step(model: Model, bank: ScaleBank, batch, optimizer: T.SGD,
                       rng: np.random.Generator, on_pass: Optional[PassHook] = None) -> StepMetrics:
    """``n`` uniform-bit passes and one random-assignment pass, then one update."""
    x, y = batch
    n = len(bank.bits)
    if n == 0:
        raise ValueError("bit option list is empty")
    if len(x) != len(y):
        raise ValueError(f"batch has {len(x)} inputs but {len(y)} labels")
    L = bank.num_layers
    losses = []
    for k in range(n + 1):
        if k < n:
            assignment = [(k, k)] * L
        else:
            w_idx = rng.integers(n, size=L)
            a_idx = rng.integers(n, size=L)
            assignment = [(int(i), int(j)) for i, j in zip(w_idx, a_idx)]
        if on_pass is not None:
            on_pass(k, assignment)
        logits = model.forward(x, bank.quant_pairs(assignment))
        loss = T.softmax_cross_entropy(logits, y)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite loss in pass {k}")
        T.backward(loss)
        losses.append(float(loss.data))
    for p in optimizer.params:
        if p.grad is not None:
            p.grad = p.grad / (n + 1)
    optimizer.step()
    bank.clamp()
    return StepMetrics(float(np.mean(losses)), n + 1, assignment)


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Endless reshuffled minibatches; the last partial batch of each epoch is dropped."""
    n = len(x)
    if n == 0:
        raise ValueError("empty dataset")
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            idx = perm[i:i + batch_size]
            yield x[idx], y[idx]


def cosine_factor(step: int, total: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def make_bank(model: Model, bits: Sequence[int], dataset, config: IndicatorConfig) -> ScaleBank:
    if config.init == UNIFORM:
        return ScaleBank.uniform(model, bits)
    if config.init != STATISTICS:
        raise ValueError(f"unknown init scheme {config.init!r}")
    x, _ = next(batches(*training_subset(dataset, config), config.batch_size, stream(config.seed, DATA_STREAM)))
    return ScaleBank.statistics(model, bits, x)


def training_subset(dataset, config: IndicatorConfig):
    n = len(dataset.train_y)
    keep = max(1, math.ceil(config.data_fraction * n))
    idx = np.sort(np.random.default_rng([config.seed, 2]).permutation(n)[:keep])
    return dataset.train_x[idx], dataset.train_y[idx]


def train_indicators(model: Model, bank: ScaleBank, dataset, config: IndicatorConfig,
                     on_pass: Optional[PassHook] = None) -> IndicatorReport:
    """Jointly train every indicator in ``bank``; ``model`` itself is left untouched."""
    if not 0 < config.data_fraction <= 1:
        raise ValueError(f"data fraction must be in (0, 1], got {config.data_fraction}")
    work = model.clone()
    work.grad_scale = config.grad_scale
    opt = T.SGD(
        [
            {"params": work.parameters()},
            {"params": bank.parameters(), "lr": config.scale_lr, "weight_decay": 0.0},
        ],
        lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
    )
    x, y = training_subset(dataset, config)
    data = batches(x, y, config.batch_size, stream(config.seed, DATA_STREAM))
    assign_rng = stream(config.seed, ASSIGN_STREAM)
    curve = []
    for step in range(config.steps):
        if config.cosine:
            opt.scale_lr(cosine_factor(step, config.steps))
        metrics = atomic_update_step(work, bank, next(data), opt, assign_rng, on_pass)
        curve.append(metrics.loss)
    return IndicatorReport.from_bank(
        bank, model.layer_names, seed=config.seed, steps=config.steps, init=config.init,
        loss_curve=tuple(curve),
    )
