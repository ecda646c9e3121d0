"""End-to-end stages: pretrain, indicator training, search, fine-tuning, evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .allocator import Infeasible, Policy, uniform_policy
from .config import ConfigError, RunConfig, dump_config
from .costs import dump_stats, layer_stats
from .data import DatasetHandle, load_idx_dataset, synth_dataset
from .indicators import (
    DivergenceError,
    IndicatorConfig,
    batches,
    cosine_factor,
    make_bank,
    stream,
    train_indicators,
)
from .models import Model, QuantPair, accuracy, build_model
from .quantizer import ACTIVATIONS, WEIGHTS, QuantSpec, ScaleFactor, init_scale_statistics
from .search import pinned_combos, resolve_budget, search_files

log = logging.getLogger(__name__)

PRETRAIN_STREAM = 3
FINETUNE_STREAM = 4


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def load_dataset(cfg: RunConfig) -> DatasetHandle:
    d = cfg.data
    if d.source == "synthetic":
        return synth_dataset(d.classes, d.samples, d.input_shape, seed=d.seed,
                             val_samples=d.val_samples, noise=d.noise)
    for key in ("train_images", "train_labels", "val_images", "val_labels"):
        path = getattr(d, key)
        if path and not Path(path).exists():
            raise FileNotFoundError(f"data.{key}: {path} does not exist")
    return load_idx_dataset(d.train_images, d.train_labels, d.val_images or None, d.val_labels or None,
                            classes=d.classes)


def make_model(cfg: RunConfig, dataset: DatasetHandle, seed: int) -> Model:
    kwargs = {}
    if cfg.run.width:
        kwargs["width" if cfg.run.model == "cnn" else "hidden"] = cfg.run.width
    model = build_model(cfg.run.model, dataset.input_shape, dataset.classes, seed=seed, **kwargs)
    if cfg.run.exempt_first_last is not None:
        model.exempt_first_last = cfg.run.exempt_first_last
    return model


def _sgd_loop(model: Model, pairs, params_groups, section, dataset: DatasetHandle, rng, cosine: bool):
    opt = T.SGD(params_groups, lr=section.lr, momentum=section.momentum, weight_decay=section.weight_decay)
    data = batches(dataset.train_x, dataset.train_y, section.batch_size, rng)
    curve = []
    scales = [sf for pair in (pairs or []) for sf in pair if sf is not None]
    for step in range(section.steps):
        if cosine:
            opt.scale_lr(cosine_factor(step, section.steps))
        x, y = next(data)
        loss = T.softmax_cross_entropy(model.forward(x, pairs), y)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite loss at step {step}")
        T.backward(loss)
        opt.step()
        for sf in scales:
            sf.clamp()
        curve.append(float(loss.data))
    return curve


def pretrain(model: Model, dataset: DatasetHandle, cfg: RunConfig, seed: int) -> dict:
    """Full-precision training of ``model`` in place."""
    curve = _sgd_loop(model, None, model.parameters(), cfg.pretrain, dataset,
                      stream(seed, PRETRAIN_STREAM), cosine=True)
    return {"top1": accuracy(model, dataset.val_x, dataset.val_y), "final_loss": curve[-1] if curve else None}


def policy_pairs(model: Model, policy: Policy, x: np.ndarray) -> list[QuantPair]:
    """Fresh statistics-initialised scales for the policy's fixed bits; 32+ bits bypasses."""
    if len(policy.bits) != len(model.layers):
        raise ValueError(f"policy covers {len(policy.bits)} layers, model has {len(model.layers)}")
    pairs: list[list] = []
    for l, (layer, (bw, ba)) in enumerate(zip(model.layers, policy.bits)):
        w_spec, a_spec = QuantSpec(bw, WEIGHTS), QuantSpec(ba, ACTIVATIONS)
        w_sf = a_sf = None
        if not w_spec.bypass:
            w_sf = ScaleFactor(init_scale_statistics(layer.weight.data, w_spec), l, w_spec)
        if not a_spec.bypass:
            a_sf = ScaleFactor(1.0, l, a_spec)
        pairs.append([w_sf, a_sf])

    def init_act(l, xin):
        sf = pairs[l][1]
        if sf is not None:
            sf.value = init_scale_statistics(xin, sf.spec)

    with T.no_grad():
        model.forward(x, [tuple(p) for p in pairs], on_input=init_act)
    return [tuple(p) for p in pairs]


@dataclass
class FinetuneResult:
    top1: float
    model: Model
    pairs: list
    loss_curve: list = field(default_factory=list)


def finetune_with_policy(model: Model, policy: Policy, dataset: DatasetHandle, cfg: RunConfig,
                         seed: int) -> FinetuneResult:
    """QAT at the policy's fixed bits, training weights and per-layer scales. ``model`` is not modified."""
    work = model.clone()
    rng = stream(seed, FINETUNE_STREAM)
    x0, _ = next(batches(dataset.train_x, dataset.train_y, cfg.finetune.batch_size, stream(seed, FINETUNE_STREAM)))
    pairs = policy_pairs(work, policy, x0)
    scales = [sf.param for pair in pairs for sf in pair if sf is not None]
    groups = [{"params": work.parameters()}]
    if scales:
        groups.append({"params": scales, "lr": cfg.finetune.scale_lr, "weight_decay": 0.0})
    curve = _sgd_loop(work, pairs, groups, cfg.finetune, dataset, rng, cfg.finetune.cosine)
    top1 = accuracy(work, dataset.val_x, dataset.val_y, pairs)
    return FinetuneResult(top1, work, pairs, curve)


def evaluate(model: Model, pairs, dataset: DatasetHandle) -> float:
    return accuracy(model, dataset.val_x, dataset.val_y, pairs)


def save_weights(path, model: Model, pairs=None) -> None:
    """Raw float64 dump of weights (and scales/bits when quantized)."""
    arrays = dict(model.state())
    for l, pair in enumerate(pairs or []):
        for tag, sf in zip("wa", pair):
            if sf is not None:
                arrays[f"scale.{l}.{tag}"] = np.array(sf.value)
                arrays[f"bits.{l}.{tag}"] = np.array(sf.spec.bits)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path, model: Model) -> list[QuantPair]:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    state = {k: v for k, v in arrays.items() if not k.startswith(("scale.", "bits."))}
    model.load_state(state)
    pairs = []
    for l in range(len(model.layers)):
        pair = []
        for tag, kind in (("w", WEIGHTS), ("a", ACTIVATIONS)):
            key = f"scale.{l}.{tag}"
            if key in arrays:
                spec = QuantSpec(int(arrays[f"bits.{l}.{tag}"]), kind)
                pair.append(ScaleFactor(float(arrays[key]), l, spec))
            else:
                pair.append(None)
        pairs.append(tuple(pair))
    return pairs


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config_digest: str
    seed: int
    mode: str = "routine"
    stages: list = field(default_factory=list)
    complete: bool = False

    def add(self, stage: str, artifact: Optional[Path], metrics: dict, wall: float, base: Path) -> None:
        entry = {"stage": stage, "metrics": metrics, "wall_time": round(wall, 6)}
        if artifact is not None:
            entry["artifact"] = _relpath(artifact, base)
            entry["sha256"] = file_digest(artifact)
        self.stages.append(entry)

    def stage(self, name: str) -> dict:
        for s in self.stages:
            if s["stage"] == name:
                return s
        raise KeyError(name)

    def artifact(self, name: str, base: Path) -> Path:
        return (Path(base) / self.stage(name)["artifact"]).resolve()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))

    def verify(self, base: Path) -> bool:
        """Every referenced artifact exists and still matches its digest."""
        for s in self.stages:
            if "artifact" in s:
                p = Path(base) / s["artifact"]
                if not p.exists() or file_digest(p) != s["sha256"]:
                    return False
        return True


def _relpath(path, base) -> str:
    return os.path.relpath(Path(path).resolve(), Path(base).resolve())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def indicator_config(cfg: RunConfig, seed: int) -> IndicatorConfig:
    s = cfg.indicators
    return IndicatorConfig(steps=s.steps, lr=s.lr, scale_lr=s.scale_lr, momentum=s.momentum,
                           weight_decay=s.weight_decay, batch_size=s.batch_size, seed=seed,
                           data_fraction=s.data_fraction, init=s.init, cosine=s.cosine,
                           grad_scale=s.grad_scale)


def check_budget(cfg: RunConfig, model: Model) -> None:
    """Fail fast (before any training) when the configured budget cannot be met."""
    stats = layer_stats(model)
    bits = cfg.run.bits
    pinned = pinned_combos(sorted(model.exempt_layers()), len(bits))
    try:
        budget = resolve_budget(stats, bits, pinned, cfg.search.budget_bitops, cfg.search.budget_size_bits,
                                cfg.search.bitops_level, cfg.search.size_level)
    except ValueError as e:
        raise ConfigError(f"search: {e}") from None
    min_bitops = min_size = 0
    for s in stats:
        i = j = 0
        if s.layer in pinned:
            i, j = pinned[s.layer]
        min_bitops += s.macs * bits[i] * bits[j]
        min_size += s.params * bits[i]
    if budget.bitops is not None and min_bitops > budget.bitops:
        raise Infeasible(f"bitops budget {budget.bitops} is below the minimal achievable {min_bitops}",
                         min_bitops=min_bitops)
    if budget.size_bits is not None and min_size > budget.size_bits:
        raise Infeasible(f"size budget {budget.size_bits} is below the minimal achievable {min_size}",
                         min_size_bits=min_size)


def stage_pretrain(cfg: RunConfig, dataset: DatasetHandle, seed: int, out: Path) -> tuple[Model, dict, float]:
    t0 = time.perf_counter()
    model = make_model(cfg, dataset, seed)
    check_budget(cfg, model)
    metrics = pretrain(model, dataset, cfg, seed)
    save_weights(out / "pretrained.npz", model)
    return model, metrics, time.perf_counter() - t0


def stage_indicators(cfg: RunConfig, model: Model, dataset: DatasetHandle, seed: int, out: Path):
    t0 = time.perf_counter()
    icfg = indicator_config(cfg, seed)
    bank = make_bank(model, cfg.run.bits, dataset, icfg)
    report = train_indicators(model, bank, dataset, icfg)
    report.save(out / "indicators.txt")
    dump_stats(layer_stats(model), out / "stats.txt", sorted(model.exempt_layers()))
    metrics = {"final_loss": report.loss_curve[-1] if report.loss_curve else None}
    return report, metrics, time.perf_counter() - t0


def stage_search(cfg: RunConfig, shared: Path, out: Path, reversed: bool) -> tuple[Policy, dict, float]:
    # reads only the two text artifacts; no dataset is passed in
    t0 = time.perf_counter()
    s = cfg.search
    policy = search_files(shared / "indicators.txt", shared / "stats.txt", s.alpha, out / "policy.txt",
                          reversed=reversed, budget_bitops=s.budget_bitops, budget_size_bits=s.budget_size_bits,
                          bitops_level=s.bitops_level, size_level=s.size_level)
    metrics = {"objective": policy.objective, "total_bitops": policy.total_bitops,
               "total_size_bits": policy.total_size_bits, "nodes": policy.nodes,
               "solver_seconds": policy.wall_time, "bits": [list(b) for b in policy.bits]}
    return policy, metrics, time.perf_counter() - t0


def stage_finetune(cfg: RunConfig, model: Model, policy: Policy, dataset: DatasetHandle, seed: int, out: Path):
    t0 = time.perf_counter()
    result = finetune_with_policy(model, policy, dataset, cfg, seed)
    save_weights(out / "finetuned.npz", result.model, result.pairs)
    metrics = {"top1": result.top1, "final_loss": result.loss_curve[-1] if result.loss_curve else None}
    return result, metrics, time.perf_counter() - t0


def _existing(record_path: Path, cfg: RunConfig, seed: int, mode: str, force: bool) -> Optional[RunRecord]:
    if force or not record_path.exists():
        return None
    try:
        rec = RunRecord.load(record_path)
    except (ValueError, TypeError):
        return None
    if rec.complete and rec.config_digest == cfg.digest() and rec.seed == seed and rec.mode == mode \
            and rec.verify(record_path.parent):
        log.info("%s is up to date; skipping (use --force to rerun)", record_path)
        return rec
    return None


def _prepare_shared(cfg: RunConfig, dataset: DatasetHandle, seed: int, shared: Path,
                    record: RunRecord, base: Path) -> Model:
    shared.mkdir(parents=True, exist_ok=True)
    model, m, wall = stage_pretrain(cfg, dataset, seed, shared)
    record.add("pretrain", shared / "pretrained.npz", m, wall, base)
    _, m, wall = stage_indicators(cfg, model, dataset, seed, shared)
    record.add("indicators", shared / "indicators.txt", m, wall, base)
    record.add("stats", shared / "stats.txt", {}, 0.0, base)
    return model


def run_pipeline(cfg: RunConfig, out_dir, force: bool = False, seed: Optional[int] = None,
                 reversed: Optional[bool] = None) -> RunRecord:
    """pretrain -> indicators -> search -> finetune, all artifacts under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seed if seed is None else seed
    reversed = cfg.search.reversed if reversed is None else reversed
    mode = "reversed" if reversed else "routine"
    record_path = out / "record.json"
    if (rec := _existing(record_path, cfg, seed, mode, force)) is not None:
        return rec
    (out / "config.toml").write_text(dump_config(cfg))
    dataset = load_dataset(cfg)
    record = RunRecord(cfg.digest(), seed, mode)
    model = _prepare_shared(cfg, dataset, seed, out, record, out)
    record.save(record_path)
    policy, m, wall = stage_search(cfg, out, out, reversed)
    record.add("search", out / "policy.txt", m, wall, out)
    record.save(record_path)
    _, m, wall = stage_finetune(cfg, model, policy, dataset, seed, out)
    record.add("finetune", out / "finetuned.npz", m, wall, out)
    record.complete = True
    record.save(record_path)
    return record


def ablate_reverse(cfg: RunConfig, out_dir, force: bool = False, seeds: Optional[Sequence[int]] = None) -> dict:
    """Routine vs reversed policies (and optionally the uniform baseline) sharing one indicator report per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    seeds = list(cfg.ablation.seeds if seeds is None else seeds)
    modes = ["routine", "reversed"] + (["uniform"] if cfg.ablation.include_uniform else [])
    dataset = None
    results: dict[str, list] = {m: [] for m in modes}
    for seed in seeds:
        sdir = out / f"seed_{seed}"
        cached = {m: _existing(sdir / m / "record.json", cfg, seed, m, force) for m in modes}
        if all(r is not None for r in cached.values()):
            for m in modes:
                results[m].append(cached[m].stage("finetune")["metrics"]["top1"])
            continue
        if dataset is None:
            dataset = load_dataset(cfg)
        shared = sdir / "shared"
        base_record = RunRecord(cfg.digest(), seed, "shared")
        model = _prepare_shared(cfg, dataset, seed, shared, base_record, shared)
        base_record.complete = True
        base_record.save(shared / "record.json")
        for m in modes:
            mdir = sdir / m
            mdir.mkdir(parents=True, exist_ok=True)
            record = RunRecord(cfg.digest(), seed, m, [dict(s) for s in base_record.stages])
            for s in record.stages:
                s["artifact"] = _relpath(shared / s["artifact"], mdir)
            if m == "uniform":
                t0 = time.perf_counter()
                policy = uniform_baseline(cfg, shared)
                policy.save(mdir / "policy.txt")
                metrics = {"total_bitops": policy.total_bitops, "bits": [list(b) for b in policy.bits]}
                wall = time.perf_counter() - t0
            else:
                policy, metrics, wall = stage_search(cfg, shared, mdir, m == "reversed")
            record.add("search", mdir / "policy.txt", metrics, wall, mdir)
            _, fm, wall = stage_finetune(cfg, model, policy, dataset, seed, mdir)
            record.add("finetune", mdir / "finetuned.npz", fm, wall, mdir)
            record.complete = True
            record.save(mdir / "record.json")
            results[m].append(fm["top1"])
    summary = {
        "seeds": seeds,
        "top1": results,
        "mean_top1": {m: float(np.mean(v)) for m, v in results.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def uniform_baseline(cfg: RunConfig, shared: Path) -> Policy:
    """Fixed policy at the budget's uniform level (integer level only), exempt layers pinned."""
    from .costs import load_stats_file
    from .indicators import IndicatorReport

    report = IndicatorReport.load(shared / "indicators.txt")
    stats, exempt = load_stats_file(shared / "stats.txt")
    level = cfg.search.bitops_level
    if not level or level != int(level):
        raise ConfigError("the uniform baseline needs an integer search.bitops_level")
    top = report.bits[-1]
    return uniform_policy(report.layer_names, stats, int(level), int(level),
                          {l: (top, top) for l in exempt})
