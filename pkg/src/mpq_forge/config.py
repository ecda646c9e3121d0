"""Run configuration: a TOML file with one table per stage. Unknown keys are errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .indicators import STATISTICS, UNIFORM, check_bits


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    model: str = "mlp"
    seed: int = 0
    bits: list = field(default_factory=lambda: [2, 3, 4, 8])
    # None means the model's default (off for mlp/contrast, on for cnn)
    exempt_first_last: Optional[bool] = None
    width: int = 0  # cnn channel width / mlp hidden size; 0 keeps the model default


@dataclass
class DataSection:
    source: str = "synthetic"
    seed: int = 0
    classes: int = 10
    samples: int = 2000
    val_samples: int = 500
    input_shape: list = field(default_factory=lambda: [1, 8, 8])
    noise: float = 0.35
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""


@dataclass
class PretrainSection:
    steps: int = 800
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64


@dataclass
class IndicatorSection:
    steps: int = 300
    lr: float = 0.01
    scale_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    data_fraction: float = 0.5
    init: str = STATISTICS
    cosine: bool = True
    grad_scale: bool = True


@dataclass
class SearchSection:
    alpha: float = 1.0
    budget_bitops: int = 0
    budget_size_bits: int = 0
    # budget as "uniform b-bit level": sum of macs*b*b (or params*b) over searched layers
    bitops_level: float = 3.0
    size_level: float = 0.0
    reversed: bool = False


@dataclass
class FinetuneSection:
    steps: int = 300
    lr: float = 0.01
    scale_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    cosine: bool = True


@dataclass
class AblationSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    include_uniform: bool = True


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    indicators: IndicatorSection = field(default_factory=IndicatorSection)
    search: SearchSection = field(default_factory=SearchSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> "RunConfig":
        from .models import ZOO

        if self.run.model not in ZOO:
            raise ConfigError(f"run.model: unknown model {self.run.model!r}; choose from {sorted(ZOO)}")
        try:
            self.run.bits = list(check_bits(self.run.bits))
        except ValueError as e:
            raise ConfigError(f"run.bits: {e}") from None
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {self.data.source!r}")
        if self.data.source == "idx" and not (self.data.train_images and self.data.train_labels):
            raise ConfigError("data.source = 'idx' needs data.train_images and data.train_labels")
        if self.indicators.init not in (STATISTICS, UNIFORM):
            raise ConfigError(f"indicators.init must be {STATISTICS!r} or {UNIFORM!r}")
        if not 0 < self.indicators.data_fraction <= 1:
            raise ConfigError("indicators.data_fraction must be in (0, 1]")
        if self.search.alpha < 0:
            raise ConfigError("search.alpha must be non-negative")
        for name in ("budget_bitops", "budget_size_bits", "bitops_level", "size_level"):
            if getattr(self.search, name) < 0:
                raise ConfigError(f"search.{name} must be non-negative")
        for section in (self.pretrain, self.indicators, self.finetune):
            if section.steps < 0 or section.batch_size <= 0 or section.lr <= 0:
                raise ConfigError(f"{type(section).__name__}: steps >= 0, batch_size > 0 and lr > 0 required")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _section(cls, table: dict, name: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}")
    obj = cls()
    for key, value in table.items():
        default = getattr(obj, key)
        if (default is None or isinstance(default, bool)) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key}: expected true/false, got {value!r}")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, type(default) if default is not None else bool):
            raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {value!r}")
        setattr(obj, key, value)
    return obj


def from_dict(doc: dict) -> RunConfig:
    sections = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    kwargs = {}
    for name, factory in sections.items():
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _section(type(factory()), table, name)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    try:
        doc = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = from_dict(doc)
    # relative IDX paths are resolved against the config file
    base = Path(path).resolve().parent
    for key in ("train_images", "train_labels", "val_images", "val_labels"):
        value = getattr(cfg.data, key)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, key, str(base / value))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to TOML (flat tables, scalars and lists only)."""
    out = []
    for name, table in cfg.to_dict().items():
        out.append(f"[{name}]")
        for key, value in table.items():
            if value is None:
                continue
            out.append(f"{key} = {_toml_value(value)}")
        out.append("")
    return "\n".join(out)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r}")
