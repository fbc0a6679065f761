"""Run configuration: dataclass tree, YAML loading, dotted overrides and validation.

Config files are YAML mappings whose top-level sections mirror the modules::

    data:     {source, path, format, k_user, k_item, ratios, synthetic: {...}}
    model:    {backbone, dim, n_layers, layer_weights, reg, lr, init_scale}
    sampler:  {stage1: {strategy, alpha, candidates, retry_cap}, stage2: {...}}
    community: {p, max_iter, tol}
    train:    {batch_size, stage1_epochs, stage2_epochs, patience, eval_every, k, log_negatives}
    seeds:    {init, split, sampler, clustering}
    output:   {dir}

Overrides use dotted keys (``sampler.stage2.alpha=0.4``); a value that is a YAML
list expands into a sweep grid (see :func:`expand_grid`).
"""
from __future__ import annotations

import copy
import dataclasses
import itertools
import json
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .encoder import BACKBONES
from .ingest import FORMATS
from .sampler import STRATEGIES


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class SyntheticConfig:
    users: int = 400
    items: int = 200
    communities: int = 4
    exposure_rate: float = 0.5
    click_rate: float = 0.3


@dataclass
class DataConfig:
    source: str = "raw"
    path: str | None = None
    format: str = "movielens-tab"
    k_user: int = 10
    k_item: int = 10
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class ModelSection:
    backbone: str = "lightgcn"
    dim: int = 64
    n_layers: int = 2
    layer_weights: list | None = None
    reg: float = 1e-4
    lr: float = 1e-3
    init_scale: float = 0.1


@dataclass
class StageSampler:
    strategy: str = "rns"
    alpha: float = 0.1
    candidates: int = 10
    retry_cap: int = 100


@dataclass
class SamplerSection:
    stage1: StageSampler = field(default_factory=StageSampler)
    stage2: StageSampler = field(default_factory=lambda: StageSampler(strategy="icpns"))


@dataclass
class CommunitySection:
    p: int = 8
    max_iter: int = 100
    tol: float = 1e-6


@dataclass
class TrainSection:
    batch_size: int = 4096
    stage1_epochs: int = 300
    stage2_epochs: int = 300
    patience: int = 20
    eval_every: int = 10
    k: int = 10
    log_negatives: bool = False


@dataclass
class SeedSection:
    init: int | None = None
    split: int | None = None
    sampler: int | None = None
    clustering: int | None = None


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    community: CommunitySection = field(default_factory=CommunitySection)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"sampler.stage2.strategy": "rns"})``."""
        data = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(data, key, value)
        return from_dict(data)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _set_dotted(data: dict, key: str, value):
    node = data
    parts = key.split(".")
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
            raise ConfigError(".".join(parts[: i + 1]), "unknown config section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown config key")
    node[parts[-1]] = value


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(sub, "unknown config key")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING \
            else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, sub)
        else:
            kwargs[key] = _coerce(value, default, fields[key].type, sub)
    return cls(**kwargs)


def _coerce(value, default, annotation: str, path: str):
    if value is None:
        if "None" in str(annotation):
            return None
        raise ConfigError(path, "value may not be null")
    if isinstance(default, bool) or annotation == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    if "int" in str(annotation) and "float" not in str(annotation):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if "list" in str(annotation):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [float(v) for v in value]
    if "str" in str(annotation):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _check_range(path, value, lo=None, hi=None, allowed=None):
    if allowed is not None and value not in allowed:
        raise ConfigError(path, f"{value!r} not in allowed values {list(allowed)}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"{value!r} below allowed range [{lo}, {hi if hi is not None else 'inf'}]")
    if hi is not None and value > hi:
        raise ConfigError(path, f"{value!r} above allowed range [{lo if lo is not None else '-inf'}, {hi}]")


def validate(cfg: RunConfig) -> RunConfig:
    _check_range("data.source", cfg.data.source, allowed=("raw", "bundle", "synthetic"))
    _check_range("data.format", cfg.data.format, allowed=FORMATS)
    _check_range("data.k_user", cfg.data.k_user, lo=1)
    _check_range("data.k_item", cfg.data.k_item, lo=1)
    if len(cfg.data.ratios) != 3 or min(cfg.data.ratios) <= 0 or abs(sum(cfg.data.ratios) - 1) > 1e-9:
        raise ConfigError("data.ratios", "need three positive ratios summing to 1")
    syn = cfg.data.synthetic
    for name in ("users", "items", "communities"):
        _check_range(f"data.synthetic.{name}", getattr(syn, name), lo=1)
    for name in ("exposure_rate", "click_rate"):
        value = getattr(syn, name)
        if not 0 < value <= 1:
            raise ConfigError(f"data.synthetic.{name}", f"{value!r} outside allowed range (0, 1]")
    m = cfg.model
    _check_range("model.backbone", m.backbone, allowed=BACKBONES)
    _check_range("model.dim", m.dim, lo=1)
    _check_range("model.n_layers", m.n_layers, lo=0, hi=4)
    if m.layer_weights is not None and len(m.layer_weights) != m.n_layers + 1:
        raise ConfigError("model.layer_weights", f"need {m.n_layers + 1} weights")
    _check_range("model.reg", m.reg, lo=0.0)
    _check_range("model.lr", m.lr, lo=0.0)
    _check_range("model.init_scale", m.init_scale, lo=0.0)
    for stage in ("stage1", "stage2"):
        s = getattr(cfg.sampler, stage)
        _check_range(f"sampler.{stage}.strategy", s.strategy, allowed=STRATEGIES)
        _check_range(f"sampler.{stage}.alpha", s.alpha, lo=0.0, hi=1.0)
        _check_range(f"sampler.{stage}.candidates", s.candidates, lo=1)
        _check_range(f"sampler.{stage}.retry_cap", s.retry_cap, lo=1)
    if cfg.sampler.stage1.strategy in ("icpns",):
        raise ConfigError("sampler.stage1.strategy", "stage 1 has no community model; use rns, pns or hns")
    _check_range("community.p", cfg.community.p, lo=1)
    _check_range("community.max_iter", cfg.community.max_iter, lo=1)
    _check_range("community.tol", cfg.community.tol, lo=0.0)
    t = cfg.train
    _check_range("train.batch_size", t.batch_size, lo=1)
    _check_range("train.stage1_epochs", t.stage1_epochs, lo=0)
    _check_range("train.stage2_epochs", t.stage2_epochs, lo=0)
    _check_range("train.patience", t.patience, lo=0)
    _check_range("train.eval_every", t.eval_every, lo=1)
    _check_range("train.k", t.k, lo=1)
    for name in ("init", "split", "sampler", "clustering"):
        value = getattr(cfg.seeds, name)
        if value is not None:
            _check_range(f"seeds.{name}", value, lo=0)
    return cfg


def from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data, ""))


def materialize_seeds(cfg: RunConfig) -> RunConfig:
    """Fill every absent seed from OS entropy so the resolved config is reproducible."""
    cfg = copy.deepcopy(cfg)
    for name in ("init", "split", "sampler", "clustering"):
        if getattr(cfg.seeds, name) is None:
            setattr(cfg.seeds, name, secrets.randbits(31))
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(text, "override must look like section.key=value")
    return key.strip(), yaml.safe_load(raw)


def load_document(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(str(p), "config file does not exist")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(str(p), "config document must be a mapping")
    return data


def parse_config(path=None, overrides=(), seed_entropy: bool = True) -> RunConfig:
    """Defaults, then the file, then overrides; validated and with all seeds materialised.

    Overrides with list values for keys whose type is scalar are rejected here;
    use :func:`expand_grid` for sweeps.
    """
    data = RunConfig().to_dict()
    _merge(data, load_document(path), "")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(data, key, value)
    cfg = from_dict(data)
    return materialize_seeds(cfg) if seed_entropy else cfg


def _merge(base: dict, update: dict, path: str):
    for key, value in update.items():
        sub = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(sub, "unknown config key")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, sub)
        else:
            base[key] = value


SWEEPABLE_LISTS = {"data.ratios", "model.layer_weights"}


def expand_grid(path=None, overrides=()) -> list[tuple[dict, RunConfig]]:
    """Expand list-valued overrides into the cartesian product of runs.

    Returns ``(assignment, config)`` pairs where ``assignment`` names the swept values.
    """
    fixed, swept = [], []
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        if isinstance(value, list) and key not in SWEEPABLE_LISTS:
            swept.append((key, value))
        else:
            fixed.append((key, value))
    base = parse_config(path, fixed)
    runs = []
    for combo in itertools.product(*[vals for _, vals in swept]):
        assignment = {k: v for (k, _), v in zip(swept, combo)}
        cfg = base.replace(**assignment) if assignment else base
        runs.append((assignment, cfg))
    return runs


def stage1_key(cfg: RunConfig) -> str:
    """Identity of the Stage-1 checkpoint: everything except Stage-2 sampler and community settings."""
    d = cfg.to_dict()
    d.pop("output")
    d["sampler"].pop("stage2")
    d.pop("community")
    d["train"].pop("stage2_epochs")
    d["train"].pop("patience")
    d["train"].pop("log_negatives")
    d["seeds"].pop("clustering")
    return json.dumps(d, sort_keys=True)
