"""Dataclass run configuration with a flat dotted-key surface.

Config files are `key = value` lines; overrides are `key=value` tokens.
Unknown keys are a hard error so typos never fall back to defaults silently.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .errors import ConfigError

MODEL_KINDS = ("CNP", "NP", "ANP", "NP_FE", "NP_LD", "FELD", "MAHA")


@dataclass
class ModelConfig:
    kind: str = "FELD"
    task: str = "regression"  # regression | classification
    dim_x: int = 1
    dim_y: int = 1
    feature_dim: int = 64
    z_dim: int = 64
    hidden_dim: int = 64
    enc_depth: int = 2
    dec_depth: int = 3
    st_blocks: int = 2
    st_heads: int = 4
    st_inducing: int = 0
    pma_seeds: int = 0  # 0 = auto: 1 for regression, 2 (one per path) for classification
    anp_self_attn_blocks: int = 2
    ln_affine: bool = True
    # encoder output heads start near zero so early decoder training is
    # driven by the target inputs rather than the (large) set representation
    head_init_scale: float = 0.02


@dataclass
class GpConfig:
    sigma: float = 1.0
    length_scale: float = 1.0
    noise: float = 0.02
    x_low: float = -2.0
    x_high: float = 2.0


@dataclass
class PolyConfig:
    x_low: float = -5.0
    x_high: float = 5.0
    noise: float = 0.0
    weights: str = "sine:0.25,line:0.25,quad:0.25,cubic:0.25"
    sine_a: str = "0.1:5.0"
    sine_b: str = "0.8:1.2"
    sine_c: str = "0.0:3.141592653589793"
    line_a: str = "-3.0:3.0"
    line_b: str = "-3.0:3.0"
    quad_a: str = "-0.2:0.2"
    quad_b: str = "-2.0:2.0"
    quad_c: str = "-3.0:3.0"
    cubic_a: str = "-0.1:0.1"
    cubic_b: str = "-0.2:0.2"
    cubic_c: str = "-2.0:2.0"
    cubic_d: str = "-3.0:3.0"


@dataclass
class BlobConfig:
    way: int = 5
    dim_x: int = 2
    n_regions: int = 4
    region_separation: float = 10.0
    region_spread: float = 1.5
    blob_std: float = 1.0
    weights: str = ""  # empty = uniform over regions


@dataclass
class DatasetConfig:
    kind: str = "gp"  # gp | poly | blobs
    seed: int = 0
    n_context_low: int = 3
    n_context_high: int = 10
    n_target: int = 50
    split: str = "interpolate"  # interpolate | extrapolate
    extrapolate_fraction: float = 0.4
    shot: int = 1  # classification: context shots per class
    query_shot: int = 5  # classification: extra target shots per class
    gp: GpConfig = field(default_factory=GpConfig)
    poly: PolyConfig = field(default_factory=PolyConfig)
    blobs: BlobConfig = field(default_factory=BlobConfig)


@dataclass
class LossConfig:
    beta1: float = 1.0
    beta2: float = 1.0
    mc_samples_train: int = 1
    mc_samples_eval: int = 16


@dataclass
class TrainConfig:
    steps_max: int = 30000
    batch_tasks: int = 16
    lr: float = 5e-4
    val_every: int = 500
    val_episodes: int = 200
    patience: int = 20
    log_every: int = 50


@dataclass
class PretrainConfig:
    pool: bool = True
    autoencode: bool = True
    steps_max: int = 30000
    catalog_tasks: int = 512


@dataclass
class ClusterConfig:
    k_min: int = 1
    k_max: int = 8
    k_override: int = 0  # 0 = pick k by the selection rule
    linkage: str = "average"  # average | single | complete | ward
    selection: str = "purity"  # purity (uses hidden labels) | silhouette (label-free fallback)


@dataclass
class Stage2Config:
    steps_max: int = 20000
    sampling: str = "ratio"  # ratio: fresh tasks at member-family ratios | members: resample members


@dataclass
class EvalConfig:
    n_tasks: int = 1000
    n_context: int = 5
    n_target: int = 50
    split: str = "interpolate"
    batch_tasks: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _walk_fields(cls, prefix=""):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        typ = hints[f.name]
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(typ):
            yield from _walk_fields(typ, prefix=f"{key}.")
        else:
            yield key, typ


def known_keys() -> dict[str, type]:
    """Flat key -> leaf type, derived from the dataclass tree."""
    return dict(_walk_fields(RunConfig))


def to_flat(cfg: RunConfig) -> dict:
    flat = {}

    def rec(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                rec(v, f"{key}.")
            else:
                flat[key] = v

    rec(cfg, "")
    return dict(sorted(flat.items()))


def _coerce(key: str, raw, typ):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    s = str(raw).strip()
    try:
        if typ is bool:
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
        return s
    except ValueError as e:
        raise ConfigError(f"cannot parse value '{raw}' for key '{key}' as {typ.__name__}") from e


def from_flat(flat: dict) -> RunConfig:
    keys = known_keys()
    unknown = sorted(set(flat) - set(keys))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for key, raw in flat.items():
        value = _coerce(key, raw, keys[key])
        obj = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        setattr(obj, parts[-1], value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.model.kind not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got '{cfg.model.kind}'")
    if cfg.model.task not in ("regression", "classification"):
        raise ConfigError(f"model.task must be regression or classification")
    if cfg.dataset.kind not in ("gp", "poly", "blobs"):
        raise ConfigError(f"dataset.kind must be gp, poly or blobs, got '{cfg.dataset.kind}'")
    if cfg.loss.mc_samples_train < 1 or cfg.loss.mc_samples_eval < 1:
        raise ConfigError("mc_samples must be >= 1")
    if cfg.eval.n_tasks < 1:
        raise ConfigError("eval.n_tasks must be >= 1")
    if cfg.model.task == "classification" and cfg.dataset.kind != "blobs":
        raise ConfigError("classification task needs dataset.kind = blobs")
    if cfg.model.task == "regression" and cfg.dataset.kind == "blobs":
        raise ConfigError("regression task cannot use dataset.kind = blobs")


def parse_config_file(path: str) -> dict:
    flat = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, value = line.split("=", 1)
            flat[key.strip()] = value.strip()
    return flat


def apply_overrides(flat: dict, overrides: list[str]) -> dict:
    out = dict(flat)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(config_path: str | None = None, overrides: list[str] | None = None,
            seed: int | None = None, base_flat: dict | None = None) -> RunConfig:
    """Defaults, then file, then overrides, then the explicit seed flag."""
    flat = dict(base_flat) if base_flat else {}
    if config_path:
        flat.update(parse_config_file(config_path))
    if overrides:
        flat = apply_overrides(flat, overrides)
    if seed is not None:
        flat["seed"] = seed
    return from_flat(flat)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(to_flat(cfg), f, indent=1, sort_keys=True)
        f.write("\n")


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return from_flat(json.load(f))
