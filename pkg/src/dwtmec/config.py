"""Run configuration files (YAML) and dataset construction from them."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .data import LabeledSet, PerturbSpec, affine_warp, gen_synthetic_shift, load_idx, rotation_scaling, split
from .train import TrainConfig
from .whitening import Domain

OUT_DIR_ENV = "DWTMEC_OUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"
    # synthetic
    seed: int = 0
    n: int = 2000
    n_test: int = 500
    classes: int = 3
    dim: int = 8
    noise: float = 0.3
    correlation: float = 0.6
    corr_block: int | None = None
    class_sep: float = 1.5
    mean_dims: int | None = 2
    rotation: float = 30.0
    scales: tuple = (2.0, 0.5)
    translation: tuple | None = None
    # idx
    source_images: str | None = None
    source_labels: str | None = None
    target_images: str | None = None
    target_labels: str | None = None
    limit: int | None = None
    # pseudo-target when no target files are given: fixed affine copy of the source
    pseudo_rotation: float = 25.0
    pseudo_scale: float = 0.85

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"data.kind: expected 'synthetic' or 'idx', got {self.kind!r}")
        self.scales = tuple(self.scales)
        if self.translation is not None:
            self.translation = tuple(self.translation)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    perturb: PerturbSpec = field(default_factory=lambda: PerturbSpec(feature_noise=0.1))
    seeds: tuple = (0, 1, 2)

    def to_dict(self):
        d = asdict(self)
        return d


def _build(cls, section: str, raw):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{section}.{key}'")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from err


def parse_config(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'")
    sections = {"train": TrainConfig, "data": DataConfig, "perturb": PerturbSpec}
    kw = {name: _build(cls, name, raw.pop(name, None)) for name, cls in sections.items()}
    if "seeds" in raw:
        raw["seeds"] = tuple(raw["seeds"])
    cfg = RunConfig(**raw, **kw)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        cfg.out_dir = env
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    return parse_config(raw)


def _pseudo_target(data: LabeledSet, cfg: DataConfig) -> LabeledSet:
    t = np.radians(cfg.pseudo_rotation)
    matrix = cfg.pseudo_scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    warped = np.stack([np.clip(affine_warp(img, matrix, (0.0, 0.0)), 0, 1) for img in data.inputs])
    return LabeledSet(warped, data.labels.copy(), Domain.TARGET)


def make_datasets(cfg: DataConfig) -> dict:
    """``{'source', 'target', 'target_test'}`` for a data section."""
    if cfg.kind == "synthetic":
        A = rotation_scaling(cfg.dim, cfg.rotation, cfg.scales)
        b = np.zeros(cfg.dim)
        if cfg.translation:
            b[:len(cfg.translation)] = cfg.translation
        src, tgt = gen_synthetic_shift(cfg.seed, cfg.n + cfg.n_test, cfg.classes, cfg.dim, A, b,
                                       cfg.noise, cfg.correlation, cfg.corr_block, cfg.class_sep,
                                       cfg.mean_dims)
        src, _ = split(src, cfg.n_test, cfg.seed)
        tgt, tgt_test = split(tgt, cfg.n_test, cfg.seed + 1)
        return {"source": src, "target": tgt, "target_test": tgt_test}

    if not (cfg.source_images and cfg.source_labels):
        raise ConfigError("data.source_images and data.source_labels are required for kind 'idx'")
    src = load_idx(cfg.source_images, cfg.source_labels, Domain.SOURCE)
    if cfg.limit:
        src = src.subset(np.arange(min(cfg.limit, len(src))))
    if cfg.target_images and cfg.target_labels:
        tgt = load_idx(cfg.target_images, cfg.target_labels, Domain.TARGET)
        if cfg.limit:
            tgt = tgt.subset(np.arange(min(cfg.limit, len(tgt))))
    else:
        tgt = _pseudo_target(src, cfg)
    n_test = min(cfg.n_test, len(tgt) // 2)
    tgt, tgt_test = split(tgt, n_test, cfg.seed + 1)
    return {"source": src, "target": tgt, "target_test": tgt_test}
