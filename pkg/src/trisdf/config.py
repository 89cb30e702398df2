"""Configuration dataclasses and the flat key=value config-file format.

Files hold one `key = value` pair per line; `#` starts a comment. Lists are
comma-separated. Unknown keys are an error so typos fail early.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields

import numpy as np


@dataclass
class ModelConfig:
    resolutions: tuple = (16, 32, 64, 128, 256)
    n_features: int = 6
    windows: tuple = (1, 1, 1, 3, 5)
    blur_sigma: float = 3.0
    featurize_mode: str = "preconv"     # or "gather"
    encoder: str = "lod"                # or "tpe" (plain per-point encoding)
    degenerate_cone: bool = False       # collapse frusta onto sample points
    blend_normalize: bool = True        # divide the vertex blend by sum(W)
    geom_width: int = 256
    geom_hidden: int = 8
    geom_skip_at: int = 4
    theta_dim: int = 256
    geom_beta: float = 100.0
    color_width: int = 256
    color_hidden: int = 3
    init_radius: float = 0.5
    s_init: float = 20.0
    k_init: float = 80.0
    alpha_eval: str = "endpoint"        # or "midpoint"

    def validate(self):
        L = len(self.resolutions)
        if len(self.windows) != L:
            raise ValueError(
                f"windows has {len(self.windows)} entries for {L} levels")
        for w in self.windows:
            if w < 1 or w % 2 == 0:
                raise ValueError(f"windows must be odd and >= 1, got {w}")
        for w, r in zip(self.windows, self.resolutions):
            if w > r:
                raise ValueError(f"window {w} exceeds plane resolution {r}")
        if self.encoder not in ("lod", "tpe"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.featurize_mode not in ("preconv", "gather"):
            raise ValueError(f"unknown featurize_mode {self.featurize_mode!r}")
        if self.alpha_eval not in ("endpoint", "midpoint"):
            raise ValueError(f"unknown alpha_eval {self.alpha_eval!r}")
        if not (0 <= self.geom_skip_at < self.geom_hidden):
            raise ValueError("geom_skip_at out of range")
        return self

    @property
    def encode_dim(self):
        return 3 + len(self.resolutions) * self.n_features


@dataclass
class SampleConfig:
    n_coarse: int = 64
    n_fine: int = 64
    fine_rounds: int = 4
    bound_radius: float = 1.0
    near_min: float = 0.05


@dataclass
class TrainConfig:
    iterations: int = 20000
    rays_per_batch: int = 512
    warmup: int = 500
    lr_max: float = 5e-4
    lr_min: float = 2.5e-5
    lambda_rgb: float = 1.0
    lambda_eik: float = 0.1
    lambda_mask: float = 0.1
    scalar_lr_mult: float = 10.0
    seed: int = 0
    checkpoint_every: int = 5000
    log_every: int = 100
    use_mask: bool = True


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        cfg = Config(ModelConfig(**d.get("model", {})),
                     SampleConfig(**d.get("sample", {})),
                     TrainConfig(**d.get("train", {})))
        cfg.model.resolutions = tuple(cfg.model.resolutions)
        cfg.model.windows = tuple(cfg.model.windows)
        return cfg.validate()


def _coerce(current, text):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = current[0] if current else 1
        return tuple(type(elem)(s) for s in items)
    return text.strip()


def apply_overrides(cfg, pairs):
    """Apply key=value overrides; keys may hit any section's field name."""
    sections = [cfg.model, cfg.sample, cfg.train]
    by_name = {}
    for sec in sections:
        for f in fields(sec):
            by_name[f.name] = sec
    for key, text in pairs:
        if key not in by_name:
            raise KeyError(f"unknown config key {key!r}")
        sec = by_name[key]
        setattr(sec, key, _coerce(getattr(sec, key), text))
    return cfg.validate()


def load_config(path):
    """Parse a key=value file into a Config over the defaults."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, text = line.split("=", 1)
            pairs.append((key.strip(), text.strip()))
    return apply_overrides(Config(), pairs)


def parse_cli_overrides(items):
    pairs = []
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        pairs.append((key.strip(), text.strip()))
    return pairs
