"""Training configuration and named profiles (YAML on disk)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .losses import LossWeights


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.85
    beta2: float = 0.91
    weight_decay: float = 0.005
    lr_decay: float = 0.998  # multiplicative, applied once per epoch
    disc_lr: float = 2e-4
    disc_betas: tuple = (0.5, 0.999)


@dataclass
class TrainConfig:
    # wide and shallow: one block per stage trains fast enough on one CPU core
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(base_channels=32, blocks_per_stage=1))
    text_dim: int = 32
    fill_patch: int = 2
    threshold: float = 0.5
    losses: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    disc_width: int = 32
    disc_receptive_field: int = 16
    batch_size: int = 8
    steps: int = 1000
    epochs: int | None = None
    seed: int = 0
    augment: bool = True
    crop_pad: int = 4
    tagger_corpus: int = 3000
    tagger_epochs: int = 6
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.losses, dict):
            self.losses = LossWeights(**self.losses)
        if isinstance(self.optim, dict):
            o = dict(self.optim)
            if "disc_betas" in o:
                o["disc_betas"] = tuple(o["disc_betas"])
            self.optim = OptimConfig(**o)
        for name in ("text_dim", "fill_patch", "batch_size", "steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.optim.lr <= 0 or not 0 < self.optim.lr_decay <= 1:
            raise ValueError("lr must be positive and lr_decay in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optim"]["disc_betas"] = list(d["optim"]["disc_betas"])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PROFILES = {
    "desk": {},
    # full-scale settings: 480px inputs, batch 32, 76 epochs
    "paper-480": {
        "encoder": {"image_size": 480, "patch_size": 4, "base_channels": 128, "blocks_per_stage": 2,
                    "window": 12},
        "text_dim": 768,
        "optim": {"lr": 6e-4, "beta1": 0.85, "beta2": 0.91, "weight_decay": 0.005},
        "batch_size": 32,
        "epochs": 76,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    profile = d.pop("profile", "desk")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = _merge(TrainConfig().to_dict(), PROFILES[profile])
    merged = _merge(merged, d)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**merged)


def load_config(path: str | Path | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    return from_dict(data)
