"""Run configuration: TOML file with per-module sections, strict keys."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LossWeights
from .model import VARIANTS
from .postprocess import DecodeConfig
from .trainer import TrainConfig

KNOWN_KEYS = {
    "run": {"seed", "output_dir"},
    "dataset": {"schema", "root", "fold", "manifest"},
    "encoder": {"backend", "checkpoint_dir", "seed"},
    "model": {"variant"},
    "train": {
        "lr", "momentum", "batch_size", "grad_clip_norm", "epochs",
        "freeze_extractor", "max_steps", "early_stop_patience",
    },
    "loss": {"lambda_ipt", "lambda_pitch", "lambda_onset"},
    "decode": {"onset_threshold", "frame_threshold", "min_event_frames"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    dataset_schema: str = "toy"
    dataset_root: str | None = None
    manifest: str | None = None
    fold: int = 0
    encoder_backend: str = "stub"
    checkpoint_dir: str | None = None
    variant: str = "MERTech"
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a TOML run config; CLI overrides win."""
    with open(path, "rb") as f:
        raw = tomllib.load(f)

    for section, content in raw.items():
        if section not in KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(content) - KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")

    overrides = overrides or {}
    run = raw.get("run", {})
    ds = raw.get("dataset", {})
    enc = raw.get("encoder", {})
    mdl = raw.get("model", {})
    tr = raw.get("train", {})
    ls = raw.get("loss", {})
    dec = raw.get("decode", {})

    seed = int(overrides.get("seed", run.get("seed", 0)))
    variant = overrides.get("variant", mdl.get("variant", "MERTech"))
    loss_weights = LossWeights(
        lambda_ipt=float(ls.get("lambda_ipt", 1.0)),
        lambda_pitch=float(ls.get("lambda_pitch", 0.5)),
        lambda_onset=float(ls.get("lambda_onset", 0.5)),
    )
    train_cfg = TrainConfig(
        lr=float(tr.get("lr", 0.001)),
        momentum=float(tr.get("momentum", 0.9)),
        batch_size=int(tr.get("batch_size", 10)),
        grad_clip_norm=float(tr.get("grad_clip_norm", 3.0)),
        epochs=int(tr.get("epochs", 50)),
        seed=seed,
        freeze_extractor=bool(tr.get("freeze_extractor", True)),
        variant=variant,
        dataset=ds.get("schema", "toy"),
        fold=int(overrides.get("fold", ds.get("fold", 0))),
        max_steps=tr.get("max_steps"),
        early_stop_patience=int(tr.get("early_stop_patience", 10)),
        loss_weights=loss_weights,
    )
    return RunConfig(
        seed=seed,
        output_dir=str(overrides.get("output", run.get("output_dir", "runs"))),
        dataset_schema=ds.get("schema", "toy"),
        dataset_root=ds.get("root"),
        manifest=ds.get("manifest"),
        fold=train_cfg.fold,
        encoder_backend=enc.get("backend", "stub"),
        checkpoint_dir=enc.get("checkpoint_dir"),
        variant=variant,
        train=train_cfg,
        loss_weights=loss_weights,
        decode=DecodeConfig(
            onset_threshold=float(dec.get("onset_threshold", 0.5)),
            frame_threshold=float(dec.get("frame_threshold", 0.5)),
            min_event_frames=int(dec.get("min_event_frames", 1)),
        ),
    )
