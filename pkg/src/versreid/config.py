"""Run configuration: a flat ``key = value`` file mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .mpda import AugConfig


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 30
    distill_epochs: int = 30


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.02
    temperature: float = 0.2
    ema: float = 0.99
    mpda: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    P: int = 8
    K: int = 4
    seed: int = 0
    # randomly reassign scene labels to scenes during training (robustness trial)
    shuffle_train_scenes: bool = False
    # flip + pad-crop on supervised batches
    train_aug: bool = True
    checkpoint_every: int = 0
    eval_batch: int = 256
    # retrieval feature: "neck" (normalised class token) or "cls" (raw class token)
    eval_feature: str = "neck"

    def __post_init__(self):
        if self.optim.epochs < 1 or self.optim.distill_epochs < 1 or self.pretrain.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.P < 2 or self.K < 2:
            raise ValueError("PK sampling needs P >= 2 and K >= 2")
        if self.eval_feature not in ("neck", "cls"):
            raise ValueError(f"eval_feature must be 'neck' or 'cls', got {self.eval_feature!r}")

    def replace(self, **changes) -> "RunConfig":
        """Override flat keys (same names as the config file)."""
        return apply_overrides(self, changes)


_SECTIONS = {
    "model": {
        "height": "height", "width": "width", "patch": "patch", "stride": "stride",
        "dim": "dim", "depth": "depth", "heads": "heads", "mlp_ratio": "mlp_ratio",
        "num_scenes": "num_scenes", "prompts_per_scene": "prompts_per_scene",
        "versatile_prompts": "versatile_prompts",
    },
    "loss": {"margin": "margin", "alpha": "alpha", "distill": "distill",
             "kl_temperature": "kl_temperature"},
    "aug": {"brightness": "brightness", "contrast": "contrast", "blur_sigma": "blur_sigma",
            "occlusion_area": "occlusion_area", "hue_shift": "hue_shift",
            "crop_scale": "crop_scale", "flip_prob": "flip_prob"},
    "optim": {"lr": "lr", "momentum": "momentum", "weight_decay": "weight_decay",
              "warmup_epochs": "warmup_epochs", "epochs": "epochs",
              "distill_epochs": "distill_epochs"},
    "pretrain": {"pretrain_epochs": "epochs", "pretrain_batch": "batch_size",
                 "pretrain_lr": "lr", "temperature": "temperature", "ema": "ema",
                 "mpda": "mpda"},
}
_TOP = ("P", "K", "seed", "shuffle_train_scenes", "train_aug", "checkpoint_every", "eval_batch",
        "eval_feature")

KEYS = {k: (sec, attr) for sec, table in _SECTIONS.items() for k, attr in table.items()}
KEYS.update({k: (None, k) for k in _TOP})


def _convert(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("on", "true", "yes", "1"):
            return True
        if low in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"expected on/off, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        if len(parts) != len(current):
            raise ValueError(f"expected {len(current)} comma-separated numbers, got {raw!r}")
        return tuple(float(p) for p in parts)
    return raw


def apply_overrides(cfg: RunConfig, values: dict, lines: dict | None = None,
                    path: str | None = None) -> RunConfig:
    sections: dict[str, dict] = {}
    top: dict = {}
    for key, raw in values.items():
        line = (lines or {}).get(key)
        if key not in KEYS:
            raise ConfigParseError(f"unknown config key {key!r}", line, path)
        sec, attr = KEYS[key]
        target = cfg if sec is None else getattr(cfg, sec)
        current = getattr(target, attr)
        try:
            value = _convert(raw, current) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigParseError(f"bad value for {key}: {e}", line, path) from None
        (top if sec is None else sections.setdefault(sec, {}))[attr] = value
    try:
        for sec, changes in sections.items():
            top[sec] = dataclasses.replace(getattr(cfg, sec), **changes)
        return dataclasses.replace(cfg, **top)
    except ValueError as e:
        raise ConfigParseError(str(e), None, path) from None


def parse_config_text(text: str, path: str | None = None) -> RunConfig:
    values, lines = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(f"expected 'key = value', got {body!r}", lineno, path)
        key, value = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigParseError("missing key", lineno, path)
        if key in values:
            raise ConfigParseError(f"duplicate key {key!r}", lineno, path)
        values[key], lines[key] = value, lineno
    return apply_overrides(RunConfig(), values, lines, path)


def parse_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config_text(Path(path).read_text(), str(path))
