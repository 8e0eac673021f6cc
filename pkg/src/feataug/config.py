"""Experiment configuration.

Configs are flat ``section.key = value`` text files (``#`` comments allowed).
Every key must exist in `ExperimentConfig`; values are coerced to the
field's type. Command-line overrides use the same ``key=value`` syntax and
win over the file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from feataug.errors import ConfigError

OUTPUT_ROOT_ENV = "FEATAUG_OUTPUT_ROOT"


@dataclass
class DataConfig:
    source: str = "synthetic"
    n_classes: int = 10
    im: float = 100.0
    n_max: int = 500
    test_per_class: int = 100
    image_size: int = 32
    noise: float = 0.2
    n_distractors: int = 2
    cifar_train: str = ""
    cifar_test: str = ""
    shuffle: bool = True
    dir: str = ""


@dataclass
class ModelConfig:
    channels: str = "16,32,64"

    def channel_list(self) -> list[int]:
        try:
            out = [int(c) for c in self.channels.split(",") if c.strip()]
        except ValueError:
            raise ConfigError(f"model.channels must be comma-separated ints, got {self.channels!r}")
        if not out or min(out) < 1:
            raise ConfigError("model.channels needs at least one positive width")
        return out


@dataclass
class LossSection:
    kind: str = "cross_entropy"
    focal_exponent: float = 0.0
    cb_beta: float = 0.999


@dataclass
class Phase1Config:
    base_lr: float = 0.1
    decay_every: int = 15
    factor: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    augment: bool = True
    eval_every: int = 1


@dataclass
class Phase2Config:
    lr: float = 0.001
    momentum: float = 0.9
    iterations: int = 800
    n_t: int = 8
    n_a: int = 3
    n_f: int = 3
    h_r_target: float = 0.9
    tau_s: float = 0.5
    tau_g: float = 0.5
    gamma_min: float = 0.3
    gamma_max: float = 0.7
    eval_every: int = 50
    dump_batches: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    seed: int = 0
    output_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        p1, p2 = self.phase1, self.phase2
        checks = [
            (self.data.source in ("synthetic", "cifar_binary"), "data.source must be synthetic or cifar_binary"),
            (self.data.n_classes >= 2, "data.n_classes must be >= 2"),
            (self.data.im >= 1, "data.im must be >= 1"),
            (self.data.n_max >= self.data.im, "data.n_max must be >= data.im"),
            (self.data.test_per_class >= 1 and self.data.image_size >= 4,
             "data.test_per_class >= 1 and data.image_size >= 4"),
            (self.data.noise >= 0 and self.data.n_distractors >= 0,
             "data.noise and data.n_distractors must be >= 0"),
            (p1.clip_norm >= 0 and p1.weight_decay >= 0, "phase1.clip_norm and weight_decay must be >= 0"),
            (p1.base_lr > 0 and p2.lr > 0, "learning rates must be > 0"),
            (p2.iterations >= 0, "phase2.iterations must be >= 0"),
            (p1.epochs >= 0 and p1.batch_size >= 1, "phase1.epochs >= 0 and phase1.batch_size >= 1"),
            (p1.decay_every >= 1, "phase1.decay_every must be >= 1"),
            (0 <= p1.momentum < 1 and 0 <= p2.momentum < 1, "momentum must be in [0, 1)"),
            (p2.n_t >= 1 and p2.n_a >= 0 and p2.n_f >= 1, "need phase2.n_t >= 1, n_a >= 0, n_f >= 1"),
            (0 < p2.h_r_target < 1, "phase2.h_r_target must be in (0, 1)"),
            (0 < p2.tau_s < 1 and 0 < p2.tau_g < 1, "phase2.tau_s and tau_g must be in (0, 1)"),
            (0 < p2.gamma_min <= p2.gamma_max < 1, "need 0 < phase2.gamma_min <= gamma_max < 1"),
            (p2.eval_every >= 1 and p1.eval_every >= 1, "eval_every must be >= 1"),
            (self.loss.kind in ("cross_entropy", "focal", "class_balanced"), "unknown loss.kind"),
            (0 <= self.loss.cb_beta < 1, "loss.cb_beta must be in [0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.model.channel_list()
        return self


def _coerce(raw: str, typ: Any, key: str, where: str) -> Any:
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key}={raw!r} as {getattr(typ, '__name__', typ)}") from None


def _field_map(cfg: ExperimentConfig) -> dict[str, tuple[Any, str, Any]]:
    """dotted key -> (owner object, attribute, type)."""
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                out[f"{f.name}.{sub.name}"] = (value, sub.name, sub.type)
        else:
            out[f.name] = (cfg, f.name, f.type)
    return out


def apply_pairs(cfg: ExperimentConfig, pairs: Iterable[tuple[str, str, str]]) -> ExperimentConfig:
    """Apply ``(key, value, where)`` triples; ``where`` labels errors."""
    fmap = _field_map(cfg)
    for key, value, where in pairs:
        if key not in fmap:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        owner, attr, typ = fmap[key]
        setattr(owner, attr, _coerce(value, typ, key, where))
    return cfg


def parse_text(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        pairs.append((key.strip(), value.strip(), f"{source}:{lineno} (key {key.strip()!r})"))
    return pairs


def parse_override(item: str) -> tuple[str, str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, value = item.split("=", 1)
    return key.strip(), value.strip(), f"override {item!r}"


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        apply_pairs(cfg, parse_text(p.read_text(), str(p)))
    apply_pairs(cfg, [parse_override(o) for o in overrides])
    return cfg.validate()


def to_text(cfg: ExperimentConfig) -> str:
    """Resolved config in the same flat format; re-parses to an equal config."""
    lines = []
    for key, (owner, attr, _) in _field_map(cfg).items():
        value = getattr(owner, attr)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> ExperimentConfig:
    return apply_pairs(ExperimentConfig(), parse_text(text)).validate()
