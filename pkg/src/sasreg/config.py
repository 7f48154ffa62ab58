"""Experiment configuration: TOML files, dotted CLI overrides, env overrides.

The config file uses sections [data], [model], [loss], [optim], [ablation]
and [run]; every field can be overridden from the command line by a flag of
the same dotted name (e.g. --optim.lr 2e-4). SASREG_SEED and SASREG_DEVICE
environment variables override the resolved seed/device last.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights

try:  # stdlib on 3.11+; the fallback below covers this config grammar on 3.10
    import tomllib as _toml
except ImportError:  # pragma: no cover - exercised only on Python 3.10
    _toml = None


class ConfigError(ValueError):
    pass


def _parse_toml_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_toml_value(part) for part in inner.split(",")]
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse TOML value {text!r}") from exc


def _strip_comment(line: str) -> str:
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:i]
    return line


def _loads_toml_subset(text: str) -> dict:
    """Strict parser for the subset of TOML this package writes and reads:
    [section] headers, key = value with strings/ints/floats/bools/flat arrays,
    and # comments."""
    result: dict = {}
    section = result
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"line {lineno}: empty section name")
            section = result.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        section[key.strip()] = _parse_toml_value(value)
    return result


def load_toml(path: Path) -> dict:
    text = Path(path).read_text()
    if _toml is not None:
        return _toml.loads(text)
    return _loads_toml_subset(text)


@dataclass
class TrainConfig:
    """Everything a training run needs; defaults match the published recipe
    (Adam at 1e-4 with betas (0.5, 0.999), batch 4, 200 epochs)."""

    # [data]
    data_root: str = ""
    layout: str = "synthetic"
    augment: bool = True
    # [model]
    base_channels: int = 32
    appearance_base_channels: int = 16
    scene_channels: int = 64
    code_dim: int = 32
    eps: float = 1e-6
    # [loss]
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # [optim]
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 200
    # [ablation]
    drop_scene: bool = False
    drop_cycle: bool = False
    drop_align: bool = False
    drop_appearance_encoder: bool = False
    # [run]
    seed: int = 0
    out_dir: str = "runs/exp"
    checkpoint_every: int = 1
    device: str = "cpu"
    val_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def effective_loss_weights(self) -> LossWeights:
        """Loss weights with ablation drops applied as zeroed lambdas."""
        w = self.loss_weights.to_dict()
        if self.drop_scene:
            w["lambda_scene"] = 0.0
        if self.drop_cycle:
            w["lambda_cycle"] = 0.0
        if self.drop_align:
            w["lambda_align"] = 0.0
        return LossWeights(**w)

    def to_sections(self) -> dict:
        lw = self.loss_weights.to_dict()
        return {
            "data": {"root": self.data_root, "layout": self.layout, "augment": self.augment},
            "model": {"base_channels": self.base_channels,
                      "appearance_base_channels": self.appearance_base_channels,
                      "scene_channels": self.scene_channels,
                      "code_dim": self.code_dim, "eps": self.eps},
            "loss": lw,
            "optim": {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                      "batch_size": self.batch_size, "epochs": self.epochs},
            "ablation": {"drop_scene": self.drop_scene, "drop_cycle": self.drop_cycle,
                         "drop_align": self.drop_align,
                         "drop_appearance_encoder": self.drop_appearance_encoder},
            "run": {"seed": self.seed, "out_dir": self.out_dir,
                    "checkpoint_every": self.checkpoint_every, "device": self.device,
                    "val_every": self.val_every},
        }

    @classmethod
    def from_sections(cls, sections: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs: dict = {}
        rename = {("data", "root"): "data_root"}
        for section, content in sections.items():
            if section not in ("data", "model", "loss", "optim", "ablation", "run"):
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(content, dict):
                raise ConfigError(f"section [{section}] must hold key = value pairs")
            if section == "loss":
                continue
            for key, value in content.items():
                name = rename.get((section, key), key)
                if name not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
                kwargs[name] = value
        if "loss" in sections:
            kwargs["loss_weights"] = LossWeights(**sections["loss"])
        return cls(**kwargs)

    @classmethod
    def from_toml(cls, path: Path) -> "TrainConfig":
        return cls.from_sections(load_toml(path))


def _coerce(current, text: str):
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_overrides(config: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply {"section.key": "value"} CLI overrides on top of a config."""
    sections = config.to_sections()
    for dotted, text in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in sections or key not in sections[section]:
            raise ConfigError(f"unknown config field {dotted!r}")
        sections[section][key] = _coerce(sections[section][key], text)
    return TrainConfig.from_sections(sections)


def apply_env(config: TrainConfig, env: dict | None = None) -> TrainConfig:
    """SASREG_SEED / SASREG_DEVICE take precedence over file and CLI values."""
    env = os.environ if env is None else env
    overrides = {}
    if env.get("SASREG_SEED"):
        overrides["run.seed"] = env["SASREG_SEED"]
    if env.get("SASREG_DEVICE"):
        overrides["run.device"] = env["SASREG_DEVICE"]
    return apply_overrides(config, overrides) if overrides else config
