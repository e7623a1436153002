"""Experiment configuration and its sectioned ``key = value`` file format."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

from .dataset import SplitSpec
from .diversification import DbConfig
from .losses import GceConfig

__all__ = ["RcmConfig", "PirlConfig", "TrainConfig", "ConfigError", "PRESETS",
           "parse_experiment", "serialize_experiment", "load_experiment", "config_digest"]

MODES = ("baseline", "rotation", "pirl", "dcl", "db_gce")
LOC_MODES = ("mse", "l1", "bce")
DCL_TERMS = ("cls", "adv", "loc")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RcmConfig:
    k: int = 4
    D: int = 2


@dataclass(frozen=True)
class PirlConfig:
    tau: float = 0.07
    beta: float = 0.5
    negatives: int = 1000
    grid: int = 3
    patch_size: int = 12
    resize: int = 48
    crop: int = 0  # 0 disables the centre crop


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 20
    rotation_lambda: float = 0.5
    aug_scale: float = 1.125  # resize by this factor, then random (train) / centre (test) crop
    embed_dim: int = 32
    loc_mode: str = "mse"
    dcl_ablation: tuple[str, ...] = DCL_TERMS
    dtype: str = "float32"
    seed: int = 0
    rcm: RcmConfig = field(default_factory=RcmConfig)
    pirl: PirlConfig = field(default_factory=PirlConfig)
    db: DbConfig = field(default_factory=DbConfig)
    gce: GceConfig = field(default_factory=GceConfig)
    split: SplitSpec = field(default_factory=SplitSpec)

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and 0 <= momentum < 1")
        if not 0 <= self.rotation_lambda <= 1:
            raise ConfigError("lambda must be in [0, 1]")
        if self.loc_mode not in LOC_MODES:
            raise ConfigError(f"unknown loc_mode {self.loc_mode!r}")
        if self.mode == "dcl" and not self.dcl_ablation:
            raise ConfigError("dcl_ablation must name at least one term")
        if set(self.dcl_ablation) - set(DCL_TERMS):
            raise ConfigError(f"dcl_ablation terms must come from {DCL_TERMS}")
        if self.aug_scale < 1:
            raise ConfigError("aug_scale must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 <= self.rcm.D < self.rcm.k or self.rcm.k < 2:
            raise ConfigError("rcm needs k >= 2 and 0 <= D < k")
        if self.pirl.grid ** 2 not in (4, 9) or self.pirl.tau <= 0 or not 0 <= self.pirl.beta <= 1:
            raise ConfigError("pirl needs grid 2 or 3, tau > 0 and beta in [0, 1]")
        if self.gce.k < 1 or self.gce.warmup_epochs < 0:
            raise ConfigError("gce needs k >= 1 and warmup_epochs >= 0")
        if not 0 < self.split.label_fraction <= 1:
            raise ConfigError("label_fraction must be in (0, 1]")
        return self

    def with_overrides(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()


PRESETS = {
    "desk": TrainConfig(),
    # full-scale optimiser regime (110 epochs, decay ×0.1 after 50, lr 0.001)
    "full": TrainConfig(epochs=110, lr=0.001, lr_decay_epoch=50),
}

# file key -> dataclass attribute, where they differ
_KEY_ALIASES = {"lambda": "rotation_lambda"}
_SECTIONS = {"rcm": RcmConfig, "pirl": PirlConfig, "db": DbConfig, "gce": GceConfig, "split": SplitSpec}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def serialize_experiment(cfg: TrainConfig) -> str:
    reverse = {v: k for k, v in _KEY_ALIASES.items()}
    lines = ["[train]"]
    for f in dataclasses.fields(cfg):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{reverse.get(f.name, f.name)} = {_format(getattr(cfg, f.name))}")
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{f.name} = {_format(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def parse_experiment(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse an experiment file; keys absent from the file keep ``base`` values."""
    base = base or TrainConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_file(io.StringIO(text))
    except configparser.Error as exc:
        raise ConfigError(f"malformed experiment file: {exc}") from None
    unknown_sections = set(parser.sections()) - {"train", *_SECTIONS}
    if unknown_sections:
        raise ConfigError(f"unknown sections: {sorted(unknown_sections)}")
    changes = {}
    if parser.has_section("train"):
        top = {f.name for f in dataclasses.fields(base)} - set(_SECTIONS)
        for key, raw in parser.items("train"):
            attr = _KEY_ALIASES.get(key, key)
            if attr not in top:
                raise ConfigError(f"unknown key [train] {key}")
            changes[attr] = _parse_value(raw, getattr(base, attr), key)
    for section, cls in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        sub = getattr(base, section)
        names = {f.name for f in dataclasses.fields(cls)}
        sub_changes = {}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key [{section}] {key}")
            sub_changes[key] = _parse_value(raw, getattr(sub, key), key)
        try:
            changes[section] = dataclasses.replace(sub, **sub_changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return dataclasses.replace(base, **changes).validate()


def load_experiment(path) -> TrainConfig:
    with open(path) as fh:
        return parse_experiment(fh.read())


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(serialize_experiment(cfg).encode()).hexdigest()
