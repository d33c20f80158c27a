"""Run configuration: flat ``key=value`` text layered as defaults < file < env < flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

VARIANTS = ("sc", "ctm", "mc")


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class ModelConfig:
    variant: str = "sc"
    sc_widths: tuple[int, ...] = (8, 16, 32, 64)
    sc_channels: int = 64
    ctm_widths: tuple[int, ...] = (32, 32)
    ctm_channels: int = 32
    branch_channels: int = 32
    fuse_channels: int = 32
    head_width: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    max_iter: int = 2000
    p_decay: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0002
    batch_size: int = 16
    pos_ratio: int = 1
    neg_ratio: int = 1
    augment: bool = True
    n_crops: int = 5
    hnm: bool = False
    hnm_pool_factor: int = 10
    hnm_top_fraction: float = 0.25
    hnm_iters: int = 500
    hnm_mix: float = 0.5
    hnm_lr_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.p_decay <= 0:
            raise ConfigError("p_decay must be positive")
        if self.max_iter < 0 or self.hnm_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.pos_ratio < 1 or self.neg_ratio < 1:
            raise ConfigError("pos_ratio and neg_ratio must be at least 1")
        n_pos = self.n_positives
        if n_pos < 1 or self.batch_size - n_pos < 1:
            raise ConfigError(
                f"batch_size {self.batch_size} with ratio {self.pos_ratio}:{self.neg_ratio} "
                "leaves no positives or no negatives"
            )

    @property
    def n_positives(self) -> int:
        # remainders go to the negatives
        return self.batch_size * self.pos_ratio // (self.pos_ratio + self.neg_ratio)


@dataclass
class DataConfig:
    data: str = ""
    data_seed: int = 0
    n_identities: int = 32
    n_train_ids: int = 16
    split_seed: int = 0
    trials: int = 1
    gallery_size: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def keys(self) -> dict[str, tuple[str, dataclasses.Field]]:
        out = {}
        for section in ("model", "train", "data"):
            for f in fields(getattr(self, section)):
                out[f.name] = (section, f)
        return out

    def to_text(self) -> str:
        lines = []
        for section in ("model", "train", "data"):
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def with_updates(self, updates: dict[str, str]) -> "RunConfig":
        keys = self.keys()
        pending = {"model": {}, "train": {}, "data": {}}
        for key, raw in updates.items():
            if key not in keys:
                raise ConfigError(f"unknown config key {key!r}")
            section, f = keys[key]
            pending[section][key] = _parse(f, raw)
        try:
            return RunConfig(
                model=dataclasses.replace(self.model, **pending["model"]),
                train=dataclasses.replace(self.train, **pending["train"]),
                data=dataclasses.replace(self.data, **pending["data"]),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return _ints(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
    return raw


def parse_kv_lines(text: str, origin: str = "<text>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(config_path=None, overrides=None, env=None, seed=None) -> RunConfig:
    """Layer defaults < config file < environment (PPMN_SEED) < flags."""
    cfg = RunConfig()
    if config_path:
        path = Path(config_path)
        cfg = cfg.with_updates(parse_kv_lines(path.read_text(), str(path)))
    env = os.environ if env is None else env
    if env.get("PPMN_SEED"):
        cfg = cfg.with_updates({"seed": env["PPMN_SEED"]})
    flags = dict(overrides or {})
    if seed is not None:
        flags["seed"] = str(seed)
    return cfg.with_updates(flags)
