"""Strict JSON run configuration for the command-line front end."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attack import AttackConfig
from .corruptions import DEFAULT_PARAMS, check_parameters
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"      # "synthetic" or "ppm"
    n_train: int = 512
    n_test: int = 256
    n_classes: int = 4
    size: int = 8
    jitter: int = 8
    train_dir: str | None = None   # PPM directories with labels.csv (source == "ppm")
    test_dir: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "ppm"):
            raise ValueError("source: must be 'synthetic' or 'ppm'")
        if self.source == "ppm" and not self.train_dir:
            raise ValueError("train_dir: required when source is 'ppm'")
        for name in ("n_train", "n_test", "size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if not 2 <= self.n_classes <= 10:
            raise ValueError("n_classes: must lie in [2, 10]")
        if self.jitter < 0:
            raise ValueError("jitter: must be >= 0")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    corruptions: dict[str, list[float]] = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    embedding_checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["widths"] = list(self.train.widths)
        return d


_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _section(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        expected = type(getattr(defaults, key))
        if key in ("train_dir", "test_dir"):
            ok = value is None or isinstance(value, str)
        elif key == "widths":
            ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                                 for v in value)
        else:
            allowed = _TYPES.get(expected, (expected,))
            ok = isinstance(value, allowed) and not (expected is not bool and isinstance(value, bool))
        if not ok:
            raise ConfigError(f"{where}.{key}: expected {expected.__name__}, got {value!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    cfg = RunConfig(
        train=_section(TrainConfig, raw.get("train", {}), "train"),
        attack=_section(AttackConfig, raw.get("attack", {}), "attack"),
        data=_section(DataConfig, raw.get("data", {}), "data"),
    )
    corr = raw.get("corruptions", {})
    if not isinstance(corr, dict):
        raise ConfigError("corruptions: expected an object")
    for kind, params in corr.items():
        if kind not in DEFAULT_PARAMS:
            raise ConfigError(f"corruptions.{kind}: unknown kind; valid kinds: {', '.join(DEFAULT_PARAMS)}")
        try:
            cfg.corruptions[kind] = list(check_parameters(kind, params))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"corruptions.{kind}: {exc}") from None
    for key in ("output_dir", "embedding_checkpoint"):
        if key in raw:
            value = raw[key]
            if not (isinstance(value, str) or (value is None and key == "embedding_checkpoint")):
                raise ConfigError(f"{key}: expected a string")
            setattr(cfg, key, value)
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(raw)


def defaults_dict() -> dict:
    d = RunConfig().to_dict()
    d["corruptions"] = {k: list(v) for k, v in DEFAULT_PARAMS.items()}
    return d
