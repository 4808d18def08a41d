"""Run configuration: a validated union of a key=value file and CLI flags.

File syntax is one ``key = value`` per line; ``#`` starts a comment.  Every
key must be in :data:`SCHEMA`; anything else is an error.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from pfseg.models import FUSION_INITS, ModelSpec
from pfseg.train import TrainConfig


class ConfigError(ValueError):
    pass


def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_ints(s: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


def parse_size(s: str) -> Tuple[int, int]:
    parts = s.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"size must look like HxW, got {s!r}")
    return int(parts[0]), int(parts[1])


def parse_choice(choices):
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {s!r}")
        return v

    return parse


def _fmt(key: str, v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if SCHEMA[key][0] is parse_size:
        return f"{v[0]}x{v[1]}"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# key -> (parser, default)
_MODEL_KEYS: Dict[str, Tuple[Callable, Any]] = {
    "num_classes": (int, 11),
    "encoder_widths": (parse_ints, (64, 128, 256, 512)),
    "decoder_widths": (parse_ints, (256, 128, 64, 64)),
    "backbone_kernel": (int, 7),
    "fusion_kernel": (int, 3),
    "fusion_bias": (parse_bool, False),
}
_TRAIN_TYPES = {"int": int, "float": float}
_TRAIN_KEYS: Dict[str, Tuple[Callable, Any]] = {
    f.name: (_TRAIN_TYPES[f.type] if isinstance(f.type, str) else f.type, f.default) for f in fields(TrainConfig)
}
_DATA_KEYS: Dict[str, Tuple[Callable, Any]] = {
    "data_seed": (int, 0),
    "train_scenes": (int, 64),
    "test_scenes": (int, 32),
    "size": (parse_size, (64, 64)),
    "offset": (int, 3),
    "jitter": (float, 0.03),
    "objects_min": (int, 1),
    "objects_max": (int, 2),
    "twin_separation": (float, 0.0),
    "init_from_baseline": (parse_bool, False),
    "fusion_init": (parse_choice(FUSION_INITS), "random"),
}
SCHEMA: Dict[str, Tuple[Callable, Any]] = {**_MODEL_KEYS, **_TRAIN_KEYS, **_DATA_KEYS}


class RunConfig:
    """Resolved configuration values with typed access by attribute."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def model_spec(self, variant: str) -> ModelSpec:
        kw = {k: self.values[k] for k in _MODEL_KEYS}
        try:
            return ModelSpec(variant=variant, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, **overrides) -> TrainConfig:
        kw = {k: self.values[k] for k in _TRAIN_KEYS}
        kw.update(overrides)
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(k, v)}\n" for k, v in sorted(self.values.items()))


def read_config_file(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """File values first, then ``overrides`` (flags) on top."""
    cfg = RunConfig()
    if path is not None:
        for k, v in read_config_file(path).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    return cfg
