"""Run configuration: one JSON file, strict schema, dotted flag overrides.

Precedence is flags > file > defaults. Every randomised step derives its
generator from ``RunConfig.seed`` via ``synth.sample_rng(seed, index, stream)``
with stream 0 for sample generation and stream 1 for augmentation.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .solver import SCHEDULES, SolverConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


SWEEP_TARGETS = ("mask", "joints")


@dataclass(frozen=True)
class SweepConfig:
    target: str = "mask"
    probs: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    n_samples: int = 50

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if self.target not in SWEEP_TARGETS:
            raise ValueError(f"sweep target must be one of {SWEEP_TARGETS}")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError("sweep probabilities must lie in [0, 1]")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")


def _default_variants() -> dict:
    return {k: tuple(tuple(s) for s in v) for k, v in SCHEDULES.items()}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_samples: int = 10
    augment: bool = False  # apply the synth config's augmentation when writing a dataset
    workers: int = 1
    synth: SynthConfig = field(default_factory=lambda: SynthConfig().clean())
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    # ablation rows: name -> per-stage (mask, fusion); "progressive" and "naive" are compared per trial
    variants: dict[str, tuple[tuple[str, str], ...]] = field(default_factory=_default_variants)
    data_dir: str = ""
    results_dir: str = ""
    out: str = ""

    def __post_init__(self):
        if self.n_samples < 0 or self.workers < 1:
            raise ValueError("n_samples must be >= 0 and workers >= 1")
        for name, sched in self.variants.items():
            SolverConfig(schedule=sched)  # validates the stage names
            if not sched:
                raise ValueError(f"variant {name!r} has no stages")

    def synth_config(self) -> SynthConfig:
        return replace(self.synth, seed=self.seed)

    def to_dict(self) -> dict:
        return to_dict(self)


# --------------------------------------------------------------------------- strict conversion


def to_dict(obj):
    if is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def _coerce(tp, value, where: str):
    if is_dataclass(tp):
        return from_dict(tp, value, where + ".")
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        rest = [a for a in args if a is not type(None)]
        return _coerce(rest[0], value, where)
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if not args:
            return tuple(_plain(v) for v in value)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return {str(k): _coerce(args[1], v, f"{where}.{k}") for k, v in value.items()}
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false")
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def _plain(v):
    return tuple(_plain(x) for x in v) if isinstance(v, list) else v


def from_dict(cls, data, prefix: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys and wrong types raise ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls) if f.init]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config keys: {[prefix + k for k in unknown]}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override {key!r}")
    d[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with the value parsed as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then dotted ``overrides``."""
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for k, v in (overrides or {}).items():
        set_dotted(data, k, v)
    # nested sections start from the defaults so partial sections are allowed
    base = to_dict(RunConfig())
    for section in ("synth", "solver", "sweep"):
        if section in data and isinstance(data[section], dict):
            merged = _merge(base[section], data[section])
            data[section] = merged
    return from_dict(RunConfig, data)


def _merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
