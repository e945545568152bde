"""Experiment configuration: a nested YAML document validated against the library dataclasses.

Every section mirrors one dataclass, so field names, types and defaults are
declared once.  Unknown keys and mistyped values are rejected with a
JSON-pointer path such as ``/train/lr_theta``.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from pathlib import Path

import yaml

from .datagen import BoidsSpec, SdeSpec
from .divergence import DivergenceConfig
from .energy import EnergyConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class IntegratorSection:
    scheme: str = "damped-velocity-verlet"
    substeps: int = 5


@dataclasses.dataclass
class DataSection:
    kind: str = "sde"
    v0_mode: str = "provided"
    subsample: int | None = None


@dataclasses.dataclass
class EvalSection:
    protocol: str = "forecast"
    heldout: list = dataclasses.field(default_factory=list)
    v_mode: str = "carried"
    formats: list = dataclasses.field(default_factory=lambda: ["csv", "json"])
    weights: str = "ema"
    resample: int | None = None


@dataclasses.dataclass
class TopSection:
    seed: int = 0
    output_dir: str = "runs/experiment"


# section name -> (dataclass, fields that are not configurable here)
SECTIONS = {
    "sde": (SdeSpec, {"seed"}),
    "boids": (BoidsSpec, {"seed"}),
    "energy": (EnergyConfig, {"dim"}),
    "train": (TrainConfig, {"loss", "seed"}),
    "loss": (DivergenceConfig, set()),
    "integrator": (IntegratorSection, set()),
    "data": (DataSection, set()),
    "eval": (EvalSection, set()),
}


def _fields(cls, skip=()):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}


def _default(cls, name):
    f = next(f for f in dataclasses.fields(cls) if f.name == name)
    if f.default is not dataclasses.MISSING:
        return copy.deepcopy(f.default)
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def defaults() -> dict:
    """The full default document (what an empty config file means)."""
    doc = {k: _default(TopSection, k) for k in _fields(TopSection)}
    for name, (cls, skip) in SECTIONS.items():
        sec = {}
        for k in _fields(cls, skip):
            v = _default(cls, k)
            if dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            sec[k] = list(map(list, v)) if isinstance(v, tuple) else v
        doc[name] = sec
    return doc


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is typing.Any:
        return True
    if origin in (list, tuple) or hint in (list, tuple):
        return isinstance(value, (list, tuple))
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True


def _type_name(hint) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def validate(doc: dict) -> dict:
    """Merge ``doc`` over the defaults, checking keys and types; returns the full document."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("/: config root must be a mapping")
    full = defaults()
    top = _fields(TopSection)
    for key, value in doc.items():
        if key in top:
            if not _type_ok(value, top[key]):
                raise ConfigError(f"/{key}: expected {_type_name(top[key])}, got {value!r}")
            full[key] = value
            continue
        if key not in SECTIONS:
            raise ConfigError(f"/{key}: unknown key (expected one of {sorted(list(top) + list(SECTIONS))})")
        if value is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"/{key}: expected a mapping")
        cls, skip = SECTIONS[key]
        allowed = _fields(cls, skip)
        for sub, v in value.items():
            if sub not in allowed:
                raise ConfigError(f"/{key}/{sub}: unknown key")
            if not _type_ok(v, allowed[sub]):
                raise ConfigError(f"/{key}/{sub}: expected {_type_name(allowed[sub])}, got {v!r}")
            full[key][sub] = v
    # let the dataclasses check value ranges, reporting the section that failed
    for name in SECTIONS:
        try:
            build(full, name)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            # point at the offending field when the message names one
            hit = next((k for k in full[name] if k in msg), None)
            raise ConfigError(f"/{name}/{hit}: {msg}" if hit else f"/{name}: {msg}") from None
    return full


def build(full: dict, name: str, dim: int = 2, seed: int | None = None):
    """Instantiate the dataclass for one section of a validated document."""
    seed = full["seed"] if seed is None else seed
    sec = dict(full[name])
    if name == "sde":
        return SdeSpec(seed=seed, **sec)
    if name == "boids":
        sec["mixture_centers"] = tuple(tuple(c) for c in sec["mixture_centers"])
        return BoidsSpec(seed=seed, **sec)
    if name == "energy":
        return EnergyConfig(dim=dim, **sec)
    if name == "train":
        return TrainConfig(seed=seed, loss=DivergenceConfig(**full["loss"]), **sec)
    if name == "loss":
        return DivergenceConfig(**sec)
    if name == "integrator":
        return IntegratorSection(**sec)
    if name == "data":
        d = DataSection(**sec)
        if d.kind not in ("sde", "boids"):
            raise ConfigError(f"/data/kind: expected 'sde' or 'boids', got {d.kind!r}")
        return d
    if name == "eval":
        e = EvalSection(**sec)
        if e.protocol not in ("forecast", "interpolate", "both"):
            raise ConfigError(f"/eval/protocol: expected forecast, interpolate or both, got {e.protocol!r}")
        if e.weights not in ("ema", "live"):
            raise ConfigError(f"/eval/weights: expected 'ema' or 'live', got {e.weights!r}")
        return e
    raise KeyError(name)


def load(path, overrides: dict[str, object] | None = None, raw_overrides: list[str] = ()) -> dict:
    """Read a YAML config (or none), apply typed ``{"section.key": value}`` overrides and
    ``section.key=yaml`` strings, then validate."""
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError("/: config root must be a mapping")
    for dotted, value in (overrides or {}).items():
        doc = set_path(doc, dotted, value)
    for item in raw_overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        doc = set_path(doc, dotted.strip(), value, parse=True)
    return validate(doc)


def set_path(doc: dict, dotted: str, value, parse: bool = False) -> dict:
    """Apply one ``section.key`` override; with ``parse`` the string value is read as YAML."""
    doc = copy.deepcopy(doc)
    parts = dotted.split(".")
    cur = doc
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"/{'/'.join(parts)}: cannot set inside a non-mapping")
    cur[parts[-1]] = yaml.safe_load(value) if parse else value
    return doc


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
