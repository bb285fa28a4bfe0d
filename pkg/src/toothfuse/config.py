"""Pipeline configuration: nested dataclasses with a flat ``key = value`` form.

Keys are dotted (``register.voxel``, ``fuse.min_cluster``). Values are
parsed according to the field's declared type; ``none`` clears optional
fields and tuples are comma separated. Later sources override earlier ones
(defaults, then a config file, then command-line settings).
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .register import RegistrationConfig


class ConfigError(ValueError):
    pass


@dataclass
class SmoothConfig:
    iterations: int = 10
    normal_gate_deg: float = 60.0
    step: float = 0.5
    inflate: float = -0.53


@dataclass
class SegmentConfig:
    percentile: float = 15.0
    order: int = 2
    min_component: int = 30
    split_iterations: int = 500


@dataclass
class FuseConfig:
    removal_fraction: typing.Optional[float] = None
    default_fraction: float = 0.2
    dbscan_eps: typing.Optional[float] = None
    dbscan_min_pts: int = 8
    min_cluster: int = 50
    radius_factors: tuple = (1.0, 2.0, 4.0)
    smooth_iterations: int = 2
    smooth_step: float = 0.5


@dataclass
class MetricsConfig:
    density: float = 20.0
    mode: str = "sample"


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 0  # 0 = logical cores
    smooth: SmoothConfig = field(default_factory=SmoothConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    register: RegistrationConfig = field(default_factory=RegistrationConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def worker_count(self):
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


# the top-level seed drives every random stage
_HIDDEN = {"register.seed"}


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def flatten(cfg, prefix=""):
    """Ordered ``{dotted key: value}`` of every leaf field."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        elif key not in _HIDDEN:
            out[key] = v
    return out


def dumps(cfg) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(cfg).items())


def _parse(text, typ, default):
    text = text.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union:
        if text.lower() == "none":
            return None
        typ = next(a for a in args if a is not type(None))
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is tuple or origin is tuple:
        item = type(default[0]) if default else float
        return tuple(item(x) for x in text.replace(",", " ").split())
    if typ in (int, float, str):
        return typ(text)
    raise ValueError(f"unsupported field type {typ!r}")


def apply(cfg, settings: dict):
    """Copy of ``cfg`` with dotted-key string settings applied."""
    cfg = dataclasses.replace(cfg)
    for key, text in settings.items():
        parts = key.strip().split(".")
        owner = cfg
        path = []
        for name in parts[:-1]:
            child = getattr(owner, name, None)
            if not dataclasses.is_dataclass(child):
                raise ConfigError(f"unknown config key {key!r}")
            child = dataclasses.replace(child)
            setattr(owner, name, child)
            path.append(name)
            owner = child
        name = parts[-1]
        hints = typing.get_type_hints(type(owner))
        if name not in hints or key in _HIDDEN or dataclasses.is_dataclass(getattr(owner, name)):
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(owner, name, _parse(str(text), hints[name], getattr(owner, name)))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return cfg


def parse_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load(path=None, settings: dict | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``settings``."""
    cfg = PipelineConfig()
    if path is not None:
        cfg = apply(cfg, parse_text(Path(path).read_text()))
    if settings:
        cfg = apply(cfg, settings)
    return cfg


def registration_config(cfg: PipelineConfig) -> RegistrationConfig:
    return dataclasses.replace(cfg.register, seed=cfg.seed)
