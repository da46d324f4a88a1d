"""Structured configuration: nested sections mirroring the training,
geometry-optimization, encoding, and render options, loadable from YAML.
Unknown keys are rejected; every value has a default."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .afnet import EncodingConfig
from .errors import ConfigError
from .geomopt import GeomOptConfig
from .trainer import TrainConfig


@dataclass
class RenderOptions:
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    refine: bool = False
    erode_radius: int = 2  # composition mask shrink, pixels
    k: int = 16  # buffer depth for debug dumps

    def __post_init__(self):
        if self.erode_radius < 0 or self.k < 1:
            raise ConfigError("erode_radius >= 0 and k >= 1 required")


@dataclass
class Config:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    geomopt: GeomOptConfig = field(default_factory=GeomOptConfig)
    render: RenderOptions = field(default_factory=RenderOptions)


_SECTIONS = {"encoding": EncodingConfig, "train": TrainConfig,
             "geomopt": GeomOptConfig, "render": RenderOptions}


def _build_section(cls, data: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        if f.type in ("tuple[float, float, float]", "tuple[float, float, float] | None") and value is not None:
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}] config: {e}")


def load_config(path=None) -> Config:
    """Load YAML config; missing file fields fall back to defaults."""
    if path is None:
        return Config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    return Config(**kwargs)


def dump_defaults() -> str:
    """YAML text of every option at its default value."""
    cfg = Config()
    out = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        for k, v in section.items():
            if isinstance(v, tuple):
                section[k] = list(v)
        out[name] = section
    return yaml.safe_dump(out, sort_keys=False)
