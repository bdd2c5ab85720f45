"""Run configuration: one YAML file of sections, adjustable with ``section.key=value`` overrides.

Example file::

    seed: 0
    data:
      spacing_mm: 1.0
    network:
      group_channels: [16, 24, 32, 32, 32]
      crop_side: 32
    train:
      epochs: 20
    eval:
      score_threshold: 0.1
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .exceptions import ConfigError
from .network import NetworkConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    spacing_mm: float = 1.0

    def validate(self) -> "DataConfig":
        if not self.spacing_mm > 0:
            raise ConfigError("data.spacing_mm must be positive")
        return self


@dataclass
class EvalConfig:
    score_threshold: float = 0.1
    nms_threshold: float = 0.1
    use_nms: bool = True
    max_candidates: int = 0
    batch_size: int = 4

    def validate(self) -> "EvalConfig":
        if not 0 <= self.score_threshold <= 1:
            raise ConfigError("eval.score_threshold must lie in [0, 1]")
        if not 0 <= self.nms_threshold <= 1:
            raise ConfigError("eval.nms_threshold must lie in [0, 1]")
        if self.max_candidates < 0 or self.batch_size < 1:
            raise ConfigError("eval.max_candidates must be >= 0 and eval.batch_size >= 1")
        return self


_SECTIONS = {"data": DataConfig, "network": NetworkConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for name in _SECTIONS:
            section = getattr(self, name)
            d = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown configuration section(s): {', '.join(sorted(unknown))}")
        kw: Dict[str, Any] = {}
        if "seed" in d:
            kw["seed"] = _coerce(d["seed"], int, "seed")
        for name, typ in _SECTIONS.items():
            values = d.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name: f for f in fields(typ)}
            bad = set(values) - set(allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(bad))}")
            defaults = typ()
            args = {k: _coerce(v, type(getattr(defaults, k)), f"{name}.{k}") for k, v in values.items()}
            try:
                kw[name] = typ(**args)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} section: {exc}") from exc
        return cls(**kw).validate()


def _coerce(value, typ, key: str):
    try:
        if typ is tuple:
            if not isinstance(value, (list, tuple)):
                value = [value]
            return tuple(value)
        if typ is bool:
            if isinstance(value, bool):
                return value
            raise ValueError("expected true or false")
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError("expected an integer")
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError("expected a number")
            return float(value)
        if typ is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc} (got {value!r})") from None
    return value


def apply_overrides(d: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``a.b=value`` assignments; values are parsed as YAML scalars or lists."""
    d = copy.deepcopy(d)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value in {item!r}: {exc}") from None
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-section")
        node[parts[-1]] = value
    return d


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a YAML file (or start from defaults when ``path`` is None) and apply overrides."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
