"""Flat key=value run configuration covering ModelConfig + TrainConfig + paths.

File format: one `key = value` per line, `#` starts a comment. Unknown keys
are rejected. Booleans accept on/off, true/false, yes/no, 1/0.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import AllSparkError, ConfigError
from .model import ModelConfig
from .training import TrainConfig

PATH_KEYS = {"data": "", "out": ""}

_TRUE = {"1", "true", "on", "yes"}
_FALSE = {"0", "false", "off", "no"}


def _schema() -> dict[str, tuple[type, Any]]:
    out: dict[str, tuple[type, Any]] = {}
    for cls in (ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            out[f.name] = (type(f.default), f.default)
    for k, v in PATH_KEYS.items():
        out[k] = (str, v)
    return out


SCHEMA = _schema()


def coerce(key: str, raw) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ, _ = SCHEMA[key]
    if not isinstance(raw, str):
        return typ(raw)
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ.__name__})") from None


def parse_config_text(text: str) -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        values[key.strip()] = coerce(key.strip(), val)
    return values


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    out: str = ""

    @classmethod
    def from_values(cls, values: dict[str, Any]) -> "RunConfig":
        for k in values:
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
        m_names = {f.name for f in dataclasses.fields(ModelConfig)}
        t_names = {f.name for f in dataclasses.fields(TrainConfig)}
        try:
            model = ModelConfig(**{k: v for k, v in values.items() if k in m_names})
            train = TrainConfig(**{k: v for k, v in values.items() if k in t_names})
        except AllSparkError as e:
            raise ConfigError(str(e)) from None
        return cls(model, train, values.get("data", ""), values.get("out", ""))

    def to_values(self) -> dict[str, Any]:
        out = dataclasses.asdict(self.model)
        out.update(dataclasses.asdict(self.train))
        out.update(data=self.data, out=self.out)
        return out

    def to_text(self, include_paths: bool = False) -> str:
        lines = []
        for k, v in self.to_values().items():
            if k in PATH_KEYS and not include_paths:
                continue
            if isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def load_run_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """File values first, then command-line overrides (which win)."""
    values: dict[str, Any] = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        values.update(parse_config_text(text))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = coerce(k, v)
    return RunConfig.from_values(values)
