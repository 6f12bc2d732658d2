"""Engine configuration: defaults, YAML loading and command-line overrides.

A config file is YAML with any subset of::

    rules: path/to/rules.yaml
    lists: path/to/lists.yaml
    severity_values: {L: 2, M: 6, H: 8, C: 10}
    absent_value: 1
    weights: [1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7]
    path_thres: 3
    tau: 1378              # fixed threshold; omit to derive it from tau_base
    tau_base: 2.09
    tau_policy: auto       # drop lateral movement while one host is seen; "all" never does
    noise_model: model.json
    out_alerts: alerts.jsonl
    out_hsg: hsg.dot
    format: dot

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .hsg import DEFAULT_SEVERITY_VALUES, DEFAULT_TAU_BASE, DEFAULT_WEIGHTS, N_STAGES, ScoreParams
from .ttp import Severity

CONFIG_ENV = "HOLMESLIKE_CONFIG"
_PATH_FIELDS = ("rules", "lists", "noise_model")
_OUTPUT_FIELDS = ("out_alerts", "out_hsg")


class ConfigError(ValueError):
    pass


@dataclass
class EngineConfig:
    rules: Path | None = None
    lists: Path | None = None
    severity_values: dict[str, float] = field(
        default_factory=lambda: {s.name: v for s, v in DEFAULT_SEVERITY_VALUES.items()})
    absent_value: float = 1.0
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    path_thres: int = 3
    tau: float | None = None
    tau_base: float = DEFAULT_TAU_BASE
    tau_policy: str = "auto"
    noise_model: Path | None = None
    out_alerts: Path | None = None
    out_hsg: Path | None = None
    format: str = "dot"

    def validate(self) -> "EngineConfig":
        for name in _PATH_FIELDS:
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name}: no such file: {p}")
        if len(self.weights) != N_STAGES:
            raise ConfigError(f"weights: expected {N_STAGES} values, got {len(self.weights)}")
        if self.path_thres < 1:
            raise ConfigError("path_thres must be at least 1")
        if self.format not in ("dot", "json"):
            raise ConfigError(f"format must be dot or json, not {self.format!r}")
        missing = {s.name for s in Severity} - set(self.severity_values)
        if missing:
            raise ConfigError(f"severity_values lacks {sorted(missing)}")
        try:
            self.score_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def score_params(self) -> ScoreParams:
        return ScoreParams(
            severity_values={Severity[k]: float(v) for k, v in self.severity_values.items()},
            absent_value=float(self.absent_value),
            weights=tuple(self.weights),
            tau=self.tau,
            tau_base=self.tau_base,
            tau_policy=self.tau_policy,
        )

    def override(self, **values: Any) -> "EngineConfig":
        """Apply non-None keyword overrides in place."""
        for k, v in values.items():
            if v is None:
                continue
            if k in _PATH_FIELDS or k in _OUTPUT_FIELDS:
                v = Path(v)
            elif k == "weights":
                v = tuple(float(x) for x in v)
            setattr(self, k, v)
        return self


def parse_weights(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"weights: not a comma-separated number list: {text!r}") from None


def from_mapping(doc: dict[str, Any], base: Path | None = None) -> EngineConfig:
    known = {f.name for f in fields(EngineConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = EngineConfig()
    for k, v in doc.items():
        if v is None:
            continue
        if k in _PATH_FIELDS or k in _OUTPUT_FIELDS:
            p = Path(v)
            if base is not None and not p.is_absolute():
                p = base / p
            v = p
        elif k == "weights":
            v = parse_weights(v) if isinstance(v, str) else tuple(float(x) for x in v)
        elif k == "severity_values":
            v = {str(s).upper(): float(x) for s, x in dict(v).items()}
        elif k in ("absent_value", "tau", "tau_base"):
            v = float(v)
        elif k == "path_thres":
            v = int(v)
        setattr(cfg, k, v)
    return cfg


def load_config(path: str | Path | None = None) -> EngineConfig:
    """Load ``path``, else the file named by the environment variable, else defaults."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return EngineConfig()
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    try:
        return from_mapping(doc, path.parent)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config {path}: {exc}") from None
