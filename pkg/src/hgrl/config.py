"""Pipeline configuration: a flat JSON object of dotted keys.

Example ``config.json``::

    {"dataset_dir": "data/synth", "seed": 0, "ctsa.W": 8, "gat.variant": "full"}

Any key may be overridden on the command line with ``--set key=value``.
Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CtsaSection:
    W: int = 8
    S: int = 4
    gamma1: float = 0.5
    d_k: int = 16
    N_a: int = 3
    K_neg: int = 2
    epochs: int = 40
    lr: float = 1e-2


@dataclass(frozen=True)
class SoftDtwSection:
    gamma2: float = 1.0
    alpha: float = 1.0
    topk: int = 5


@dataclass(frozen=True)
class ShapeletSection:
    scales: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    K: int = 64
    delta1: float = -5.0
    # "lambda" is a keyword; the JSON key stays "shapelets.lambda"
    lambda_: float = 0.5
    tau_sim: float = 0.1
    epsilon_percentile: float = 90.0
    epochs: int = 100
    lr: float = 1e-2


@dataclass(frozen=True)
class GatSection:
    layers: int = 2
    hidden: int = 64
    variant: str = "full"
    epochs: int = 300
    lr: float = 1e-3


@dataclass(frozen=True)
class PipelineConfig:
    dataset_dir: str = ""
    out_dir: str = "runs/latest"
    seed: int = 0
    label_fraction: float = 0.1
    ctsa: CtsaSection = field(default_factory=CtsaSection)
    softdtw: SoftDtwSection = field(default_factory=SoftDtwSection)
    shapelets: ShapeletSection = field(default_factory=ShapeletSection)
    gat: GatSection = field(default_factory=GatSection)

    def validate(self) -> "PipelineConfig":
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if not 0 <= self.ctsa.gamma1 <= 1:
            raise ConfigError("ctsa.gamma1 must lie in [0, 1]")
        counts = {
            "ctsa.W": self.ctsa.W, "ctsa.S": self.ctsa.S, "ctsa.d_k": self.ctsa.d_k,
            "ctsa.N_a": self.ctsa.N_a, "shapelets.K": self.shapelets.K,
            "gat.layers": self.gat.layers, "gat.hidden": self.gat.hidden,
        }
        for key, v in counts.items():
            if v < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key, v in {"ctsa.K_neg": self.ctsa.K_neg, "ctsa.epochs": self.ctsa.epochs,
                       "shapelets.epochs": self.shapelets.epochs, "gat.epochs": self.gat.epochs,
                       "softdtw.topk": self.softdtw.topk}.items():
            if v < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not self.shapelets.scales:
            raise ConfigError("shapelets.scales must be non-empty")
        if self.gat.variant not in ("full", "node_only", "type_only", "gcn"):
            raise ConfigError(f"unknown gat.variant {self.gat.variant!r}")
        return self


def _json_key(name: str) -> str:
    return name.rstrip("_")


def to_flat(cfg: PipelineConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            for g in fields(v):
                out[f"{f.name}.{_json_key(g.name)}"] = getattr(v, g.name)
        else:
            out[f.name] = v
    return out


def _field_map() -> dict[str, tuple[str, str | None]]:
    """dotted key -> (top-level field, section field or None)."""
    m: dict[str, tuple[str, str | None]] = {}
    for f in fields(PipelineConfig):
        default = PipelineConfig()
        v = getattr(default, f.name)
        if is_dataclass(v):
            for g in fields(v):
                m[f"{f.name}.{_json_key(g.name)}"] = (f.name, g.name)
        else:
            m[f.name] = (f.name, None)
    return m


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
        ):
            raise ConfigError(f"{key}: expected a list of numbers")
        return [float(x) for x in value]
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def from_flat(flat: dict[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    fmap = _field_map()
    unknown = sorted(set(flat) - set(fmap))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {}
    for key, value in flat.items():
        name, sub = fmap[key]
        if sub is None:
            top[name] = _coerce(key, value, getattr(cfg, name))
        else:
            default = getattr(getattr(cfg, name), sub)
            sections.setdefault(name, {})[sub] = _coerce(key, value, default)
    for name, changes in sections.items():
        top[name] = replace(getattr(cfg, name), **changes)
    return replace(cfg, **top).validate()


def parse_assignment(text: str) -> tuple[str, Any]:
    """``key=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None, overrides: list[str] = (), **direct: Any) -> PipelineConfig:
    flat: dict[str, Any] = {}
    if path:
        try:
            with open(path) as fh:
                flat = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a flat JSON object")
    for item in overrides:
        k, v = parse_assignment(item)
        flat[k] = v
    for k, v in direct.items():
        if v is not None:
            flat[k] = v
    return from_flat(flat)


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(to_flat(cfg), indent=2, sort_keys=True)
