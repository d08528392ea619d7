"""Run configuration: one YAML file with a section per module.

Unknown keys are errors. ``dump_config`` output loads back to an identical
``RunConfig`` and dumps byte-identically.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from . import recurrent as rec
from .evaluation import ProbeConfig, SweepConfig
from .experiment import FrontEndConfig, SpeakerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    num_speakers: int = 20
    utts_per_speaker: int = 10
    n_train: int = 50
    n_valid: int = 10
    n_test: int = 10
    held_out: int = 4
    seed: int = 0


@dataclass
class ModelSection:
    layers: int = 2
    units_per_direction: int = 64
    bidirectional: bool = True
    variant: str = "basic"
    a: float = 1.0


@dataclass
class ProbeSection(ProbeConfig):
    variant: str = "blue_cut"
    tau_frames: float = 10.0
    delays: list = field(default_factory=lambda: [0, 1, 2, 5, 10, 20, 50])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    signal: FrontEndConfig = field(default_factory=FrontEndConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    seed: int = 0
    output_dir: str = "runs"

    def base_model(self) -> rec.ModelConfig:
        m = self.model
        return rec.ModelConfig(input_dim=self.signal.num_bins, layers=m.layers,
                               units_per_direction=m.units_per_direction,
                               bidirectional=m.bidirectional, variant=rec.Variant(m.variant),
                               leak=rec.LeakConfig(a=m.a, hop_seconds=self.signal.hop_seconds),
                               output_dim=self.signal.num_bins * self.signal.emb_dim)


PRESETS = {
    "desk": {},
    "paper": {
        "corpus": {"n_train": 20000, "n_valid": 5000, "n_test": 3000, "held_out": 16},
        "model": {"units_per_direction": 600},
        "speaker": {"num_components": 256},
    },
}


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(value):
    if isinstance(value, str) and value.lower() in ("inf", "+inf", ".inf", "infinity"):
        return math.inf
    if isinstance(value, list):
        return [_coerce(v) for v in value]
    return value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data: dict | None, preset: str = "desk") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    merged = _merge(PRESETS[preset], data or {})
    return _build(RunConfig, merged, "config")


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = _merge({}, data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                preset: str = "desk") -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    return config_from_dict(apply_overrides(data, overrides or []), preset)


def _plain(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "value"):  # enums
        return value.value
    return value


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(_plain(asdict(cfg)), sort_keys=False, default_flow_style=False)
