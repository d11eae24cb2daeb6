"""Run configuration: strict JSON schema, dotted overrides, resolved snapshots."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adaptation import FreezeConfig, LoraConfig
from .connector import ConnectorConfig
from .encoder import ENCODER_PRESETS, EncoderConfig
from .errors import AlmError, ConfigError
from .lm import GenerationConfig, LmConfig
from .model import BundleConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train_manifests: list[str] = field(default_factory=list)
    eval_manifests: list[str] = field(default_factory=list)
    synth: dict = field(default_factory=lambda: {"n_clips": 32, "formats": ["mc"], "clip_seconds": 2.0})
    system: str = "Answer questions about the audio."


@dataclass
class BaseLmConfig:
    """Text-only pretraining of the toy LM before adapter training."""

    pretrain_steps: int = 300
    lr: float = 3e-3
    batch_size: int = 16
    n_clips: int = 512
    seed_offset: int = 1000


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    freeze: FreezeConfig = field(default_factory=FreezeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseLmConfig = field(default_factory=BaseLmConfig)
    stages: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stages not in (1, 2):
            raise ConfigError("stages must be 1 or 2")
        self.bundle_config()

    def bundle_config(self) -> BundleConfig:
        return BundleConfig(self.encoder, self.connector, self.lm)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out


SECTIONS = {
    "encoder": EncoderConfig,
    "connector": ConnectorConfig,
    "lm": LmConfig,
    "lora": LoraConfig,
    "freeze": FreezeConfig,
    "train": TrainConfig,
    "generation": GenerationConfig,
    "data": DataConfig,
    "base": BaseLmConfig,
}
SCALARS = {"stages": int, "seed": int}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except AlmError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    # "_run" is provenance written next to resolved snapshots; it never configures anything
    unknown = sorted(set(d) - set(SECTIONS) - set(SCALARS) - {"preset", "_run"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    enc = dict(d.get("encoder", {}))
    if "preset" in d:
        if d["preset"] not in ENCODER_PRESETS:
            raise ConfigError(f"unknown encoder preset {d['preset']!r}")
        enc = {**ENCODER_PRESETS[d["preset"]].to_dict(), **enc}
    for name, cls in SECTIONS.items():
        values = enc if name == "encoder" else d.get(name, {})
        kwargs[name] = _build(cls, values, name)
    for name, typ in SCALARS.items():
        if name in d:
            if not isinstance(d[name], typ) or isinstance(d[name], bool):
                raise ConfigError(f"{name} must be {typ.__name__}")
            kwargs[name] = d[name]
    return RunConfig(**kwargs)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(raw)
    return d


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"{path}: no such config file") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return from_dict(apply_overrides(raw, overrides or []))


def write_resolved(cfg: RunConfig, path: Path, extra: dict | None = None) -> None:
    payload = cfg.to_dict()
    if extra:
        payload["_run"] = extra
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_resolved(path) -> RunConfig:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d.pop("_run", None)
    return from_dict(d)
