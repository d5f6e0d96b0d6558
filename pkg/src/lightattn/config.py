"""Strict JSON experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attention import VARIANTS, AttentionConfig
from .encoder import EncoderConfig
from .errors import ConfigurationError, LightAttnError
from .position import PositionConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "manifest"
    task: str = "speakerized"
    n_utt: int = 2000
    n_intents: int = 8
    n_speakers: int = 4
    seed: int = 0
    input_dim: int = 40
    token_frames: tuple = (6, 10)
    gap_frames: tuple = (12, 15)
    edge_frames: Optional[tuple] = None
    noise: float = 0.5
    cyclic: bool = True
    # manifest path, relative to the config file
    manifest: Optional[str] = None


@dataclass(frozen=True)
class CurveConfig:
    n_blocks: int = 150
    n_folds: int = 5
    prefixes: tuple = (1, 2, 4, 8, 16, 32, 64, 120)
    seed: int = 0
    # training budget per run: max(min_steps, epochs * steps per epoch)
    epochs: int = 30
    min_steps: int = 200
    # variants trained only at the largest prefix (empty: every variant on every prefix)
    full_only: tuple = ()


@dataclass(frozen=True)
class BenchConfig:
    lengths: tuple = (64, 128, 256, 512)
    heads: tuple = (2, 4, 8)
    batch: int = 1
    d_head: int = 16
    window: int = 5
    variant: str = "light"
    repeats: int = 1


@dataclass(frozen=True)
class GradcheckConfig:
    eps: float = 1e-5
    tolerance: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    variants: tuple = VARIANTS
    curve: CurveConfig = field(default_factory=CurveConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    output_dir: str = "out"
    # stop-watch target for validation intent accuracy; None disables it
    target_accuracy: Optional[float] = None
    valid_fraction: float = 0.0
    # directory the config file lives in; manifest paths resolve against it
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ConfigurationError("valid_fraction must be in [0, 1)")


_NESTED = {
    ExperimentConfig: {
        "encoder": EncoderConfig,
        "train": TrainConfig,
        "data": DataConfig,
        "curve": CurveConfig,
        "bench": BenchConfig,
        "gradcheck": GradcheckConfig,
    },
    EncoderConfig: {"attention": AttentionConfig, "position": PositionConfig},
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for key, value in raw.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value, f"{where}.{key}".lstrip("."))
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except LightAttnError as exc:
        raise ConfigurationError(f"{where or 'config'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigurationError(f"{where or 'config'}: {exc}") from exc


def from_dict(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    return dataclasses.replace(cfg, base_dir=str(base_dir))


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; unknown keys, bad values and unreadable files raise ConfigurationError."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return from_dict(raw, path.parent)


def to_dict(obj) -> dict:
    """Plain JSON-ready dict (tuples become lists)."""
    out = {}
    for f in dataclasses.fields(obj):
        if f.name == "base_dir":
            continue
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def encoder_from_dict(raw: dict) -> EncoderConfig:
    return _build(EncoderConfig, raw, "encoder")


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
