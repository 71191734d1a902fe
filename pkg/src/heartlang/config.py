"""Experiment configuration: nested TOML sections, built-in profiles, strict key checking."""

from __future__ import annotations

import dataclasses
import json
import sys
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .evaluation import ProbeConfig
from .signal_core import PreprocessConfig
from .st_ecgformer import DecoderConfig, EncoderConfig
from .synthetic import SynthConfig
from .tokenizer import TokenizerConfig
from .training import OptimConfig
from .vq import VQConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

PROFILES = ("desk", "full")


@dataclass(frozen=True)
class EncoderSection:
    depth: int = 12
    hidden: int = 768
    heads: int = 8
    mlp: int = 1024
    conv_channels: tuple = (16, 32)
    conv_kernels: tuple = (7, 5)
    conv_strides: tuple = (2, 2)
    mask_padding: bool = False
    init_std: float = 0.02


@dataclass(frozen=True)
class VQSection:
    k: int = 8192
    d: int = 128
    decay: float = 0.99
    eps: float = 1e-5
    reseed_dead: bool = False
    dead_threshold: float = 1e-3
    hidden: int = 768
    encoder_depth: int = 4
    decoder_depth: int = 2
    heads: int = 2
    mlp: int = 2048
    valid_fraction: float = 0.1
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(5e-5, 1e-5, (0.9, 0.99), 1e-4, 100, 10, 512, None))


@dataclass(frozen=True)
class PretrainSection:
    mask_ratio: float = 0.5
    monitor_sentences: int = 256
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(5e-4, 1e-5, (0.9, 0.98), 0.05, 200, 5, 512, 3.0))


@dataclass(frozen=True)
class EvalSection:
    fractions: tuple = (0.01, 0.1, 1.0)
    subset_seeds: tuple = (0,)
    pooling: str = "cls"
    lead_config: int = 12
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    deterministic: bool = False
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    vq: VQSection = field(default_factory=VQSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- views onto module configs --

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(e.depth, e.hidden, e.heads, e.mlp, self.tokenizer.t, self.tokenizer.l,
                             tuple(e.conv_channels), tuple(e.conv_kernels), tuple(e.conv_strides),
                             e.mask_padding, init_std=e.init_std)

    def vq_encoder_config(self) -> EncoderConfig:
        e, v = self.encoder, self.vq
        return EncoderConfig(v.encoder_depth, v.hidden, v.heads, v.mlp, self.tokenizer.t, self.tokenizer.l,
                             tuple(e.conv_channels), tuple(e.conv_kernels), tuple(e.conv_strides),
                             e.mask_padding, init_std=e.init_std)

    def vq_decoder_config(self) -> DecoderConfig:
        v = self.vq
        return DecoderConfig(v.decoder_depth, v.hidden, v.heads, v.mlp, v.d, self.tokenizer.t,
                             init_std=self.encoder.init_std)

    def codebook_config(self) -> VQConfig:
        v = self.vq
        return VQConfig(v.k, v.d, v.decay, v.eps, v.reseed_dead, v.dead_threshold)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def build(cls, data: dict, where: str = ""):
    """Instantiate a (nested) frozen dataclass from plain data; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or cls.__name__} must be a table")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{where or cls.__name__}]")
    kwargs = {}
    for key, value in data.items():
        tp = hints.get(key)
        path = f"{where}.{key}" if where else key
        if _is_dataclass_type(tp):
            kwargs[key] = build(tp, value, path)
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(value, dict) and key in ("mixture", "split_fractions"):
            kwargs[key] = dict(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad values in [{where or cls.__name__}]: {exc}") from exc


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("mixture", "split_fractions"):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def profile_data(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    text = resources.files("heartlang").joinpath("profiles", f"{name}.toml").read_text()
    return tomllib.loads(text)


def load_config(path=None, profile: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Profile defaults, then the user's file, then explicit overrides."""
    user = {}
    if path is not None:
        p = Path(path)
        try:
            if p.suffix == ".json":
                user = json.loads(p.read_text())
            else:
                user = tomllib.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {p} not found") from exc
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
    name = profile or user.get("profile") or "desk"
    data = merge(profile_data(name), user)
    data["profile"] = name
    if overrides:
        data = merge(data, overrides)
    return build(ExperimentConfig, data)
