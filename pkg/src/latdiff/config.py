"""Run configuration: declarative key-value files, validation, and hashing."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

LOSS_MODES = ("MSE", "CE", "CE+MSE")
TIMESTEP_MODES = ("uniform", "adaptive")
LATENT_ARCHS = ("resampler", "self_attention")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class TrainConfig:
    """Joint-training configuration; every ablation axis is a field here."""

    # data / shapes
    seed: int = 0
    n: int = 32                  # sequence length == number of latent vectors
    vocab_size: int = 512
    d_h: int = 128               # token-encoder hidden size (reconstruction target dim)
    d_z: int = 64                # latent dim per position
    encoder_layer: int = -3      # hidden-state source layer, negative from the top

    # model sizes
    enc_layers: int = 4
    enc_heads: int = 4
    latent_layers: int = 2
    latent_heads: int = 4
    latent_arch: str = "resampler"
    dec_layers: int = 2          # token decoder depth
    denoiser_layers: int = 4
    denoiser_width: int = 64
    denoiser_heads: int = 4

    # diffusion / recipe
    schedule: str = "cosine"
    sigma_dec: float = 3.0
    self_cond_prob: float = 0.5
    loss_mode: str = "MSE"
    stop_gradient: bool = True
    timestep_mode: str = "adaptive"
    num_bins: int = 100
    sampler_refresh: int = 5000
    ema_decay: float = 0.99
    s_wu: int = 2000
    warmup_k: float = 10.0
    warmup_c: float = 0.8
    gamma_min: float = 1e-4

    # optimization
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    lr_warmup_steps: int = 5000
    grad_clip_norm: float = 1.0
    total_steps: int = 20000
    batch_size: int = 64

    # bookkeeping
    device: str = "cpu"
    log_every: int = 25
    eval_every: int = 1000
    checkpoint_every: int = 0    # 0 = final checkpoint only

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.timestep_mode not in TIMESTEP_MODES:
            raise ConfigError(
                f"timestep_mode must be one of {TIMESTEP_MODES}, got {self.timestep_mode!r}"
            )
        if self.latent_arch not in LATENT_ARCHS:
            raise ConfigError(f"latent_arch must be one of {LATENT_ARCHS}, got {self.latent_arch!r}")
        for name in ("n", "vocab_size", "d_h", "d_z", "total_steps", "batch_size", "num_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "grad_clip_norm", "ema_decay"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.sigma_dec < 0:
            raise ConfigError(f"sigma_dec must be >= 0, got {self.sigma_dec}")
        if not 0.0 <= self.self_cond_prob <= 1.0:
            raise ConfigError(f"self_cond_prob must be in [0,1], got {self.self_cond_prob}")
        if not 0.0 <= self.gamma_min < 1.0:
            raise ConfigError(f"gamma_min must be in [0,1), got {self.gamma_min}")
        if self.s_wu < 0:
            raise ConfigError(f"s_wu must be >= 0, got {self.s_wu}")
        if not -self.enc_layers <= self.encoder_layer <= -1:
            raise ConfigError(
                f"encoder_layer must be in [-{self.enc_layers}, -1], got {self.encoder_layer}"
            )


@dataclass
class PretrainConfig:
    """Next-token pretraining for the token encoder (also used for the PPL oracle)."""

    seed: int = 0
    n: int = 32
    vocab_size: int = 512
    d_h: int = 128
    enc_layers: int = 4
    enc_heads: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    lr_warmup_steps: int = 500
    grad_clip_norm: float = 1.0
    total_steps: int = 3000
    batch_size: int = 64
    device: str = "cpu"
    log_every: int = 50


def asdict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg) -> str:
    """Canonical sha256 of a config (field-order independent)."""
    payload = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _build(cls, data: dict, overrides: dict | None = None):
    merged = dict(data)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(merged) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return cls(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path, cls=TrainConfig, overrides: dict | None = None):
    """Load a YAML/JSON config file, applying non-None CLI overrides on top."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file must be a mapping, got {type(data).__name__}")
    return _build(cls, data, overrides)


def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))
