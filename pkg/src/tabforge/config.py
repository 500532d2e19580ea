"""Run configuration.

Keys mirror the architecture, diffusion and optimisation tables of the
method; every bundle manifest echoes the full configuration.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .diffusion import NoiseSchedule
from .encoder import EncoderConfig
from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # architecture
    feature_encoder_backbone: str = "surrogate"
    encoder_depth: int = 12
    encoder_heads: int = 4
    latent_dim: int = 192
    reduced_dim: int = 48
    n_folds: int = 5
    diffusion_layers: int = 4
    diffusion_heads: int = 4
    diffusion_width: int = 0  # 0 runs the denoiser blocks at latent_dim
    decoder_layers: int = 4
    decoder_heads: int = 4
    # diffusion and inference
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_init: float = 0.1
    rho: float = 7.0
    sigma_data: float = 1.0
    p_mean: float = -1.2
    p_std: float = 1.2
    reverse_steps: int = 10
    categorical_decoding: str = "argmax"
    decoding_temperature: float = 1.0
    # pretraining
    rounds: int = 10
    diffusion_lr: float = 1e-3
    diffusion_weight_decay: float = 1e-5
    diffusion_steps_per_dataset: int = 5000
    decoder_lr: float = 1e-1
    decoder_weight_decay: float = 5e-5
    decoder_steps_per_dataset: int = 5000
    batch_size: int = 3172
    gradient_clip_norm: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 50
    shuffle_datasets_per_round: bool = False
    decoder_latent_source: str = "denoised"
    # fitting
    fit_lr: float = 1e-6
    fit_detokenizer_lr: float = 1e-1
    fit_diffusion_steps: int = 100
    fit_decoder_steps: int = 100
    # seeds
    tokenizer_seed: int = 0
    perturbation_seed: int = 0
    encoder_seed: int = 0
    fold_seed: int = 0

    def __post_init__(self):
        positive = [
            "encoder_depth", "latent_dim", "reduced_dim", "rounds", "diffusion_steps_per_dataset",
            "decoder_steps_per_dataset", "batch_size", "fit_diffusion_steps", "fit_decoder_steps",
            "reverse_steps", "n_folds",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.diffusion_width < 0:
            raise ConfigError("diffusion_width must be 0 (same as latent_dim) or positive")
        if self.diffusion_layers < 1 or self.decoder_layers < 0:
            raise ConfigError("need diffusion_layers >= 1 and decoder_layers >= 0")
        if self.reduced_dim >= self.latent_dim:
            raise ConfigError("reduced_dim must be smaller than latent_dim")
        if self.decoder_latent_source not in ("denoised", "clean"):
            raise ConfigError("decoder_latent_source must be 'denoised' or 'clean'")
        if self.categorical_decoding not in ("argmax", "sample"):
            raise ConfigError("categorical_decoding must be 'argmax' or 'sample'")
        if self.feature_encoder_backbone != "surrogate" and not Path(self.feature_encoder_backbone).exists():
            raise ConfigError("feature_encoder_backbone must be 'surrogate' or an encoder checkpoint directory")
        self.schedule  # validates the diffusion hyperparameters

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            self.sigma_min, self.sigma_max, self.rho, self.reverse_steps, self.p_mean, self.p_std, self.sigma_init
        )

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.encoder_depth,
            latent_dim=self.latent_dim,
            n_heads=self.encoder_heads,
            weight_seed=self.encoder_seed,
            n_folds=self.n_folds,
        )

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        coerced = {}
        for key, value in d.items():
            target = type(getattr(defaults, key))
            try:
                coerced[key] = target(value) if target is not bool else _as_bool(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: cannot interpret {value!r} as {target.__name__}") from None
        return cls(**coerced)


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


# A configuration small enough to train on one CPU core in minutes.
DESK_SCALE = dict(
    latent_dim=32,
    reduced_dim=8,
    batch_size=256,
    rounds=2,
    diffusion_steps_per_dataset=200,
    decoder_steps_per_dataset=200,
)


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    """Read a flat ``key: value`` YAML file; missing keys keep their defaults."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of keys to values")
    return RunConfig.from_dict(data)


def save_run_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
