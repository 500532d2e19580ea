"""EDM score-based diffusion over latent feature tokens.

Latents are ``(N, D+1, k)`` tensors in the normalised space. One noise level
is drawn per sample and shared by all of its feature tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, TrainingError


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n_steps: int = 10
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_init: float = 0.1  # parsed and persisted; no sampler or loss reads it

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.n_steps < 2:
            raise ConfigError("need at least 2 reverse steps")


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = 1.0

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ConfigError("sigma_data must be positive")


def sample_sigma(schedule: NoiseSchedule, eps):
    """Log-normal noise level ``exp(p_mean + p_std * eps)``."""
    if isinstance(eps, torch.Tensor):
        return torch.exp(schedule.p_mean + schedule.p_std * eps)
    return np.exp(schedule.p_mean + schedule.p_std * np.asarray(eps, dtype=np.float64))


def per_sample(sigma, like: torch.Tensor) -> torch.Tensor:
    sigma = torch.as_tensor(sigma, dtype=like.dtype)
    if sigma.ndim == 0:
        sigma = sigma.expand(like.shape[0])
    return sigma.reshape(-1, *([1] * (like.ndim - 1)))


def add_noise(z0: torch.Tensor, sigma, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    return z0 + per_sample(sigma, z0) * noise


def precondition_coeffs(p: Preconditioner, sigma):
    """``(c_skip, c_out, c_in, c_noise)`` for scalar or tensor ``sigma``."""
    sd = p.sigma_data
    if isinstance(sigma, torch.Tensor):
        if torch.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        root = torch.sqrt(sigma**2 + sd**2)
        return sd**2 / (sigma**2 + sd**2), sigma * sd / root, 1.0 / root, torch.log(sigma) / 4
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    root = math.sqrt(sigma**2 + sd**2)
    return sd**2 / (sigma**2 + sd**2), sigma * sd / root, 1.0 / root, math.log(sigma) / 4


def loss_weight(sigma, sigma_data: float = 1.0):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


# --------------------------------------------------------------------------- network


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / max(half, 1))
    angles = x[:, None] * freqs[None]
    emb = torch.cat([torch.cos(angles), torch.sin(angles)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def transformer_blocks(dim: int, n_heads: int, n_layers: int) -> nn.ModuleList:
    """Pre-norm blocks with feed-forward width ``4 * dim`` and no positional encoding."""
    return nn.ModuleList(
        nn.TransformerEncoderLayer(
            dim, n_heads, dim_feedforward=4 * dim, dropout=0.0, activation="gelu",
            batch_first=True, norm_first=True,
        )
        for _ in range(n_layers)
    )


class DenoiserNetwork(nn.Module):
    """The raw network ``F(c_in * z, c_noise)`` acting on the feature-token axis.

    Tokens are projected to the model ``width`` and back when it differs from
    ``latent_dim``. With very small latents (k of 4 or so) running the blocks at
    width k starves them: each layer norm removes the mean and scale of a
    k-vector, half of what a 4-dim token carries.
    """

    def __init__(self, latent_dim: int = 192, n_layers: int = 4, n_heads: int = 4, width: int | None = None):
        super().__init__()
        width = width or latent_dim
        if width % n_heads:
            raise ConfigError(f"model width {width} not divisible by n_heads {n_heads}")
        self.latent_dim = latent_dim
        self.width = width
        self.proj_in = nn.Identity() if width == latent_dim else nn.Linear(latent_dim, width)
        self.noise_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = transformer_blocks(width, n_heads, n_layers)
        self.norm_out = nn.LayerNorm(width)
        self.proj_out = nn.Linear(width, latent_dim)

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        emb = self.noise_mlp(sinusoidal_embedding(c_noise.reshape(-1).to(x.dtype), self.width))
        h = self.proj_in(x) + emb[:, None, :]
        for block in self.blocks:
            h = block(h)
        return self.proj_out(self.norm_out(h))


def denoise(net: Callable, p: Preconditioner, z_sigma: torch.Tensor, sigma) -> torch.Tensor:
    """EDM denoiser ``c_skip * z + c_out * F(c_in * z, c_noise)``."""
    sigma = per_sample(sigma, z_sigma).reshape(-1)
    c_skip, c_out, c_in, c_noise = (per_sample(c, z_sigma) for c in precondition_coeffs(p, sigma))
    return c_skip * z_sigma + c_out * net(c_in * z_sigma, c_noise.reshape(-1))


class Denoiser(nn.Module):
    """A ``DenoiserNetwork`` wrapped with its preconditioner."""

    def __init__(self, net: DenoiserNetwork, precond: Preconditioner | None = None):
        super().__init__()
        self.net = net
        self.precond = precond or Preconditioner()

    def forward(self, z_sigma: torch.Tensor, sigma) -> torch.Tensor:
        return denoise(self.net, self.precond, z_sigma, sigma)


def flow_direction(z_sigma: torch.Tensor, denoised: torch.Tensor, sigma) -> torch.Tensor:
    """Probability-flow derivative ``dz/dsigma = (z - G(z)) / sigma``."""
    return (z_sigma - denoised) / per_sample(sigma, z_sigma)


def score(z_sigma: torch.Tensor, denoised: torch.Tensor, sigma) -> torch.Tensor:
    """Score estimate ``(G(z) - z) / sigma^2`` induced by the denoiser."""
    return (denoised - z_sigma) / per_sample(sigma, z_sigma) ** 2


def diffusion_loss(denoiser: Callable, p: Preconditioner, z0: torch.Tensor, sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Per-sample weighted squared error summed over tokens, averaged over samples."""
    sigma = per_sample(sigma, z0).reshape(-1)
    z_sigma = add_noise(z0, sigma, noise)
    err = (denoiser(z_sigma, sigma) - z0) ** 2
    row_err = err.reshape(err.shape[0], -1).sum(dim=1)
    return (loss_weight(sigma, p.sigma_data) * row_err).mean()


# --------------------------------------------------------------------------- training


class DecoupledSGD(torch.optim.Optimizer):
    """Momentum-free SGD with weight decay applied directly to the weights."""

    def __init__(self, params, lr: float = 0.1, weight_decay: float = 0.0):
        super().__init__(params, dict(lr=lr, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            lr, wd = group["lr"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                if wd:
                    p.mul_(1 - lr * wd)
                p.add_(p.grad, alpha=-lr)


@dataclass
class TrainState:
    """Optimizer, plateau scheduler, clipping norm and loss history for one stage."""

    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau
    clip_norm: float | None = 1.0
    step: int = 0
    losses: list[float] = field(default_factory=list)

    def state_dict(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "step": self.step,
            "losses": list(self.losses),
        }

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.step = state["step"]
        self.losses = list(state["losses"])


def make_train_state(
    params_or_groups,
    optimizer: str = "adamw",
    lr: float = 1e-3,
    weight_decay: float = 1e-5,
    clip_norm: float | None = 1.0,
    plateau_factor: float = 0.5,
    plateau_patience: int = 50,
) -> TrainState:
    if optimizer == "adamw":
        opt = torch.optim.AdamW(params_or_groups, lr=lr, weight_decay=weight_decay)
    elif optimizer == "sgd":
        opt = DecoupledSGD(params_or_groups, lr=lr, weight_decay=weight_decay)
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=plateau_factor, patience=plateau_patience)
    return TrainState(opt, sched, clip_norm)


def apply_update(state: TrainState, loss: torch.Tensor, params) -> float:
    """Backpropagate, clip, step and record; raises on a non-finite loss."""
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if state.clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, state.clip_norm)
    state.optimizer.step()
    state.scheduler.step(value)
    state.step += 1
    state.losses.append(value)
    return value


def sample_batch(n_rows: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform row indices without replacement; the batch is capped at ``n_rows``."""
    return torch.randperm(n_rows, generator=generator)[: min(batch_size, n_rows)]


def draw_noise(schedule: NoiseSchedule, shape, generator: torch.Generator, dtype=torch.float32):
    """Per-sample noise levels and Gaussian noise for a batch of the given shape."""
    sigma = sample_sigma(schedule, torch.randn(shape[0], generator=generator, dtype=dtype))
    noise = torch.randn(shape, generator=generator, dtype=dtype)
    return sigma, noise


def train_step(
    state: TrainState,
    denoiser: Denoiser,
    z0: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> float:
    """One weighted-denoising update of the denoiser on a batch of clean latents."""
    denoiser.train()
    sigma, noise = draw_noise(schedule, z0.shape, generator, z0.dtype)
    loss = diffusion_loss(denoiser, denoiser.precond, z0, sigma, noise)
    return apply_update(state, loss, [p for p in denoiser.parameters() if p.requires_grad])


# --------------------------------------------------------------------------- sampling


def karras_schedule(schedule: NoiseSchedule) -> np.ndarray:
    """Decreasing noise levels from ``sigma_max`` to ``sigma_min`` with rho-warping."""
    t = np.arange(schedule.n_steps, dtype=np.float64)
    lo = schedule.sigma_min ** (1 / schedule.rho)
    hi = schedule.sigma_max ** (1 / schedule.rho)
    return (hi + t / (schedule.n_steps - 1) * (lo - hi)) ** schedule.rho


@torch.no_grad()
def reverse_sample(
    denoiser: Callable,
    schedule: NoiseSchedule,
    n: int,
    n_features: int,
    latent_dim: int,
    generator: torch.Generator,
    dtype=torch.float32,
    initial_noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Euler integration of the probability-flow ODE from ``sigma_max`` down to ``sigma_min``."""
    if isinstance(denoiser, nn.Module):
        denoiser.eval()
    shape = (n, n_features, latent_dim)
    if initial_noise is None:
        initial_noise = torch.randn(shape, generator=generator, dtype=dtype)
    z = schedule.sigma_max * initial_noise.to(dtype)
    if n == 0:
        return z
    sigmas = karras_schedule(schedule)
    for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
        sigma = torch.full((n,), float(s_cur), dtype=dtype)
        d = flow_direction(z, denoiser(z, sigma), sigma)
        z = z + (float(s_next) - float(s_cur)) * d
    return z
