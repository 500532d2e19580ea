"""Denoising-aligned decoding from latent tokens back to mixed-type rows."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorio
from .data import FeatureSchema, PreprocessState, TableDataset, inverse_transform, schema_signature
from .diffusion import Denoiser, NoiseSchedule, TrainState, apply_update, draw_noise, per_sample, transformer_blocks
from .errors import BindingError, FrozenWeightsError, LabelError


class DecoderTransformer(nn.Module):
    """Refines denoised latent tokens; transferable across datasets.

    With ``n_layers=0`` it is the identity.
    """

    def __init__(self, latent_dim: int = 192, n_layers: int = 4, n_heads: int = 4):
        super().__init__()
        self.latent_dim = latent_dim
        self.blocks = transformer_blocks(latent_dim, n_heads, n_layers)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            h = block(h)
        return h


def refine(dec: DecoderTransformer, h_hat: torch.Tensor) -> torch.Tensor:
    return dec(h_hat)


@dataclass
class ReconOutput:
    numerical: torch.Tensor  # (N, n_numerical)
    categorical: list[torch.Tensor]  # one (N, C_j) logit matrix per categorical column


class Detokenizer(nn.Module):
    """Per-dataset heads: a dot product per numerical column, a linear logit head per categorical."""

    def __init__(self, schema: Sequence[FeatureSchema], latent_dim: int = 192, seed: int = 0):
        super().__init__()
        self.schema = tuple(schema)
        self.latent_dim = latent_dim
        self.num_idx = [j for j, c in enumerate(self.schema) if not c.is_categorical]
        self.cat_idx = [j for j, c in enumerate(self.schema) if c.is_categorical]
        gen = torch.Generator().manual_seed(seed)
        scale = 1.0 / math.sqrt(latent_dim)
        self.num_weight = nn.Parameter(torch.randn(len(self.num_idx), latent_dim, generator=gen) * scale)
        self.cat_heads = nn.ModuleList()
        for j in self.cat_idx:
            head = nn.Linear(latent_dim, self.schema[j].cardinality)
            with torch.no_grad():
                head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * scale)
                head.bias.zero_()
            self.cat_heads.append(head)

    @property
    def signature(self) -> tuple:
        return schema_signature(self.schema)

    def forward(self, u: torch.Tensor) -> ReconOutput:
        if u.shape[1] != len(self.schema):
            raise BindingError(f"detokenizer bound to {len(self.schema)} features, got {u.shape[1]} tokens")
        numerical = (u[:, self.num_idx, :] * self.num_weight[None]).sum(dim=-1)
        categorical = [head(u[:, j, :]) for j, head in zip(self.cat_idx, self.cat_heads)]
        return ReconOutput(numerical, categorical)


def detokenize(det: Detokenizer, u: torch.Tensor, schema: Sequence[FeatureSchema]) -> ReconOutput:
    if schema_signature(schema) != det.signature:
        raise BindingError("schema does not match the detokenizer binding")
    return det(u)


def recon_loss(out: ReconOutput, target: torch.Tensor, schema: Sequence[FeatureSchema]) -> torch.Tensor:
    """Squared error over numerical columns plus cross-entropy per categorical column, averaged over rows."""
    num_idx = [j for j, c in enumerate(schema) if not c.is_categorical]
    cat_idx = [j for j, c in enumerate(schema) if c.is_categorical]
    target = torch.as_tensor(target)
    per_row = ((out.numerical - target[:, num_idx].to(out.numerical.dtype)) ** 2).sum(dim=1)
    for j, logits in zip(cat_idx, out.categorical):
        labels = target[:, j]
        c = schema[j].cardinality
        if torch.any((labels < 0) | (labels >= c) | (labels != torch.round(labels))):
            raise LabelError(f"column {schema[j].name!r}: label outside [0, {c})")
        per_row = per_row + F.cross_entropy(logits, labels.long(), reduction="none")
    return per_row.mean()


def decoder_train_step(
    state: TrainState,
    dec: DecoderTransformer,
    det: Detokenizer,
    denoiser: Denoiser,
    z0: torch.Tensor,
    x: torch.Tensor,
    mu: torch.Tensor,
    s: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    source: str = "denoised",
    verify_frozen: bool = True,
) -> float:
    """One joint update of decoder and detokenizer on freshly denoised latents.

    ``source="clean"`` skips the denoiser and decodes the clean latents instead.
    The noise draw happens in both modes so the RNG stream is the same.
    """
    sigma, noise = draw_noise(schedule, z0.shape, generator, z0.dtype)
    if source == "denoised":
        before = tensorio.hash_module(denoiser) if verify_frozen else None
        denoiser.eval()
        with torch.no_grad():
            z_hat = denoiser(z0 + per_sample(sigma, z0) * noise, sigma)
        if verify_frozen and tensorio.hash_module(denoiser) != before:
            raise FrozenWeightsError("denoiser weights changed during a decoder step")
    elif source == "clean":
        z_hat = z0
    else:
        raise ValueError(f"unknown latent source {source!r}")
    dec.train()
    out = det(dec(z_hat * s + mu))
    loss = recon_loss(out, x, det.schema)
    params = [p for p in list(dec.parameters()) + list(det.parameters()) if p.requires_grad]
    return apply_update(state, loss, params)


@torch.no_grad()
def decode_to_table(
    dec: DecoderTransformer,
    det: Detokenizer,
    z: torch.Tensor,
    mu: torch.Tensor,
    s: torch.Tensor,
    state: PreprocessState,
    normalized: bool = True,
    mode: str = "argmax",
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
) -> TableDataset:
    """Latents to a schema-valid table in original units.

    Categorical columns take the arg-max logit (lowest index on ties) or,
    with ``mode="sample"``, a draw from ``softmax(logits / temperature)``.
    """
    if schema_signature(state.schema) != det.signature:
        raise BindingError("preprocessing state does not match the detokenizer binding")
    dec.eval()
    h = z * s + mu if normalized else z
    out = det(dec(h))
    n = h.shape[0]
    values = np.empty((n, len(det.schema)))
    values[:, det.num_idx] = out.numerical.double().numpy()
    for j, logits in zip(det.cat_idx, out.categorical):
        logits = logits.double()
        if mode == "argmax":
            codes = np.argmax(logits.numpy(), axis=1)
        elif mode == "sample":
            if temperature <= 0:
                raise ValueError("temperature must be positive")
            probs = torch.softmax(logits / temperature, dim=1)
            codes = torch.multinomial(probs, 1, generator=generator).reshape(-1).numpy() if n else np.zeros(0)
        else:
            raise ValueError(f"unknown decoding mode {mode!r}")
        values[:, j] = codes
    if n == 0:
        raise ValueError("cannot decode an empty batch")
    return inverse_transform(TableDataset(values, state.schema), state)
