"""Frozen two-way attention feature encoder and the latent cache.

The encoder alternates attention across the features of a row and attention
across rows for each feature, in the style of prior-data fitted networks. Its
weights are drawn once from a seeded initialiser (or imported from a
checkpoint) and never trained. Latents for a training table are extracted
leave-one-fold-out: each fold is encoded as query rows against the remaining
folds as context.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorio
from .data import TableDataset, schema_to_json
from .errors import CacheError, ConfigError, CorruptionError, FoldError, FrozenWeightsError
from .tokenizer import TokenizerParams, tokenize

log = logging.getLogger(__name__)

LATENT_EPS = 1e-12
CACHE_ENV = "TABFORGE_CACHE_DIR"


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 12
    latent_dim: int = 192
    n_heads: int = 4
    weight_seed: int = 0
    n_folds: int = 5
    task: str = "classification"  # which upstream checkpoint family an import came from
    query_chunk: int = 1024

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if self.latent_dim < 1 or self.n_heads < 1 or self.latent_dim % self.n_heads:
            raise ConfigError(f"latent_dim {self.latent_dim} must be divisible by n_heads {self.n_heads}")
        if self.n_folds < 2:
            raise ConfigError("leave-one-fold-out extraction needs n_folds >= 2")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")


class _Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        # x: (B, Lq, d), context: (B, Lk, d)
        b, lq, d = x.shape
        h = self.n_heads
        q = self.q(x).view(b, lq, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, lq, d))


class _EncoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, query_chunk: int):
        super().__init__()
        self.query_chunk = query_chunk
        self.norm_feat = nn.LayerNorm(dim)
        self.feature_attn = _Attention(dim, n_heads)
        self.norm_rows = nn.LayerNorm(dim)
        self.row_attn = _Attention(dim, n_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, n_context: int) -> torch.Tensor:
        # x: (rows, features, dim); the first n_context rows are context
        h = self.norm_feat(x)
        x = x + self.feature_attn(h, h)
        xt = x.transpose(0, 1)
        h = self.norm_rows(xt)
        kv = h[:, :n_context]
        # every row (context or query) attends to context rows only
        parts = [
            self.row_attn(h[:, i : i + self.query_chunk], kv)
            for i in range(0, h.shape[1], self.query_chunk)
        ]
        x = (xt + torch.cat(parts, dim=1)).transpose(0, 1)
        return x + self.mlp(self.norm_mlp(x))


class FrozenEncoder(nn.Module):
    """Seeded, frozen stand-in for a pretrained PFN encoder."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            _EncoderLayer(config.latent_dim, config.n_heads, config.query_chunk) for _ in range(config.n_layers)
        )
        self.calls = 0
        self._init_weights()
        self.freeze()

    def _init_weights(self) -> None:
        gen = torch.Generator().manual_seed(self.config.weight_seed)
        residual_scale = 1.0 / math.sqrt(3 * self.config.n_layers)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in name:
                    p.fill_(1.0)
                else:
                    std = 1.0 / math.sqrt(p.shape[1])
                    if name.endswith("out.weight") or name.endswith("mlp.2.weight"):
                        std *= residual_scale
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.weight_hash = tensorio.hash_module(self)

    def verify_frozen(self) -> None:
        if tensorio.hash_module(self) != self.weight_hash:
            raise FrozenWeightsError("encoder weights changed since they were frozen")

    @torch.no_grad()
    def forward(self, context: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        x = torch.cat([context, query], dim=0)
        for layer in self.layers:
            x = layer(x, context.shape[0])
        return x[context.shape[0]:]


def build_surrogate_encoder(config: EncoderConfig | None = None) -> FrozenEncoder:
    return FrozenEncoder(config or EncoderConfig())


def export_encoder_checkpoint(enc: FrozenEncoder, path: str | os.PathLike) -> Path:
    tensors = tensorio.state_dict_to_numpy(enc.state_dict())
    return tensorio.save_group(path, tensors, meta={"kind": "encoder", "config": asdict(enc.config)})


def load_encoder_checkpoint(path: str | os.PathLike) -> FrozenEncoder:
    """Import encoder weights from a named-tensor checkpoint directory."""
    tensors, _, meta = tensorio.load_group(path)
    if meta.get("kind") != "encoder":
        raise CorruptionError(f"{path} is not an encoder checkpoint")
    enc = FrozenEncoder(EncoderConfig(**meta["config"]))
    state = tensorio.numpy_to_state_dict(tensors, "")
    try:
        enc.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptionError(f"{path}: tensor layout does not match the encoder: {exc}") from None
    enc.freeze()
    return enc


def make_folds(n_rows: int, n_folds: int, fold_seed: int) -> list[np.ndarray]:
    if n_rows < n_folds:
        raise FoldError(f"{n_rows} rows cannot fill {n_folds} folds")
    perm = np.random.default_rng(fold_seed).permutation(n_rows)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def extract_leave_one_fold_out(enc: FrozenEncoder, tokens: np.ndarray, fold_seed: int) -> np.ndarray:
    """Latents for every row, each computed once with the row's fold as queries."""
    enc.verify_frozen()
    n = tokens.shape[0]
    folds = make_folds(n, enc.config.n_folds, fold_seed)
    enc.calls += 1
    tok = torch.from_numpy(np.ascontiguousarray(tokens, dtype=np.float32))
    out = np.empty(tokens.shape, dtype=np.float32)
    for fold in folds:
        context = np.setdiff1d(np.arange(n), fold, assume_unique=True)
        out[fold] = enc(tok[context], tok[fold]).numpy()
    return out


# --------------------------------------------------------------------------- normalisation


def compute_stats(h: np.ndarray, eps: float = LATENT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-(feature, dim) mean and ``sqrt(var + eps)`` over the sample axis."""
    h64 = np.asarray(h, dtype=np.float64)
    mu = h64.mean(axis=0)
    s = np.sqrt(((h64 - mu) ** 2).mean(axis=0) + eps)
    dtype = np.result_type(h, np.float32)
    return mu.astype(dtype), s.astype(dtype)


def normalize(h, mu, s):
    return (h - mu) / s


def denormalize(z, mu, s):
    return z * s + mu


@dataclass(frozen=True, eq=False)
class LatentCache:
    h: np.ndarray
    mu: np.ndarray
    s: np.ndarray
    source_hash: str
    fold_seed: int
    eps: float = LATENT_EPS

    @property
    def z0(self) -> np.ndarray:
        return normalize(self.h, self.mu, self.s).astype(np.float32)

    def save(self, directory: str | os.PathLike) -> Path:
        meta = {
            "kind": "latent_cache",
            "source_hash": self.source_hash,
            "fold_seed": self.fold_seed,
            "eps": self.eps,
            "shape": list(self.h.shape),
        }
        return tensorio.save_group(directory, {"H": self.h, "mu": self.mu, "s": self.s}, meta)

    @classmethod
    def load(cls, directory: str | os.PathLike, expected_hash: str | None = None) -> "LatentCache":
        try:
            tensors, _, meta = tensorio.load_group(directory)
        except CorruptionError as exc:
            raise CacheError(str(exc)) from exc
        if meta.get("kind") != "latent_cache":
            raise CacheError(f"{directory} is not a latent cache")
        if expected_hash is not None and meta.get("source_hash") != expected_hash:
            raise CacheError(f"{directory}: source hash mismatch")
        return cls(tensors["H"], tensors["mu"], tensors["s"], meta["source_hash"], meta["fold_seed"], meta["eps"])


def source_hash(ds: TableDataset, enc: FrozenEncoder, params: TokenizerParams, fold_seed: int) -> str:
    h = hashlib.sha256()
    h.update(ds.fingerprint().encode())
    h.update(enc.weight_hash.encode())
    h.update(params.content_hash.encode())
    h.update(json.dumps({"fold_seed": fold_seed, "n_folds": enc.config.n_folds}).encode())
    return h.hexdigest()


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "tabforge"))


def cache_latents(
    ds: TableDataset,
    enc: FrozenEncoder,
    params: TokenizerParams,
    fold_seed: int = 0,
    cache_dir: str | os.PathLike | None = None,
) -> LatentCache:
    """Tokenise, extract and summarise a preprocessed table, reusing the disk cache.

    Pass ``cache_dir=False`` to skip the disk cache entirely.
    """
    key = source_hash(ds, enc, params, fold_seed)
    path = None
    if cache_dir is not False:
        path = Path(cache_dir if cache_dir is not None else default_cache_dir()) / key
        if path.exists():
            try:
                return LatentCache.load(path, expected_hash=key)
            except CacheError as exc:
                log.warning("latent cache unusable, recomputing: %s", exc)
    params.verify()
    h = extract_leave_one_fold_out(enc, tokenize(ds.values, params), fold_seed)
    mu, s = compute_stats(h)
    cache = LatentCache(h, mu, s, key, fold_seed)
    if path is not None:
        cache.save(path)
    return cache
