"""Metadata-free per-feature tokenisation.

Each cell becomes ``x * (u + r_j)``: a base vector ``u`` shared by every
feature, nudged by a feature-specific perturbation ``r_j``. The perturbations
are the columns of ``W @ P`` with ``W`` a frozen ``k x k'`` projection and
``P`` a seeded random ``k' x (D+1)`` matrix, so feature identity survives
without column names.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True, eq=False)
class TokenizerParams:
    base_vector: np.ndarray  # (k,)
    projection: np.ndarray  # (k, k')
    perturbation_seed: int = 0

    def __post_init__(self):
        u = np.array(self.base_vector, dtype=np.float32)
        w = np.array(self.projection, dtype=np.float32)
        if u.ndim != 1 or w.ndim != 2 or w.shape[0] != u.shape[0]:
            raise ConfigError(f"incompatible shapes u{u.shape}, W{w.shape}")
        if not w.shape[1] < w.shape[0]:
            raise ConfigError("reduced dimension k' must be smaller than k")
        u.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "base_vector", u)
        object.__setattr__(self, "projection", w)
        object.__setattr__(self, "_hash", self._compute_hash())

    @classmethod
    def create(cls, latent_dim: int = 192, reduced_dim: int | None = None, seed: int = 0, perturbation_seed: int = 0):
        """Draw ``u`` and ``W`` once from a seeded normal scaled by ``1/sqrt(k)``."""
        if reduced_dim is None:
            reduced_dim = latent_dim // 4
        if latent_dim < 2 or not 1 <= reduced_dim < latent_dim:
            raise ConfigError(f"need 1 <= k' < k, got k={latent_dim}, k'={reduced_dim}")
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(latent_dim)
        u = rng.standard_normal(latent_dim) * scale
        w = rng.standard_normal((latent_dim, reduced_dim)) * scale
        return cls(u, w, perturbation_seed)

    @property
    def latent_dim(self) -> int:
        return self.base_vector.shape[0]

    @property
    def reduced_dim(self) -> int:
        return self.projection.shape[1]

    def _compute_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.base_vector.tobytes())
        h.update(self.projection.tobytes())
        h.update(str(self.perturbation_seed).encode())
        return h.hexdigest()

    @property
    def content_hash(self) -> str:
        return self._hash

    def verify(self) -> None:
        if self._compute_hash() != self._hash:
            raise RuntimeError("tokenizer parameters were modified after construction")


def build_perturbations(params: TokenizerParams, n_features: int) -> np.ndarray:
    """Per-feature perturbation rows ``r_j``, shape ``(n_features, k)``."""
    if n_features < 1:
        raise ShapeError("n_features must be >= 1")
    rng = np.random.default_rng([params.perturbation_seed, n_features])
    p = rng.standard_normal((params.reduced_dim, n_features))
    r = params.projection.astype(np.float64) @ p
    return np.ascontiguousarray(r.T, dtype=np.float32)


def tokenize(x: np.ndarray, params: TokenizerParams, perturbations: np.ndarray | None = None) -> np.ndarray:
    """Map an ``N x (D+1)`` preprocessed table to ``N x (D+1) x k`` tokens."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D table, got shape {x.shape}")
    if perturbations is None:
        perturbations = build_perturbations(params, x.shape[1])
    if perturbations.shape != (x.shape[1], params.latent_dim):
        raise ShapeError(
            f"table has {x.shape[1]} columns but perturbations are {perturbations.shape}"
        )
    directions = params.base_vector[None, :] + perturbations
    return x[:, :, None] * directions[None, :, :]
