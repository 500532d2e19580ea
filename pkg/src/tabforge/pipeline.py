"""Pretraining across datasets, fitting to an unseen dataset, generation and bundles."""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tensorio
from .config import RunConfig, load_run_config
from .data import (
    PreprocessState,
    TableDataset,
    fit_preprocess,
    schema_from_json,
    schema_signature,
    schema_to_json,
    transform,
)
from .decoder import DecoderTransformer, Detokenizer, decode_to_table, decoder_train_step, recon_loss
from .diffusion import (
    Denoiser,
    DenoiserNetwork,
    Preconditioner,
    draw_noise,
    make_train_state,
    per_sample,
    reverse_sample,
    sample_batch,
    train_step,
)
from .encoder import FrozenEncoder, LatentCache, build_surrogate_encoder, cache_latents, load_encoder_checkpoint
from .errors import (
    ArgumentError,
    BindingError,
    BundleVersionError,
    CorruptionError,
    FitError,
    PretrainError,
    TabForgeError,
)
from .tokenizer import TokenizerParams

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "tabforge-bundle"
BUNDLE_VERSION = 1
PRETRAINED_FORMAT = "tabforge-pretrained"


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_encoder(cfg: RunConfig) -> FrozenEncoder:
    if cfg.feature_encoder_backbone == "surrogate":
        return build_surrogate_encoder(cfg.encoder_config)
    enc = load_encoder_checkpoint(cfg.feature_encoder_backbone)
    if enc.config.latent_dim != cfg.latent_dim:
        raise BindingError("encoder checkpoint latent_dim differs from the run config")
    return enc


def build_tokenizer(cfg: RunConfig) -> TokenizerParams:
    return TokenizerParams.create(cfg.latent_dim, cfg.reduced_dim, cfg.tokenizer_seed, cfg.perturbation_seed)


def build_denoiser(cfg: RunConfig, seed: int) -> Denoiser:
    net = _seeded(seed, lambda: DenoiserNetwork(cfg.latent_dim, cfg.diffusion_layers, cfg.diffusion_heads, cfg.diffusion_width))
    return Denoiser(net, Preconditioner(cfg.sigma_data))


def build_decoder(cfg: RunConfig, seed: int) -> DecoderTransformer:
    return _seeded(seed + 1, lambda: DecoderTransformer(cfg.latent_dim, cfg.decoder_layers, cfg.decoder_heads))


@dataclass
class PreparedData:
    state: PreprocessState
    x: torch.Tensor  # preprocessed table
    cache: LatentCache

    @property
    def z0(self) -> torch.Tensor:
        return torch.from_numpy(self.cache.z0)

    @property
    def mu(self) -> torch.Tensor:
        return torch.from_numpy(self.cache.mu)

    @property
    def s(self) -> torch.Tensor:
        return torch.from_numpy(self.cache.s)


def prepare(ds: TableDataset, enc: FrozenEncoder, tok: TokenizerParams, cfg: RunConfig, cache_dir=None) -> PreparedData:
    """Preprocess a table and compute (or read) its frozen latent cache."""
    state = fit_preprocess(ds)
    xp = transform(ds, state)
    cache = cache_latents(xp, enc, tok, cfg.fold_seed, cache_dir)
    return PreparedData(state, torch.from_numpy(xp.values.astype(np.float32)), cache)


# --------------------------------------------------------------------------- pretraining


@dataclass
class Pretrained:
    """Transferable weights: the denoiser and decoder transformer."""

    denoiser: Denoiser
    decoder: DecoderTransformer
    config: RunConfig
    tokenizer: TokenizerParams
    encoder_hash: str
    history: dict = field(default_factory=dict)

    def save(self, path: str | os.PathLike) -> Path:
        tensors = {
            **tensorio.state_dict_to_numpy(self.denoiser.state_dict(), "denoiser."),
            **tensorio.state_dict_to_numpy(self.decoder.state_dict(), "decoder."),
            "tokenizer.u": self.tokenizer.base_vector,
            "tokenizer.W": self.tokenizer.projection,
        }
        meta = {
            "format": PRETRAINED_FORMAT,
            "version": BUNDLE_VERSION,
            "config": self.config.to_dict(),
            "encoder_hash": self.encoder_hash,
            "perturbation_seed": self.tokenizer.perturbation_seed,
            "steps": {k: self.history.get(k, 0) for k in ("diffusion_steps", "decoder_steps")},
        }
        return tensorio.save_group(path, tensors, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Pretrained":
        tensors, _, meta = tensorio.load_group(path)
        if meta.get("format") != PRETRAINED_FORMAT:
            raise CorruptionError(f"{path} is not a pretrained checkpoint")
        if meta.get("version") != BUNDLE_VERSION:
            raise BundleVersionError(f"{path}: version {meta.get('version')} != {BUNDLE_VERSION}")
        cfg = RunConfig.from_dict(meta["config"])
        denoiser = build_denoiser(cfg, 0)
        decoder = build_decoder(cfg, 0)
        denoiser.load_state_dict(tensorio.numpy_to_state_dict(tensors, "denoiser."))
        decoder.load_state_dict(tensorio.numpy_to_state_dict(tensors, "decoder."))
        tok = TokenizerParams(tensors["tokenizer.u"], tensors["tokenizer.W"], meta["perturbation_seed"])
        return cls(denoiser, decoder, cfg, tok, meta["encoder_hash"], dict(meta.get("steps", {})))


def _latest_checkpoint(directory: Path) -> Path | None:
    found = sorted(directory.glob("round_*.pt"))
    return found[-1] if found else None


def pretrain(
    datasets: Sequence[TableDataset],
    cfg: RunConfig,
    seed: int = 0,
    encoder: FrozenEncoder | None = None,
    names: Sequence[str] | None = None,
    cache_dir=None,
    checkpoint_dir: str | os.PathLike | None = None,
    resume: bool = False,
    stop_after_round: int | None = None,
) -> Pretrained:
    """Round-robin pretraining: per dataset, diffusion steps then decoder steps.

    Dataset-specific detokenizers are trained alongside but not returned.
    With ``checkpoint_dir`` a resumable checkpoint is written after every
    round; ``resume=True`` continues from the latest one.
    """
    if not datasets:
        raise PretrainError("pretraining needs at least one dataset")
    names = list(names) if names is not None else [f"dataset_{m}" for m in range(len(datasets))]
    enc = encoder or build_encoder(cfg)
    tok = build_tokenizer(cfg)
    prepared = []
    for name, ds in zip(names, datasets):
        try:
            prepared.append(prepare(ds, enc, tok, cfg, cache_dir))
        except TabForgeError as exc:
            raise PretrainError(f"{name}: latent cache construction failed: {exc}") from exc

    denoiser = build_denoiser(cfg, seed)
    decoder = build_decoder(cfg, seed)
    detoks = [Detokenizer(ds.schema, cfg.latent_dim, seed=seed + 7 + m) for m, ds in enumerate(datasets)]
    schedule = cfg.schedule
    gen = torch.Generator().manual_seed(seed)
    plateau = dict(clip_norm=cfg.gradient_clip_norm, plateau_factor=cfg.plateau_factor, plateau_patience=cfg.plateau_patience)
    diff_state = make_train_state(denoiser.parameters(), "adamw", cfg.diffusion_lr, cfg.diffusion_weight_decay, **plateau)
    dec_params = list(decoder.parameters()) + [p for d in detoks for p in d.parameters()]
    dec_state = make_train_state(dec_params, "sgd", cfg.decoder_lr, cfg.decoder_weight_decay, **plateau)
    history = {"diffusion_steps": 0, "decoder_steps": 0, "visits": []}

    start = 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None and resume and (latest := _latest_checkpoint(ckpt_dir)) is not None:
        ckpt = torch.load(latest, weights_only=False)
        denoiser.load_state_dict(ckpt["denoiser"])
        decoder.load_state_dict(ckpt["decoder"])
        for d, sd in zip(detoks, ckpt["detokenizers"]):
            d.load_state_dict(sd)
        diff_state.load_state_dict(ckpt["diffusion_state"])
        dec_state.load_state_dict(ckpt["decoder_state"])
        gen.set_state(ckpt["generator"])
        history = ckpt["history"]
        start = ckpt["round"] + 1
        log.info("resuming pretraining after round %d", ckpt["round"])

    for r in range(start, cfg.rounds):
        order = list(range(len(datasets)))
        if cfg.shuffle_datasets_per_round:
            order = torch.randperm(len(datasets), generator=gen).tolist()
        for m in order:
            data = prepared[m]
            z0, n = data.z0, data.z0.shape[0]
            for _ in range(cfg.diffusion_steps_per_dataset):
                idx = sample_batch(n, cfg.batch_size, gen)
                train_step(diff_state, denoiser, z0[idx], schedule, gen)
            for _ in range(cfg.decoder_steps_per_dataset):
                idx = sample_batch(n, cfg.batch_size, gen)
                decoder_train_step(
                    dec_state, decoder, detoks[m], denoiser, z0[idx], data.x[idx], data.mu, data.s,
                    schedule, gen, source=cfg.decoder_latent_source, verify_frozen=False,
                )
            history["diffusion_steps"] += cfg.diffusion_steps_per_dataset
            history["decoder_steps"] += cfg.decoder_steps_per_dataset
            history["visits"].append(
                {"round": r, "dataset": names[m], "diffusion_loss": diff_state.losses[-1], "decoder_loss": dec_state.losses[-1]}
            )
            log.info(
                "round %d %s: step %d diffusion loss %.4f, decoder loss %.4f",
                r, names[m], diff_state.step, diff_state.losses[-1], dec_state.losses[-1],
            )
        if ckpt_dir is not None:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            tmp = ckpt_dir / f".round_{r:04d}.pt.tmp"
            torch.save(
                {
                    "round": r,
                    "denoiser": denoiser.state_dict(),
                    "decoder": decoder.state_dict(),
                    "detokenizers": [d.state_dict() for d in detoks],
                    "diffusion_state": diff_state.state_dict(),
                    "decoder_state": dec_state.state_dict(),
                    "generator": gen.get_state(),
                    "history": history,
                },
                tmp,
            )
            os.replace(tmp, ckpt_dir / f"round_{r:04d}.pt")
        if stop_after_round is not None and r >= stop_after_round:
            break

    history["diffusion_losses"] = list(diff_state.losses)
    history["decoder_losses"] = list(dec_state.losses)
    return Pretrained(denoiser, decoder, cfg, tok, enc.weight_hash, history)


# --------------------------------------------------------------------------- fitting


@dataclass
class GeneratorBundle:
    """Everything generation needs; no encoder is involved after fitting."""

    denoiser: Denoiser
    decoder: DecoderTransformer
    detokenizer: Detokenizer
    mu: np.ndarray
    s: np.ndarray
    tokenizer: TokenizerParams
    encoder_ref: dict
    preprocess: PreprocessState
    config: RunConfig
    version: int = BUNDLE_VERSION
    train_rows: list[int] | None = None
    history: dict = field(default_factory=dict)

    @property
    def schema(self):
        return self.preprocess.schema

    @property
    def n_features(self) -> int:
        return len(self.preprocess.schema)


def fit(
    train: TableDataset,
    pretrained: Pretrained,
    cfg: RunConfig | None = None,
    seed: int = 0,
    encoder: FrozenEncoder | None = None,
    cache_dir=None,
    row_indices: Sequence[int] | None = None,
) -> GeneratorBundle:
    """Adapt pretrained weights to an unseen training split.

    Stage one fine-tunes the denoiser, which is then frozen; stage two trains
    the decoder transformer and a fresh detokenizer on latents denoised by
    the frozen stage-one denoiser. Pass the full table plus ``row_indices``
    to have the bundle record which rows it was fitted on.
    """
    cfg = cfg or pretrained.config
    if row_indices is not None:
        row_indices = sorted(int(i) for i in row_indices)
        train = train.take(row_indices)
    if train.n_features < 2:
        raise FitError("fitting needs at least one feature besides the target")
    enc = encoder or build_encoder(cfg)
    if enc.weight_hash != pretrained.encoder_hash:
        raise BindingError("encoder weights differ from the ones used in pretraining")
    data = prepare(train, enc, pretrained.tokenizer, cfg, cache_dir)
    schedule = cfg.schedule
    gen = torch.Generator().manual_seed(seed)
    plateau = dict(clip_norm=cfg.gradient_clip_norm, plateau_factor=cfg.plateau_factor, plateau_patience=cfg.plateau_patience)
    history = {}

    denoiser = copy.deepcopy(pretrained.denoiser)
    history["denoiser_hash_start"] = tensorio.hash_module(denoiser)
    diff_state = make_train_state(denoiser.parameters(), "adamw", cfg.fit_lr, cfg.diffusion_weight_decay, **plateau)
    z0, n = data.z0, data.z0.shape[0]
    for _ in range(cfg.fit_diffusion_steps):
        idx = sample_batch(n, cfg.batch_size, gen)
        train_step(diff_state, denoiser, z0[idx], schedule, gen)
    for p in denoiser.parameters():
        p.requires_grad_(False)
    denoiser.eval()
    history["denoiser_hash_fitted"] = tensorio.hash_module(denoiser)
    if diff_state.losses:
        log.info("fit diffusion: step %d loss %.4f", diff_state.step, diff_state.losses[-1])

    decoder = copy.deepcopy(pretrained.decoder)
    detok = Detokenizer(train.schema, cfg.latent_dim, seed=seed + 7)
    groups = [{"params": list(detok.parameters()), "lr": cfg.fit_detokenizer_lr}]
    if any(True for _ in decoder.parameters()):
        groups.insert(0, {"params": list(decoder.parameters()), "lr": cfg.fit_lr})
    dec_state = make_train_state(groups, "sgd", cfg.fit_lr, cfg.decoder_weight_decay, **plateau)
    for _ in range(cfg.fit_decoder_steps):
        idx = sample_batch(n, cfg.batch_size, gen)
        decoder_train_step(
            dec_state, decoder, detok, denoiser, z0[idx], data.x[idx], data.mu, data.s,
            schedule, gen, source=cfg.decoder_latent_source, verify_frozen=False,
        )
    history["denoiser_hash_final"] = tensorio.hash_module(denoiser)
    if dec_state.losses:
        log.info("fit decoder: step %d loss %.4f", dec_state.step, dec_state.losses[-1])
    history["diffusion_losses"] = list(diff_state.losses)
    history["decoder_losses"] = list(dec_state.losses)
    decoder.eval()
    return GeneratorBundle(
        denoiser=denoiser,
        decoder=decoder,
        detokenizer=detok,
        mu=data.cache.mu,
        s=data.cache.s,
        tokenizer=pretrained.tokenizer,
        encoder_ref={"weight_hash": enc.weight_hash, "config": enc.config.__dict__.copy()},
        preprocess=data.state,
        config=cfg,
        train_rows=row_indices,
        history=history,
    )


def generate(bundle: GeneratorBundle, n: int, seed: int = 0, schema=None) -> TableDataset:
    """Sample ``n`` synthetic rows in original units."""
    if not isinstance(n, (int, np.integer)) or n <= 0:
        raise ArgumentError(f"number of rows must be a positive integer, got {n!r}")
    if schema is not None and schema_signature(schema) != schema_signature(bundle.schema):
        raise BindingError(
            f"bundle generates {bundle.n_features} features of a fixed schema; requested {len(schema)}"
        )
    cfg = bundle.config
    gen = torch.Generator().manual_seed(seed)
    z = reverse_sample(bundle.denoiser, cfg.schedule, int(n), bundle.n_features, cfg.latent_dim, gen)
    return decode_to_table(
        bundle.decoder,
        bundle.detokenizer,
        z,
        torch.from_numpy(bundle.mu),
        torch.from_numpy(bundle.s),
        bundle.preprocess,
        mode=cfg.categorical_decoding,
        temperature=cfg.decoding_temperature,
        generator=gen,
    )


@torch.no_grad()
def denoised_reconstruction_loss(
    bundle: GeneratorBundle,
    train: TableDataset,
    encoder: FrozenEncoder | None = None,
    seed: int = 0,
    n_draws: int = 4,
    cache_dir=None,
) -> float:
    """Reconstruction loss of the bundle's decoder on freshly noised-then-denoised training latents.

    Every row is noised ``n_draws`` times; the mean loss over draws is returned.
    """
    cfg = bundle.config
    data = prepare(train, encoder or build_encoder(cfg), bundle.tokenizer, cfg, cache_dir)
    gen = torch.Generator().manual_seed(seed)
    mu, s = torch.from_numpy(bundle.mu), torch.from_numpy(bundle.s)
    bundle.denoiser.eval()
    bundle.decoder.eval()
    losses = []
    for _ in range(n_draws):
        sigma, noise = draw_noise(cfg.schedule, data.z0.shape, gen, data.z0.dtype)
        z_hat = bundle.denoiser(data.z0 + per_sample(sigma, data.z0) * noise, sigma)
        out = bundle.detokenizer(bundle.decoder(z_hat * s + mu))
        losses.append(float(recon_loss(out, data.x, bundle.schema)))
    return float(np.mean(losses))


# --------------------------------------------------------------------------- persistence


def save_bundle(bundle: GeneratorBundle, path: str | os.PathLike) -> Path:
    tensors = {
        **tensorio.state_dict_to_numpy(bundle.denoiser.state_dict(), "denoiser."),
        **tensorio.state_dict_to_numpy(bundle.decoder.state_dict(), "decoder."),
        **tensorio.state_dict_to_numpy(bundle.detokenizer.state_dict(), "detokenizer."),
        "latent.mu": bundle.mu,
        "latent.s": bundle.s,
        "tokenizer.u": bundle.tokenizer.base_vector,
        "tokenizer.W": bundle.tokenizer.projection,
    }
    meta = {
        "format": BUNDLE_FORMAT,
        "version": bundle.version,
        "config": bundle.config.to_dict(),
        "encoder_ref": bundle.encoder_ref,
        "tokenizer": {"hash": bundle.tokenizer.content_hash, "perturbation_seed": bundle.tokenizer.perturbation_seed},
        "hashes": {
            "denoiser": tensorio.hash_module(bundle.denoiser),
            "decoder": tensorio.hash_module(bundle.decoder),
            "detokenizer": tensorio.hash_module(bundle.detokenizer),
        },
        "train_rows": bundle.train_rows,
        "history": {k: v for k, v in bundle.history.items() if k.startswith("denoiser_hash")},
    }
    files = {"schema.json": schema_to_json(bundle.schema), "preprocess.json": bundle.preprocess.to_json()}
    return tensorio.save_group(path, tensors, meta, files)


def load_bundle(path: str | os.PathLike) -> GeneratorBundle:
    path = Path(path)
    try:
        meta_only = json.loads((path / tensorio.MANIFEST).read_text())["meta"]
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest ({exc})") from None
    if meta_only.get("format") != BUNDLE_FORMAT:
        raise CorruptionError(f"{path} is not a generator bundle")
    if meta_only.get("version") != BUNDLE_VERSION:
        raise BundleVersionError(f"{path}: bundle version {meta_only.get('version')} != {BUNDLE_VERSION}")
    tensors, files, meta = tensorio.load_group(path)
    cfg = RunConfig.from_dict(meta["config"])
    preprocess = PreprocessState.from_json(files["preprocess.json"])
    schema = schema_from_json(files["schema.json"])
    if schema_signature(schema) != schema_signature(preprocess.schema):
        raise CorruptionError(f"{path}: schema and preprocessing state disagree")
    denoiser = build_denoiser(cfg, 0)
    decoder = build_decoder(cfg, 0)
    detok = Detokenizer(schema, cfg.latent_dim)
    try:
        denoiser.load_state_dict(tensorio.numpy_to_state_dict(tensors, "denoiser."))
        decoder.load_state_dict(tensorio.numpy_to_state_dict(tensors, "decoder."))
        detok.load_state_dict(tensorio.numpy_to_state_dict(tensors, "detokenizer."))
    except RuntimeError as exc:
        raise CorruptionError(f"{path}: tensors do not match the configured architecture: {exc}") from None
    for p in denoiser.parameters():
        p.requires_grad_(False)
    denoiser.eval()
    decoder.eval()
    tok = TokenizerParams(tensors["tokenizer.u"], tensors["tokenizer.W"], meta["tokenizer"]["perturbation_seed"])
    return GeneratorBundle(
        denoiser=denoiser,
        decoder=decoder,
        detokenizer=detok,
        mu=tensors["latent.mu"],
        s=tensors["latent.s"],
        tokenizer=tok,
        encoder_ref=meta["encoder_ref"],
        preprocess=preprocess,
        config=cfg,
        version=meta["version"],
        train_rows=meta.get("train_rows"),
        history=meta.get("history", {}),
    )


__all__ = [
    "GeneratorBundle",
    "Pretrained",
    "build_decoder",
    "build_denoiser",
    "build_encoder",
    "build_tokenizer",
    "denoised_reconstruction_loss",
    "fit",
    "generate",
    "load_bundle",
    "load_run_config",
    "pretrain",
    "prepare",
    "save_bundle",
]
