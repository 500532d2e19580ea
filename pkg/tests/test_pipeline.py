import json

import numpy as np
import pytest
import torch

from tabforge import tensorio
from tabforge.config import RunConfig
from tabforge.data import FeatureSchema, make_splits
from tabforge.diffusion import diffusion_loss, draw_noise
from tabforge.errors import ArgumentError, BindingError, BundleVersionError, CorruptionError, PretrainError
from tabforge.pipeline import (
    Pretrained,
    build_encoder,
    fit,
    generate,
    load_bundle,
    prepare,
    pretrain,
    save_bundle,
)
from tabforge.toy import mixed_gaussian_table, toy_suite

from conftest import TINY


@pytest.fixture(scope="module")
def cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="module")
def enc(cfg):
    return build_encoder(cfg)


@pytest.fixture(scope="module")
def suite():
    return toy_suite(0, n_rows=80)


@pytest.fixture(scope="module")
def pretrained(cfg, enc, suite):
    return pretrain(suite[0], cfg, seed=0, encoder=enc, cache_dir=False)


@pytest.fixture(scope="module")
def bundle(pretrained, enc, suite):
    return fit(suite[1], pretrained, seed=0, encoder=enc, cache_dir=False)


def state_bytes(module):
    return b"".join(v.numpy().tobytes() for v in module.state_dict().values())


# --------------------------------------------------------------------------- pretraining


def test_step_counting(cfg, enc, suite):
    c = cfg.replace(rounds=2, diffusion_steps_per_dataset=10, decoder_steps_per_dataset=10)
    pt = pretrain(suite[0][:1], c, encoder=enc, cache_dir=False)
    assert pt.history["diffusion_steps"] == 20 and pt.history["decoder_steps"] == 20
    assert len(pt.history["diffusion_losses"]) == 20 and len(pt.history["decoder_losses"]) == 20


def test_shared_weights_trained_on_both_widths(cfg, enc, pretrained, suite):
    a, b = suite[0]
    assert a.n_features != b.n_features or a.schema != b.schema
    only_first = pretrain([a], cfg, seed=0, encoder=enc, cache_dir=False)
    assert [v["dataset"] for v in pretrained.history["visits"]] == ["dataset_0", "dataset_1"]
    assert state_bytes(only_first.denoiser) != state_bytes(pretrained.denoiser)
    assert state_bytes(only_first.decoder) != state_bytes(pretrained.decoder)


def test_resume_matches_uninterrupted(cfg, enc, suite, tmp_path):
    c = cfg.replace(rounds=2)
    full = pretrain(suite[0], c, seed=3, encoder=enc, cache_dir=False)
    pretrain(suite[0], c, seed=3, encoder=enc, cache_dir=False, checkpoint_dir=tmp_path, stop_after_round=0)
    assert [p.name for p in tmp_path.glob("round_*.pt")] == ["round_0000.pt"]
    resumed = pretrain(suite[0], c, seed=3, encoder=enc, cache_dir=False, checkpoint_dir=tmp_path, resume=True)
    assert state_bytes(resumed.denoiser) == state_bytes(full.denoiser)
    assert state_bytes(resumed.decoder) == state_bytes(full.decoder)


def test_bad_dataset_is_named(cfg, enc, suite):
    tiny = suite[0][0].take([0, 1, 2])  # fewer rows than folds
    with pytest.raises(PretrainError, match="broken"):
        pretrain([suite[0][0], tiny], cfg, encoder=enc, names=["fine", "broken"], cache_dir=False)


def test_encoder_stays_frozen(cfg, enc, pretrained, bundle):
    assert enc.weight_hash == build_encoder(cfg).weight_hash == pretrained.encoder_hash
    enc.verify_frozen()


def test_pretrained_round_trip(tmp_path, pretrained):
    pretrained.save(tmp_path / "pt")
    back = Pretrained.load(tmp_path / "pt")
    assert state_bytes(back.denoiser) == state_bytes(pretrained.denoiser)
    assert back.tokenizer.content_hash == pretrained.tokenizer.content_hash


# --------------------------------------------------------------------------- fitting


def test_stage_hashes(bundle):
    h = bundle.history
    assert h["denoiser_hash_start"] != h["denoiser_hash_fitted"]
    assert h["denoiser_hash_fitted"] == h["denoiser_hash_final"] == tensorio.hash_module(bundle.denoiser)


def test_fresh_detokenizer_matches_cardinalities(pretrained, enc):
    ds = mixed_gaussian_table(60, n_numerical=2, cardinalities=(5,), n_classes=2, seed=1)
    b = fit(ds, pretrained, seed=0, encoder=enc, cache_dir=False)
    k = pretrained.config.latent_dim
    assert sorted(tuple(h.weight.shape) for h in b.detokenizer.cat_heads) == [(2, k), (5, k)]


def test_fit_rejects_foreign_encoder(pretrained, suite, cfg):
    other = build_encoder(cfg.replace(encoder_seed=5))
    with pytest.raises(BindingError):
        fit(suite[1], pretrained, encoder=other, cache_dir=False)


def test_fit_uses_only_train_rows(pretrained, enc, suite):
    ds = suite[1]
    plan = make_splits(ds, 1, seed=0)
    rows = plan.repeats[0].train
    b = fit(ds, pretrained, seed=0, encoder=enc, cache_dir=False, row_indices=rows)
    assert b.train_rows == sorted(rows.tolist())
    forbidden = set(np.concatenate([plan.repeats[0].val, plan.repeats[0].test, plan.repeats[0].holdout]).tolist())
    assert forbidden.isdisjoint(b.train_rows)
    # statistics are those of the train rows alone
    direct = fit(ds.take(rows), pretrained, seed=0, encoder=enc, cache_dir=False)
    np.testing.assert_array_equal(b.preprocess.mean, direct.preprocess.mean)
    assert state_bytes(b.denoiser) == state_bytes(direct.denoiser)


def test_fit_lowers_both_losses(cfg, enc):
    c = cfg.replace(fit_diffusion_steps=100, fit_decoder_steps=100, diffusion_steps_per_dataset=20, decoder_steps_per_dataset=20)
    diffusion_gain, decoder_gain = [], []
    for seed in range(5):
        pre, unseen = toy_suite(seed, n_rows=80)
        pt = pretrain(pre, c, seed=seed, encoder=enc, cache_dir=False)
        b = fit(unseen, pt, seed=seed, encoder=enc, cache_dir=False)
        data = prepare(unseen, enc, pt.tokenizer, c, False)
        gen = torch.Generator().manual_seed(123)
        draws = [draw_noise(c.schedule, data.z0.shape, gen) for _ in range(8)]
        with torch.no_grad():
            loss = lambda d: np.mean([float(diffusion_loss(d, d.precond, data.z0, s, e)) for s, e in draws])  # noqa: E731
            diffusion_gain.append(loss(pt.denoiser) - loss(b.denoiser))
        losses = b.history["decoder_losses"]
        decoder_gain.append(losses[0] - np.mean(losses[-10:]))
    assert np.median(diffusion_gain) > 0
    assert np.median(decoder_gain) > 0


# --------------------------------------------------------------------------- generation and bundles


def test_generate_rows_and_no_encoder_calls(bundle, enc, suite):
    before = enc.calls
    synth = generate(bundle, 1000, seed=1)
    assert enc.calls == before
    assert synth.n_rows == 1000 and synth.schema == suite[1].schema
    for j, col in enumerate(synth.schema):
        if col.is_categorical:
            assert synth.values[:, j].max() < col.cardinality
    assert np.all(np.isfinite(synth.values))


def test_generate_deterministic(bundle):
    assert generate(bundle, 50, seed=4).values.tobytes() == generate(bundle, 50, seed=4).values.tobytes()
    assert generate(bundle, 50, seed=4).values.tobytes() != generate(bundle, 50, seed=5).values.tobytes()


def test_generate_rejects_bad_counts(bundle):
    for n in (0, -3):
        with pytest.raises(ArgumentError):
            generate(bundle, n)


def test_generate_rejects_other_schema(bundle):
    wider = tuple(bundle.schema) + tuple(FeatureSchema(f"extra{i}", "numerical") for i in range(3))
    with pytest.raises(BindingError):
        generate(bundle, 5, schema=wider)


def test_bundle_round_trip(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b")
    loaded = load_bundle(tmp_path / "b")
    a = generate(bundle, 64, seed=7).values.tobytes()
    assert generate(loaded, 64, seed=7).values.tobytes() == a
    assert generate(loaded, 64, seed=7).values.tobytes() == a


def test_bundle_needs_no_encoder(tmp_path, bundle, monkeypatch):
    save_bundle(bundle, tmp_path / "b")
    import tabforge.pipeline as pipeline

    def boom(*args, **kwargs):
        raise AssertionError("encoder built during generation")

    monkeypatch.setattr(pipeline, "build_encoder", boom)
    generate(load_bundle(tmp_path / "b"), 10, seed=0)


def test_truncated_bundle(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b")
    victim = next((tmp_path / "b").glob("denoiser*"))
    victim.write_bytes(victim.read_bytes()[:-7])
    with pytest.raises(CorruptionError):
        load_bundle(tmp_path / "b")


def test_bundle_version_mismatch(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b")
    manifest = tmp_path / "b" / "manifest.json"
    doc = json.loads(manifest.read_text())
    doc["meta"]["version"] = 99
    manifest.write_text(json.dumps(doc))
    with pytest.raises(BundleVersionError):
        load_bundle(tmp_path / "b")


def test_bundle_manifest_echoes_config(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b")
    meta = json.loads((tmp_path / "b" / "manifest.json").read_text())["meta"]
    assert meta["config"] == bundle.config.to_dict()
    assert meta["encoder_ref"]["weight_hash"] == bundle.encoder_ref["weight_hash"]
