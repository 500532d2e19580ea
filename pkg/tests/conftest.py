import numpy as np
import pytest

from tabforge.config import RunConfig
from tabforge.data import FeatureSchema, TableDataset

# Small enough that a full pretrain -> fit -> generate takes a couple of seconds.
TINY = dict(
    latent_dim=16,
    reduced_dim=4,
    encoder_depth=2,
    diffusion_layers=2,
    decoder_layers=2,
    rounds=1,
    diffusion_steps_per_dataset=6,
    decoder_steps_per_dataset=6,
    fit_diffusion_steps=4,
    fit_decoder_steps=4,
    batch_size=64,
)


@pytest.fixture
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("TABFORGE_CACHE_DIR", str(tmp_path / "latent-cache"))


def mixed_table(n=40, seed=0, n_classes=2):
    rng = np.random.default_rng(seed)
    schema = (
        FeatureSchema("a", "numerical"),
        FeatureSchema("b", "numerical"),
        FeatureSchema("c", "categorical", ("x", "y", "z")),
        FeatureSchema("target", "categorical", tuple(str(i) for i in range(n_classes))),
    )
    values = np.column_stack(
        [
            rng.normal(size=n),
            rng.normal(3.0, 2.0, size=n),
            rng.integers(0, 3, size=n),
            np.arange(n) % n_classes,
        ]
    )
    return TableDataset(values, schema)


@pytest.fixture
def table():
    return mixed_table()
