"""Synthetic mixed-type tables for smoke runs, demos and tests."""
from __future__ import annotations

import numpy as np

from .data import CATEGORICAL, NUMERICAL, FeatureSchema, TableDataset


def mixed_gaussian_table(
    n_rows: int = 500,
    n_numerical: int = 3,
    cardinalities: tuple[int, ...] = (3, 4),
    n_classes: int = 2,
    seed: int = 0,
) -> TableDataset:
    """Correlated numerical columns, thresholded categorical columns and a class target.

    All columns are driven by a shared low-dimensional Gaussian factor, so
    pairwise dependence is non-trivial. One numerical column is log-normal to
    give a skewed marginal.
    """
    rng = np.random.default_rng(seed)
    n_factors = 2
    factors = rng.standard_normal((n_rows, n_factors))
    columns, schema = [], []
    for j in range(n_numerical):
        load = rng.normal(size=n_factors)
        raw = factors @ load + 0.5 * rng.standard_normal(n_rows)
        if j == 0:
            raw = np.exp(0.5 * raw)
        columns.append(rng.uniform(-5, 5) + rng.uniform(0.5, 10) * raw)
        schema.append(FeatureSchema(f"num_{j}", NUMERICAL))
    for j, c in enumerate(cardinalities):
        load = rng.normal(size=n_factors)
        score = factors @ load + 0.7 * rng.standard_normal(n_rows)
        cuts = np.quantile(score, np.sort(rng.uniform(0.1, 0.9, size=c - 1)))
        columns.append(np.searchsorted(cuts, score).astype(np.float64))
        schema.append(FeatureSchema(f"cat_{j}", CATEGORICAL, tuple(f"c{k}" for k in range(c))))
    load = rng.normal(size=n_factors)
    logit = factors @ load + 0.5 * rng.standard_normal(n_rows)
    cuts = np.quantile(logit, np.linspace(0, 1, n_classes + 1)[1:-1])
    columns.append(np.searchsorted(cuts, logit).astype(np.float64))
    schema.append(FeatureSchema("target", CATEGORICAL, tuple(str(k) for k in range(n_classes))))
    return TableDataset(np.column_stack(columns), tuple(schema))


def toy_suite(seed: int = 0, n_rows: int = 500) -> tuple[list[TableDataset], TableDataset]:
    """Two pretraining tables and one unseen table with a different layout."""
    pre = [
        mixed_gaussian_table(n_rows, 3, (3, 4), 2, seed=1000 * seed + 1),
        mixed_gaussian_table(n_rows, 4, (5,), 3, seed=1000 * seed + 2),
    ]
    unseen = mixed_gaussian_table(n_rows, 3, (2, 5), 2, seed=1000 * seed + 3)
    return pre, unseen
