"""Synthetic-data quality metrics: Shape, Trend, DCR and Authenticity.

Shape and Trend follow the column-marginal and column-pair semantics of the
SDMetrics toolkit (KS / total variation / Pearson / contingency tables) but
are not bit-identical to it. DCR and Authenticity work in a mixed space:
numerical columns standardised with the training statistics, categorical
columns contributing 0 or 1 per mismatch.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import ks_2samp

from .data import PreprocessState, TableDataset, impute, schema_signature
from .errors import ArgumentError, SchemaError

N_BINS = 10


def _check_schemas(real: TableDataset, synth: TableDataset) -> None:
    if schema_signature(real.schema) != schema_signature(synth.schema):
        raise SchemaError("real and synthetic tables have different schemas")


def _present(x: np.ndarray) -> np.ndarray:
    return x[~np.isnan(x)]


def _frequencies(codes: np.ndarray, cardinality: int) -> np.ndarray:
    codes = _present(codes).astype(np.int64)
    counts = np.bincount(codes, minlength=cardinality).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def column_shape_scores(real: TableDataset, synth: TableDataset) -> list[float]:
    _check_schemas(real, synth)
    scores = []
    for j, col in enumerate(real.schema):
        a, b = real.values[:, j], synth.values[:, j]
        if col.is_categorical:
            tv = 0.5 * np.abs(_frequencies(a, col.cardinality) - _frequencies(b, col.cardinality)).sum()
            scores.append(1.0 - tv)
        else:
            a, b = _present(a), _present(b)
            scores.append(1.0 - ks_2samp(a, b).statistic if a.size and b.size else 0.0)
    return scores


def shape_score(real: TableDataset, synth: TableDataset) -> float:
    """Mean per-column marginal similarity in ``[0, 1]``."""
    return float(np.mean(column_shape_scores(real, synth)))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    if x.size < 2:
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0  # constant column: correlation defined as 0
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def _bin_edges(real_column: np.ndarray) -> np.ndarray:
    qs = np.quantile(_present(real_column), np.linspace(0, 1, N_BINS + 1)[1:-1]) if _present(real_column).size else []
    return np.unique(qs)


def _discretize(column: np.ndarray, edges: np.ndarray) -> np.ndarray:
    out = np.searchsorted(edges, column, side="right").astype(np.float64)
    out[np.isnan(column)] = np.nan
    return out


def _contingency(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    keep = ~(np.isnan(a) | np.isnan(b))
    idx = a[keep].astype(np.int64) * nb + b[keep].astype(np.int64)
    table = np.bincount(idx, minlength=na * nb).astype(np.float64)
    return table / max(table.sum(), 1.0)


def pair_trend_scores(real: TableDataset, synth: TableDataset) -> dict[tuple[int, int], float]:
    _check_schemas(real, synth)
    if real.n_features < 2:
        raise ArgumentError("trend needs at least two columns")
    discrete_real, discrete_synth, sizes = {}, {}, {}
    for j, col in enumerate(real.schema):
        if col.is_categorical:
            discrete_real[j], discrete_synth[j], sizes[j] = real.values[:, j], synth.values[:, j], col.cardinality
        else:
            edges = _bin_edges(real.values[:, j])
            discrete_real[j] = _discretize(real.values[:, j], edges)
            discrete_synth[j] = _discretize(synth.values[:, j], edges)
            sizes[j] = len(edges) + 1
    scores = {}
    for i, j in combinations(range(real.n_features), 2):
        ci, cj = real.schema[i], real.schema[j]
        if not ci.is_categorical and not cj.is_categorical:
            rho_r = _pearson(real.values[:, i], real.values[:, j])
            rho_s = _pearson(synth.values[:, i], synth.values[:, j])
            scores[(i, j)] = 1.0 - abs(rho_r - rho_s) / 2.0
        else:
            p = _contingency(discrete_real[i], discrete_real[j], sizes[i], sizes[j])
            q = _contingency(discrete_synth[i], discrete_synth[j], sizes[i], sizes[j])
            scores[(i, j)] = 1.0 - 0.5 * float(np.abs(p - q).sum())
    return scores


def trend_score(real: TableDataset, synth: TableDataset) -> float:
    """Mean pairwise-dependence similarity in ``[0, 1]``."""
    return float(np.mean(list(pair_trend_scores(real, synth).values())))


# --------------------------------------------------------------------------- distances


def _split_standardized(ds: TableDataset, normalizer: PreprocessState) -> tuple[np.ndarray, np.ndarray]:
    values = impute(ds, normalizer).values
    num = ~ds.categorical_mask
    z = (values[:, num] - normalizer.mean[num]) / normalizer.std[num]
    return z, values[:, ~num].astype(np.int64)


def embed_mixed(ds: TableDataset, normalizer: PreprocessState) -> np.ndarray:
    """Euclidean embedding of the mixed distance.

    Standardised numericals plus one-hot categoricals scaled by ``1/sqrt(2)``,
    so that a category mismatch adds exactly 1 to the squared distance.
    """
    z, codes = _split_standardized(ds, normalizer)
    blocks = [z]
    cat_cols = [c for c in ds.schema if c.is_categorical]
    for k, col in enumerate(cat_cols):
        onehot = np.zeros((ds.n_rows, col.cardinality))
        onehot[np.arange(ds.n_rows), codes[:, k]] = 1.0 / math.sqrt(2.0)
        blocks.append(onehot)
    return np.hstack(blocks)


def nearest_distances_brute(query, reference, normalizer, exclude_self: bool = False, chunk: int = 512):
    """All-pairs nearest neighbours under the mixed distance.

    Returns ``(distance, index)`` arrays over the query rows. With
    ``exclude_self`` the query and reference are the same table and each
    row's own index is skipped.
    """
    qz, qc = _split_standardized(query, normalizer)
    rz, rc = _split_standardized(reference, normalizer)
    n = query.n_rows
    dist = np.empty(n)
    index = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = ((qz[start:stop, None, :] - rz[None, :, :]) ** 2).sum(axis=2)
        d2 += (qc[start:stop, None, :] != rc[None, :, :]).sum(axis=2)
        if exclude_self:
            rows = np.arange(start, stop)
            d2[rows - start, rows] = np.inf
        index[start:stop] = np.argmin(d2, axis=1)
        dist[start:stop] = np.sqrt(d2[np.arange(stop - start), index[start:stop]])
    return dist, index


def nearest_distances_kdtree(query, reference, normalizer, exclude_self: bool = False):
    """KD-tree nearest neighbours over the Euclidean embedding of the mixed distance."""
    q = embed_mixed(query, normalizer)
    r = embed_mixed(reference, normalizer)
    tree = cKDTree(r)
    if not exclude_self:
        dist, index = tree.query(q, k=1)
        return dist, index.astype(np.int64)
    dist, index = tree.query(q, k=2)
    own = index[:, 0] == np.arange(query.n_rows)
    pick = np.where(own, 1, 0)
    rows = np.arange(query.n_rows)
    return dist[rows, pick], index[rows, pick].astype(np.int64)


def nearest_distances(query, reference, normalizer, exclude_self=False, method: str = "brute"):
    if method == "brute":
        return nearest_distances_brute(query, reference, normalizer, exclude_self)
    if method == "kdtree":
        return nearest_distances_kdtree(query, reference, normalizer, exclude_self)
    raise ArgumentError(f"unknown neighbour search {method!r}")


def dcr(
    real_train: TableDataset,
    synth: TableDataset,
    normalizer: PreprocessState,
    holdout: TableDataset | None = None,
    method: str = "brute",
) -> tuple[float, float]:
    """Median distance from synthetic rows to their closest training row, and its score.

    The score is ``raw / (raw + m)`` where ``m`` is the same median computed for
    holdout rows against the training rows (or, without a holdout, training
    rows against their nearest other training row). A candidate as far from
    the training data as fresh real data scores 0.5.
    """
    _check_schemas(real_train, synth)
    if synth.n_rows == 0:
        raise ArgumentError("synthetic table is empty")
    raw = float(np.median(nearest_distances(synth, real_train, normalizer, method=method)[0]))
    if holdout is not None:
        _check_schemas(real_train, holdout)
        ref = float(np.median(nearest_distances(holdout, real_train, normalizer, method=method)[0]))
    elif real_train.n_rows >= 2:
        ref = float(np.median(nearest_distances(real_train, real_train, normalizer, True, method)[0]))
    else:
        ref = 0.0
    if raw + ref == 0.0:
        return raw, 0.0
    return raw, raw / (raw + ref)


def authenticity(real_train: TableDataset, synth: TableDataset, normalizer: PreprocessState, method: str = "brute") -> float:
    """Fraction of synthetic rows not closer to their nearest training row than that row's own neighbour."""
    _check_schemas(real_train, synth)
    if real_train.n_rows < 2:
        raise ArgumentError("authenticity needs at least two training rows")
    if synth.n_rows == 0:
        raise ArgumentError("synthetic table is empty")
    gap, _ = nearest_distances(real_train, real_train, normalizer, True, method)
    d, idx = nearest_distances(synth, real_train, normalizer, method=method)
    return float(np.mean(~(d < gap[idx])))


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    shape: float
    trend: float
    dcr_raw: float
    dcr_score: float
    authenticity: float
    reference: str = "train"
    candidate: str = "synthetic"
    column_shape: dict[str, float] = field(default_factory=dict)
    pair_trend: dict[str, float] = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        return [(m, getattr(self, m)) for m in ("shape", "trend", "dcr_raw", "dcr_score", "authenticity")]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    reference: TableDataset,
    candidate: TableDataset,
    normalizer: PreprocessState,
    holdout: TableDataset | None = None,
    reference_name: str = "train",
    candidate_name: str = "synthetic",
) -> EvalReport:
    names = [c.name for c in reference.schema]
    col = column_shape_scores(reference, candidate)
    pairs = pair_trend_scores(reference, candidate)
    raw, score = dcr(reference, candidate, normalizer, holdout)
    return EvalReport(
        shape=float(np.mean(col)),
        trend=float(np.mean(list(pairs.values()))),
        dcr_raw=raw,
        dcr_score=score,
        authenticity=authenticity(reference, candidate, normalizer),
        reference=reference_name,
        candidate=candidate_name,
        column_shape=dict(zip(names, col)),
        pair_trend={f"{names[i]}|{names[j]}": v for (i, j), v in pairs.items()},
    )


# higher shape/trend and lower dcr_score/authenticity mean "closer to train"
_TOWARD_TRAIN = {"shape": 1, "trend": 1, "dcr_score": -1, "authenticity": -1}


def overfit_report(
    train: TableDataset, holdout: TableDataset, synth: TableDataset, normalizer: PreprocessState
) -> tuple[EvalReport, EvalReport]:
    """Synthetic-vs-train and holdout-vs-train reports.

    A flag on the synthetic report marks a metric on which the synthetic data
    sits closer to the training rows than genuinely unseen holdout rows do.
    """
    synth_report = evaluate(train, synth, normalizer, holdout, "train", "synthetic")
    holdout_report = evaluate(train, holdout, normalizer, holdout, "train", "holdout")
    for metric, sign in _TOWARD_TRAIN.items():
        s, h = getattr(synth_report, metric), getattr(holdout_report, metric)
        synth_report.flags[metric] = bool(sign * (s - h) > 0)
        holdout_report.flags[metric] = False
    return synth_report, holdout_report


def write_report(reports: list[EvalReport], directory: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``report.json`` and a flat ``report.csv`` (one row per metric)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "report.json"
    json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    csv_path = directory / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["candidate", "reference", "metric", "value", "overfit_flag"])
        for r in reports:
            for metric, value in r.rows():
                writer.writerow([r.candidate, r.reference, metric, repr(value), r.flags.get(metric, "")])
    return json_path, csv_path
