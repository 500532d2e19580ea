import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabforge.data import FeatureSchema, PreprocessState, TableDataset, fit_preprocess
from tabforge.errors import ArgumentError, SchemaError
from tabforge.evaluation import (
    authenticity,
    column_shape_scores,
    dcr,
    evaluate,
    nearest_distances_brute,
    nearest_distances_kdtree,
    overfit_report,
    pair_trend_scores,
    shape_score,
    trend_score,
    write_report,
)

from conftest import mixed_table

NUM2 = (FeatureSchema("x", "numerical"), FeatureSchema("y", "numerical"))
IDENTITY2 = PreprocessState(NUM2, np.zeros(2), np.ones(2), np.array([-1, -1]))


def num_table(values):
    return TableDataset(np.asarray(values, dtype=float).reshape(len(values), -1), NUM2)


def cat_table(codes, c=2):
    schema = (FeatureSchema("a", "categorical", tuple(map(str, range(c)))), FeatureSchema("b", "numerical"))
    return TableDataset(np.column_stack([codes, np.zeros(len(codes))]), schema)


def with_correlation(rho, n=400, seed=0):
    """Two columns whose sample Pearson correlation is exactly ``rho``."""
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, n))
    a = (a - a.mean()) / a.std()
    b = b - b.mean()
    b -= (a @ b) / (a @ a) * a
    b /= b.std()
    return num_table(np.column_stack([a, rho * a + math.sqrt(1 - rho**2) * b]))


# --------------------------------------------------------------------------- shape and trend


def test_identical_tables_score_one(table):
    assert shape_score(table, table) == 1.0
    assert trend_score(table, table) == 1.0


def test_disjoint_categories_score_zero():
    assert column_shape_scores(cat_table([0, 0, 0]), cat_table([1, 1, 1]))[0] == 0.0


def test_tv_example():
    real = cat_table([0, 1, 0, 1])
    synth = cat_table([0, 0, 0, 1])
    assert column_shape_scores(real, synth)[0] == pytest.approx(0.75)


def test_ks_column_matches_scipy():
    from scipy.stats import ks_2samp

    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(50, 2)), rng.normal(0.5, 1, size=(70, 2))
    expected = 1 - ks_2samp(a[:, 0], b[:, 0]).statistic
    assert column_shape_scores(num_table(a), num_table(b))[0] == pytest.approx(expected)


def test_trend_examples():
    assert np.corrcoef(with_correlation(0.6).values.T)[0, 1] == pytest.approx(0.6)
    assert pair_trend_scores(with_correlation(0.6), with_correlation(0.1, seed=1))[(0, 1)] == pytest.approx(0.75)
    assert pair_trend_scores(with_correlation(1.0), with_correlation(-1.0, seed=1))[(0, 1)] == pytest.approx(0.0, abs=1e-12)


def test_constant_column_counts_as_uncorrelated():
    const = num_table(np.column_stack([np.ones(20), np.arange(20.0)]))
    assert pair_trend_scores(with_correlation(0.0, n=20), const)[(0, 1)] == pytest.approx(1.0)


def test_contingency_pair_for_categoricals():
    real = cat_table([0, 1, 0, 1])
    synth = cat_table([0, 0, 0, 0])
    # b is constant, so the joint table reduces to the marginal of a: TV 0.5
    assert pair_trend_scores(real, synth)[(0, 1)] == pytest.approx(0.5)


def test_schema_mismatch():
    with pytest.raises(SchemaError):
        shape_score(cat_table([0, 1]), num_table([[0, 1], [1, 2]]))


def test_column_shuffle_keeps_shape_breaks_trend():
    real = with_correlation(0.9, n=500)
    values = real.values.copy()
    values[:, 1] = np.random.default_rng(1).permutation(values[:, 1])
    shuffled = real.with_values(values)
    assert shape_score(real, shuffled) == 1.0
    assert trend_score(real, shuffled) < 0.7


# --------------------------------------------------------------------------- distances


def test_dcr_hand_distance():
    raw, _ = dcr(num_table([[0, 0]]), num_table([[3, 4]]), IDENTITY2)
    assert raw == 5.0


def test_dcr_copy_is_zero(table):
    state = fit_preprocess(table)
    assert dcr(table, table, state) == (0.0, 0.0)
    assert authenticity(table, table, state) == 0.0


def test_dcr_monotone_in_offset():
    train = num_table(np.random.default_rng(0).normal(size=(30, 2)))
    offsets = np.random.default_rng(1).normal(size=(20, 2))
    near, _ = dcr(train, num_table(train.values[:20] + offsets), IDENTITY2)
    far, _ = dcr(train, num_table(train.values[:20] + 2 * offsets), IDENTITY2)
    assert far > near


def test_dcr_score_against_holdout():
    train = num_table([[0, 0], [10, 0]])
    holdout = num_table([[0, 1], [10, 1]])
    synth = num_table([[0, 3], [10, 3]])
    raw, score = dcr(train, synth, IDENTITY2, holdout)
    assert raw == 3.0 and score == pytest.approx(3 / 4)


def test_categorical_mismatch_counts_one():
    schema = (FeatureSchema("n", "numerical"), FeatureSchema("c", "categorical", ("p", "q", "r")))
    state = PreprocessState(schema, np.array([0.0, np.nan]), np.array([1.0, np.nan]), np.array([-1, 0]))
    train = TableDataset(np.array([[0.0, 0]]), schema)
    synth = TableDataset(np.array([[1.0, 2]]), schema)
    assert dcr(train, synth, state)[0] == pytest.approx(math.sqrt(2))


def test_empty_synth_rejected():
    synth = num_table([[0, 0]])
    object.__setattr__(synth, "values", np.zeros((0, 2)))
    with pytest.raises(ArgumentError):
        dcr(num_table([[0, 0]]), synth, IDENTITY2)


def test_authenticity_examples():
    line = PreprocessState(NUM2, np.zeros(2), np.ones(2), np.array([-1, -1]))
    train = num_table([[0, 0], [1, 0], [3, 0]])
    assert authenticity(train, num_table([[0.1, 0]]), line) == 0.0
    assert authenticity(train, num_table([[50, 50], [-50, 9]]), line) == 1.0
    with pytest.raises(ArgumentError):
        authenticity(num_table([[0, 0]]), train, line)


@pytest.mark.parametrize("n", [1, 17, 300, 2000])
def test_kdtree_matches_brute_force(n):
    real = mixed_table(n, seed=n)
    synth = mixed_table(max(n // 2, 1), seed=n + 1)
    state = fit_preprocess(real)
    d_brute, _ = nearest_distances_brute(synth, real, state)
    d_tree, _ = nearest_distances_kdtree(synth, real, state)
    np.testing.assert_allclose(d_tree, d_brute, rtol=1e-9, atol=1e-9)
    if n > 1:
        g_brute, _ = nearest_distances_brute(real, real, state, exclude_self=True)
        g_tree, _ = nearest_distances_kdtree(real, real, state, exclude_self=True)
        np.testing.assert_allclose(g_tree, g_brute, rtol=1e-9, atol=1e-9)


# --------------------------------------------------------------------------- properties


@st.composite
def table_pairs(draw):
    n_real = draw(st.integers(2, 30))
    n_synth = draw(st.integers(1, 30))
    seed = draw(st.integers(0, 10_000))
    real, synth = mixed_table(n_real, seed), mixed_table(n_synth, seed + 1)
    if draw(st.booleans()):  # add a constant numerical column
        v = synth.values.copy()
        v[:, 0] = 1.0
        synth = synth.with_values(v)
    return real, synth


@settings(max_examples=60, deadline=None)
@given(table_pairs())
def test_scores_finite_and_bounded(pair):
    real, synth = pair
    report = evaluate(real, synth, fit_preprocess(real))
    for value in (report.shape, report.trend, report.dcr_score, report.authenticity):
        assert math.isfinite(value) and 0.0 <= value <= 1.0
    assert math.isfinite(report.dcr_raw) and report.dcr_raw >= 0


@settings(max_examples=30, deadline=None)
@given(table_pairs(), st.integers(0, 1000))
def test_row_order_invariance(pair, seed):
    real, synth = pair
    state = fit_preprocess(real)
    rng = np.random.default_rng(seed)
    real_p = real.take(rng.permutation(real.n_rows))
    synth_p = synth.take(rng.permutation(synth.n_rows))
    a, b = evaluate(real, synth, state), evaluate(real_p, synth_p, state)
    for metric in ("shape", "trend", "dcr_raw", "dcr_score", "authenticity"):
        assert getattr(a, metric) == pytest.approx(getattr(b, metric), abs=1e-12), metric


# --------------------------------------------------------------------------- reports


def test_overfit_flags():
    train, holdout = mixed_table(60, 0), mixed_table(60, 1)
    state = fit_preprocess(train)
    s_rep, h_rep = overfit_report(train, holdout, holdout, state)
    assert not any(s_rep.flags.values())
    for metric in ("shape", "trend", "dcr_raw", "dcr_score", "authenticity"):
        assert getattr(s_rep, metric) == getattr(h_rep, metric)
    s_rep, _ = overfit_report(train, holdout, train, state)
    assert all(s_rep.flags.values()) and len(s_rep.flags) == 4


def test_report_files(tmp_path, table):
    report = evaluate(table, table, fit_preprocess(table))
    json_path, csv_path = write_report([report], tmp_path)
    doc = json.loads(json_path.read_text())
    assert doc[0]["shape"] == 1.0 and doc[0]["trend"] == 1.0
    rows = list(csv.DictReader(csv_path.open()))
    assert [r["metric"] for r in rows] == ["shape", "trend", "dcr_raw", "dcr_score", "authenticity"]
