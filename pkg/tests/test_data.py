import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabforge.data import (
    FeatureSchema,
    SplitPlan,
    TableDataset,
    fit_preprocess,
    impute,
    infer_schema,
    inverse_transform,
    load_csv,
    make_splits,
    save_csv,
    save_schema,
    split_sizes,
    transform,
)
from tabforge.errors import DecodeError, ParseError, PreprocessError, SchemaError, SplitError

from conftest import mixed_table


def write(path, text):
    path.write_text(text)
    return path


# --------------------------------------------------------------------------- csv and schema


def test_small_csv_kinds(tmp_path):
    p = write(tmp_path / "t.csv", "age,color,y\n31.5,r,0\n40,g,1\n22,b,0\n")
    ds = load_csv(p)
    assert ds.n_features == 3
    assert [c.kind for c in ds.schema] == ["numerical", "categorical", "categorical"]
    assert ds.schema[1].category_labels == ("b", "g", "r")
    assert ds.target_index == 2


def test_all_distinct_floats_are_numerical():
    rows = [[f"{0.1 * i:.3f}", "a"] for i in range(15)]
    schema = infer_schema(["f", "g"], rows)
    assert schema[0].kind == "numerical"


def test_repeated_small_integer_column_is_categorical():
    rows = [[str(i % 4), "1.5"] for i in range(30)]
    schema = infer_schema(["f", "g"], rows)
    assert schema[0].kind == "categorical"
    assert schema[0].category_labels == ("0", "1", "2", "3")


def test_many_distinct_values_are_numerical():
    rows = [[str(i % 25)] * 2 for i in range(100)]
    assert infer_schema(["f", "g"], rows)[0].kind == "numerical"


def test_empty_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_csv(write(tmp_path / "e.csv", ""))


def test_ragged_row_reports_row(tmp_path):
    p = write(tmp_path / "r.csv", "a,b\n1,2\n3\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(p)


def test_schema_sidecar_mismatch(tmp_path):
    p = write(tmp_path / "t.csv", "a,b\n1,x\n2,y\n")
    sidecar = tmp_path / "s.json"
    save_schema((FeatureSchema("a", "numerical"), FeatureSchema("b", "categorical", ("x",))), sidecar)
    with pytest.raises(SchemaError):
        load_csv(p, sidecar)
    save_schema((FeatureSchema("a", "numerical"), FeatureSchema("c", "categorical", ("x", "y"))), sidecar)
    with pytest.raises(SchemaError):
        load_csv(p, sidecar)


def test_missing_cells_are_nan(tmp_path):
    p = write(tmp_path / "m.csv", "a,b\n1,x\n,y\n3,\n")
    ds = load_csv(p)
    assert np.isnan(ds.values[1, 0]) and np.isnan(ds.values[2, 1])


def test_csv_round_trip(tmp_path, table):
    save_csv(table, tmp_path / "t.csv")
    sidecar = tmp_path / "s.json"
    save_schema(table.schema, sidecar)
    back = load_csv(tmp_path / "t.csv", sidecar)
    np.testing.assert_array_equal(back.values, table.values)


def test_invalid_codes_rejected():
    schema = (FeatureSchema("a", "numerical"), FeatureSchema("b", "categorical", ("x", "y")))
    with pytest.raises(SchemaError):
        TableDataset(np.array([[0.0, 2.0]]), schema)
    with pytest.raises(SchemaError):
        FeatureSchema("b", "categorical", ("x", "x"))


# --------------------------------------------------------------------------- preprocessing


def _num_table(column):
    schema = (FeatureSchema("v", "numerical"), FeatureSchema("y", "categorical", ("0", "1")))
    return TableDataset(np.column_stack([column, np.zeros(len(column))]), schema)


def test_population_statistics():
    state = fit_preprocess(_num_table([1.0, 2.0, 3.0]))
    assert state.mean[0] == 2.0
    assert state.std[0] == math.sqrt(2 / 3 + 1e-12)


def test_transform_matches_hand_computation():
    ds = _num_table([1.0, 2.0, 3.0])
    z = transform(ds, fit_preprocess(ds)).values[:, 0]
    np.testing.assert_allclose(z, [-1.22474, 0.0, 1.22474], atol=1e-4)


def test_constant_column_guard():
    ds = _num_table([5.0, 5.0, 5.0])
    state = fit_preprocess(ds)
    assert state.std[0] == math.sqrt(1e-12)
    assert np.all(transform(ds, state).values[:, 0] == 0)


def test_categorical_mode():
    schema = (FeatureSchema("v", "numerical"), FeatureSchema("c", "categorical", ("p", "q")))
    ds = TableDataset(np.array([[1.0, 0], [2.0, 0], [3.0, 1]]), schema)
    assert fit_preprocess(ds).mode[1] == 0


def test_missing_numerical_transforms_to_zero():
    ds = _num_table([1.0, np.nan, 3.0])
    state = fit_preprocess(ds)
    assert state.mean[0] == 2.0
    assert transform(ds, state).values[1, 0] == 0.0


def test_all_missing_column_names_it():
    with pytest.raises(PreprocessError, match="'v'"):
        fit_preprocess(_num_table([np.nan, np.nan]))


def test_bad_code_on_inverse():
    ds = _num_table([1.0, 2.0])
    state = fit_preprocess(ds)
    # model output that skipped construction-time validation
    object.__setattr__(ds, "values", np.array([[0.0, 5.0]]))
    with pytest.raises(DecodeError):
        inverse_transform(ds, state)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 60), scale=st.floats(1e-3, 1e4))
def test_round_trip_property(seed, n, scale):
    base = mixed_table(n, seed)
    values = base.values.copy()
    values[:, 0] *= scale
    ds = base.with_values(values)
    state = fit_preprocess(ds)
    back = inverse_transform(transform(ds, state), state)
    cat = ds.categorical_mask
    np.testing.assert_array_equal(back.values[:, cat], ds.values[:, cat])
    np.testing.assert_allclose(back.values[:, ~cat], ds.values[:, ~cat], rtol=1e-6, atol=1e-9 * scale)


def test_impute_uses_training_statistics():
    train = _num_table([0.0, 4.0])
    state = fit_preprocess(train)
    other = _num_table([np.nan, 100.0])
    assert impute(other, state).values[0, 0] == 2.0


# --------------------------------------------------------------------------- splitting


def test_split_sizes_thousand():
    plan = make_splits(mixed_table(1000), n_repeats=1, seed=0)
    r = plan.repeats[0]
    assert (len(r.train), len(r.val), len(r.test), len(r.holdout)) == (300, 100, 300, 300)


def test_split_sizes_rounding():
    # dev = round(0.4 * 15) = 6, test = round(4.5) = 5, holdout = 4, train = round(4.5) = 5, val = 1
    assert split_sizes(15) == (5, 1, 5, 4)


def test_split_deterministic():
    ds = mixed_table(200)
    a, b = make_splits(ds, 3, seed=4), make_splits(ds, 3, seed=4)
    assert a.to_json() == b.to_json()


def test_ten_repeats_differ():
    plan = make_splits(mixed_table(300), n_repeats=10, seed=1)
    trains = [tuple(r.train) for r in plan.repeats]
    assert len(set(trains)) >= 9


def test_too_few_rows():
    with pytest.raises(SplitError):
        make_splits(mixed_table(9), 1)


def test_stratification_within_one():
    ds = mixed_table(203, n_classes=3)
    target = ds.values[:, -1]
    plan = make_splits(ds, n_repeats=5, seed=2)
    assert plan.stratified
    for r in plan.repeats:
        for part in r.as_dict().values():
            for c in range(3):
                expected = (target == c).sum() * len(part) / ds.n_rows
                assert abs((target[part] == c).sum() - expected) <= 1


def test_small_class_falls_back_with_warning():
    ds = mixed_table(40)
    values = ds.values.copy()
    values[:, -1] = 0
    values[:3, -1] = 1
    plan = make_splits(ds.with_values(values), n_repeats=5)
    assert not plan.stratified and plan.warning


def test_plan_serialization(tmp_path):
    plan = make_splits(mixed_table(50), 2, seed=3)
    plan.save(tmp_path / "p.json")
    assert SplitPlan.load(tmp_path / "p.json").to_json() == plan.to_json()


@settings(max_examples=50, deadline=None)
@given(n=st.integers(10, 400), seed=st.integers(0, 2**31), stratify=st.booleans())
def test_partition_property(n, seed, stratify):
    plan = make_splits(mixed_table(n, seed % 97), n_repeats=2, seed=seed, stratify=stratify)
    for r in plan.repeats:
        parts = list(r.as_dict().values())
        joined = np.concatenate(parts)
        assert len(joined) == n and set(joined.tolist()) == set(range(n))
        assert [len(p) for p in parts] == list(split_sizes(n))
