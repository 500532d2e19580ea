"""Tables, schemas, preprocessing and the repeated-shuffle splitting protocol.

Categorical cells are stored as ordinal codes into ``FeatureSchema.category_labels``;
missing cells are ``NaN``. The last column is always the prediction target.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import DecodeError, ParseError, PreprocessError, SchemaError, SplitError

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
CATEGORICAL_MAX_DISTINCT = 20
STD_EPS = 1e-12


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    kind: str
    category_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "category_labels", tuple(str(c) for c in self.category_labels))
        if self.kind == CATEGORICAL:
            if not self.category_labels:
                raise SchemaError(f"column {self.name!r}: categorical column without categories")
            if len(set(self.category_labels)) != len(self.category_labels):
                raise SchemaError(f"column {self.name!r}: duplicate category labels")
        elif self.category_labels:
            raise SchemaError(f"column {self.name!r}: numerical column cannot list categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def cardinality(self) -> int | None:
        return len(self.category_labels) if self.is_categorical else None

    def code_of(self, label: str) -> int:
        try:
            return self.category_labels.index(label)
        except ValueError:
            raise SchemaError(f"column {self.name!r}: unknown category {label!r}") from None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            d["categories"] = list(self.category_labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            return cls(d["name"], d["kind"], tuple(d.get("categories", ())))
        except KeyError as exc:
            raise SchemaError(f"schema entry missing field {exc}") from None


def schema_signature(schema: Sequence[FeatureSchema]) -> tuple:
    """Kinds and cardinalities, the part of a schema that model heads bind to."""
    return tuple((f.kind, f.cardinality) for f in schema)


def schema_to_json(schema: Sequence[FeatureSchema]) -> str:
    return json.dumps({"columns": [f.to_dict() for f in schema]}, indent=2)


def schema_from_json(text: str) -> tuple[FeatureSchema, ...]:
    try:
        obj = json.loads(text)
        columns = obj["columns"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"unreadable schema: {exc}") from None
    return tuple(FeatureSchema.from_dict(c) for c in columns)


def save_schema(schema: Sequence[FeatureSchema], path: str | os.PathLike) -> None:
    Path(path).write_text(schema_to_json(schema))


def load_schema(path: str | os.PathLike) -> tuple[FeatureSchema, ...]:
    return schema_from_json(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class TableDataset:
    """An ``N x (D+1)`` table; the last column is the target."""

    values: np.ndarray
    schema: tuple[FeatureSchema, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "schema", tuple(self.schema))
        if values.ndim != 2:
            raise SchemaError(f"values must be 2-D, got shape {values.shape}")
        n, f = values.shape
        if n < 1 or f < 2:
            raise SchemaError(f"need at least 1 row and 2 columns (D >= 1), got {values.shape}")
        if f != len(self.schema):
            raise SchemaError(f"{f} columns but schema lists {len(self.schema)}")
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        for j, col in enumerate(self.schema):
            if not col.is_categorical:
                continue
            codes = values[:, j]
            codes = codes[~np.isnan(codes)]
            bad = (codes < 0) | (codes >= col.cardinality) | (codes != np.round(codes))
            if bad.any():
                raise SchemaError(f"column {col.name!r}: invalid category code {codes[bad][0]}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        """Number of columns including the target, i.e. ``D + 1``."""
        return self.values.shape[1]

    @property
    def target_index(self) -> int:
        return self.n_features - 1

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.schema])

    def take(self, indices) -> "TableDataset":
        return TableDataset(self.values[np.asarray(indices, dtype=np.int64)], self.schema)

    def with_values(self, values: np.ndarray) -> "TableDataset":
        return TableDataset(values, self.schema)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(schema_to_json(self.schema).encode())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()

    def labels(self) -> list[list[str]]:
        """Rows rendered with raw category labels; missing cells are ``""``."""
        out = []
        for row in self.values:
            rendered = []
            for v, col in zip(row, self.schema):
                if np.isnan(v):
                    rendered.append("")
                elif col.is_categorical:
                    rendered.append(col.category_labels[int(v)])
                else:
                    rendered.append(repr(float(v)))
            out.append(rendered)
        return out


def _parse_float(token: str) -> float | None:
    try:
        x = float(token)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def _sorted_labels(tokens: set[str]) -> tuple[str, ...]:
    if all(_parse_float(t) is not None for t in tokens):
        return tuple(sorted(tokens, key=lambda t: (float(t), t)))
    return tuple(sorted(tokens))


def infer_schema(header: Sequence[str], rows: Sequence[Sequence[str]]) -> tuple[FeatureSchema, ...]:
    """A column is categorical iff it has a non-numeric token or at most 20 distinct values.

    A numeric column whose values never repeat is numerical regardless of size.
    """
    schema = []
    for j, name in enumerate(header):
        observed = [r[j] for r in rows if r[j] != ""]
        tokens = set(observed)
        numeric = all(_parse_float(t) is not None for t in tokens)
        n_distinct = len({float(t) for t in tokens}) if numeric else len(tokens)
        if not tokens:
            schema.append(FeatureSchema(name, NUMERICAL))
        elif not numeric or (n_distinct <= CATEGORICAL_MAX_DISTINCT and n_distinct < len(observed)):
            if numeric:
                # "1" and "1.0" name the same category
                canon = {}
                for t in tokens:
                    canon.setdefault(float(t), t)
                tokens = set(canon.values())
            schema.append(FeatureSchema(name, CATEGORICAL, _sorted_labels(tokens)))
        else:
            schema.append(FeatureSchema(name, NUMERICAL))
    return tuple(schema)


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        except csv.Error as exc:
            raise ParseError(f"{path}: row 1: {exc}") from None
        header = [h.strip() for h in header]
        if not any(header):
            raise ParseError(f"{path}: row 1: empty header")
        rows = []
        try:
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"{path}: row {line_no}: expected {len(header)} fields, found {len(row)}"
                    )
                rows.append([c.strip() for c in row])
        except csv.Error as exc:
            raise ParseError(f"{path}: row {reader.line_num}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return header, rows


def load_csv(
    path: str | os.PathLike,
    schema_path: str | os.PathLike | None = None,
    schema: Sequence[FeatureSchema] | None = None,
) -> TableDataset:
    """Read a CSV (header mandatory, empty cell = missing) into a coded table.

    The schema comes from ``schema`` or ``schema_path`` when given and is
    inferred from the cells otherwise.
    """
    header, rows = _read_rows(path)
    if schema_path is not None:
        schema = load_schema(schema_path)
    if schema is not None:
        if [c.name for c in schema] != header:
            raise SchemaError(f"{path}: header {header} does not match schema columns")
    else:
        schema = infer_schema(header, rows)
    return rows_to_dataset(rows, schema, source=str(path))


def rows_to_dataset(rows: Sequence[Sequence[str]], schema: Sequence[FeatureSchema], source: str = "<rows>") -> TableDataset:
    values = np.full((len(rows), len(schema)), np.nan)
    for i, row in enumerate(rows):
        for j, (token, col) in enumerate(zip(row, schema)):
            if token == "":
                continue
            if col.is_categorical:
                if token in col.category_labels:
                    values[i, j] = col.category_labels.index(token)
                    continue
                x = _parse_float(token)
                matches = [k for k, lab in enumerate(col.category_labels) if x is not None and _parse_float(lab) == x]
                if not matches:
                    raise SchemaError(f"{source}: row {i + 2}, column {col.name!r}: unknown category {token!r}")
                values[i, j] = matches[0]
            else:
                x = _parse_float(token)
                if x is None:
                    raise SchemaError(f"{source}: row {i + 2}, column {col.name!r}: non-numeric value {token!r}")
                values[i, j] = x
    return TableDataset(values, tuple(schema))


def save_csv(ds: TableDataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([c.name for c in ds.schema])
        writer.writerows(ds.labels())


# --------------------------------------------------------------------------- preprocessing


@dataclass(frozen=True, eq=False)
class PreprocessState:
    """Imputation and Z-score statistics fitted on a training split.

    ``mean``/``std`` are ``NaN`` on categorical columns, ``mode`` is ``-1`` on
    numerical columns. The label/code map lives in ``schema``.
    """

    schema: tuple[FeatureSchema, ...]
    mean: np.ndarray
    std: np.ndarray
    mode: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": [c.to_dict() for c in self.schema],
                "mean": [None if np.isnan(x) else float(x) for x in self.mean],
                "std": [None if np.isnan(x) else float(x) for x in self.std],
                "mode": [int(x) for x in self.mode],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PreprocessState":
        obj = json.loads(text)
        nan = float("nan")
        return cls(
            schema=tuple(FeatureSchema.from_dict(c) for c in obj["schema"]),
            mean=np.array([nan if x is None else x for x in obj["mean"]], dtype=np.float64),
            std=np.array([nan if x is None else x for x in obj["std"]], dtype=np.float64),
            mode=np.array(obj["mode"], dtype=np.int64),
        )


def fit_preprocess(ds: TableDataset) -> PreprocessState:
    f = ds.n_features
    mean = np.full(f, np.nan)
    std = np.full(f, np.nan)
    mode = np.full(f, -1, dtype=np.int64)
    for j, col in enumerate(ds.schema):
        column = ds.values[:, j]
        present = column[~np.isnan(column)]
        if present.size == 0:
            raise PreprocessError(f"column {col.name!r} has no observed values")
        if col.is_categorical:
            mode[j] = int(np.argmax(np.bincount(present.astype(np.int64), minlength=col.cardinality)))
        else:
            mu = present.mean()
            mean[j] = mu
            std[j] = math.sqrt(np.mean((present - mu) ** 2) + STD_EPS)
    return PreprocessState(ds.schema, mean, std, mode)


def _check_compatible(ds: TableDataset, state: PreprocessState) -> None:
    if schema_signature(ds.schema) != schema_signature(state.schema):
        raise SchemaError("dataset schema does not match the fitted preprocessing state")


def impute(ds: TableDataset, state: PreprocessState) -> TableDataset:
    _check_compatible(ds, state)
    values = ds.values.copy()
    fill = np.where(np.isnan(state.mean), state.mode.astype(np.float64), state.mean)
    missing = np.isnan(values)
    values[missing] = np.broadcast_to(fill, values.shape)[missing]
    return ds.with_values(values)


def transform(ds: TableDataset, state: PreprocessState) -> TableDataset:
    """Impute, then Z-score numerical columns; categorical codes pass through."""
    values = impute(ds, state).values.copy()
    num = ~np.isnan(state.mean)
    values[:, num] = (values[:, num] - state.mean[num]) / state.std[num]
    return ds.with_values(values)


def inverse_transform(ds: TableDataset, state: PreprocessState) -> TableDataset:
    _check_compatible(ds, state)
    values = ds.values.copy()
    num = ~np.isnan(state.mean)
    values[:, num] = values[:, num] * state.std[num] + state.mean[num]
    for j, col in enumerate(state.schema):
        if not col.is_categorical:
            continue
        codes = values[:, j]
        bad = (codes < 0) | (codes >= col.cardinality) | (codes != np.round(codes))
        if np.any(bad):
            raise DecodeError(f"column {col.name!r}: code {codes[bad][0]} outside [0, {col.cardinality})")
    return TableDataset(values, state.schema)


# --------------------------------------------------------------------------- splitting

SPLIT_NAMES = ("train", "val", "test", "holdout")


@dataclass(frozen=True)
class SplitRepeat:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    holdout: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}


@dataclass(frozen=True)
class SplitPlan:
    repeats: tuple[SplitRepeat, ...]
    seed: int
    n_repeats: int
    n_rows: int
    stratified: bool = False
    warning: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "n_repeats": self.n_repeats,
                "n_rows": self.n_rows,
                "stratified": self.stratified,
                "warning": self.warning,
                "repeats": [{k: v.tolist() for k, v in r.as_dict().items()} for r in self.repeats],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        obj = json.loads(text)
        repeats = tuple(
            SplitRepeat(**{k: np.array(r[k], dtype=np.int64) for k in SPLIT_NAMES}) for r in obj["repeats"]
        )
        return cls(repeats, obj["seed"], obj["n_repeats"], obj["n_rows"], obj["stratified"], obj["warning"])

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitPlan":
        return cls.from_json(Path(path).read_text())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int) -> tuple[int, int, int, int]:
    """(train, val, test, holdout) sizes: 40/30/30 then 75/25 of the development part."""
    dev = _round_half_up(0.4 * n)
    test = _round_half_up(0.3 * n)
    holdout = n - dev - test
    train = _round_half_up(0.75 * dev)
    return train, dev - train, test, holdout


def _stratified_counts(class_sizes: np.ndarray, split_totals: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Integer class x split counts matching both margins, each within 1 of proportional.

    Floors of the proportional table are topped up by a max-flow over the
    fractional cells; a feasible rounding always exists for integral margins.
    """
    n = class_sizes.sum()
    expected = np.outer(class_sizes, split_totals) / n
    base = np.floor(expected + 1e-9).astype(np.int64)
    frac = (expected - base) > 1e-9
    row_need = class_sizes - base.sum(axis=1)
    col_need = np.asarray(split_totals) - base.sum(axis=0)
    n_cls, n_split = expected.shape
    # nodes: source, classes (shuffled to vary who gets the extra unit), splits, sink
    order = rng.permutation(n_cls)
    src, sink = 0, 1 + n_cls + n_split
    size = sink + 1
    cap = np.zeros((size, size), dtype=np.int32)
    for pos, c in enumerate(order):
        cap[src, 1 + pos] = row_need[c]
        for s in range(n_split):
            if frac[c, s]:
                cap[1 + pos, 1 + n_cls + s] = 1
    for s in range(n_split):
        cap[1 + n_cls + s, sink] = col_need[s]
    flow = maximum_flow(csr_matrix(cap), src, sink).flow.toarray()
    counts = base.copy()
    for pos, c in enumerate(order):
        for s in range(n_split):
            counts[c, s] += max(int(flow[1 + pos, 1 + n_cls + s]), 0)
    if not (np.array_equal(counts.sum(axis=1), class_sizes) and np.array_equal(counts.sum(axis=0), split_totals)):
        raise SplitError("stratified allocation failed to match split sizes")
    return counts


def make_splits(ds: TableDataset, n_repeats: int = 10, seed: int = 0, stratify: bool = True) -> SplitPlan:
    """Repeated-shuffle train/val/test/holdout splits (30/10/30/30)."""
    n = ds.n_rows
    if n_repeats < 1:
        raise SplitError("n_repeats must be positive")
    if n < 10:
        raise SplitError(f"need at least 10 rows to populate four splits, got {n}")
    sizes = split_sizes(n)
    if min(sizes) < 1:
        raise SplitError(f"{n} rows cannot populate all four splits: {sizes}")

    warning = None
    target = ds.values[:, ds.target_index]
    if stratify:
        if not ds.schema[ds.target_index].is_categorical:
            stratify, warning = False, "target is numerical; stratification skipped"
        elif np.isnan(target).any():
            stratify, warning = False, "target has missing values; stratification skipped"
        else:
            counts = np.bincount(target.astype(np.int64))
            if counts[counts > 0].min() < n_repeats:
                stratify, warning = False, "a class has fewer members than n_repeats; stratification skipped"

    rng = np.random.default_rng(seed)
    repeats = []
    for _ in range(n_repeats):
        if stratify:
            classes = np.unique(target.astype(np.int64))
            members = [rng.permutation(np.flatnonzero(target == c)) for c in classes]
            counts = _stratified_counts(np.array([len(m) for m in members]), sizes, rng)
            parts = [[] for _ in SPLIT_NAMES]
            for rows, row_counts in zip(members, counts):
                bounds = np.cumsum(row_counts)[:-1]
                for s, chunk in enumerate(np.split(rows, bounds)):
                    parts[s].append(chunk)
            parts = [rng.permutation(np.concatenate(p)) for p in parts]
        else:
            perm = rng.permutation(n)
            parts = np.split(perm, np.cumsum(sizes)[:-1])
        repeats.append(SplitRepeat(*(np.sort(p).astype(np.int64) for p in parts)))
    return SplitPlan(tuple(repeats), seed, n_repeats, n, stratify, warning)
