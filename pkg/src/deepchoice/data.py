"""Choice data sets: wide-CSV ingestion, standardisation, splits and batches."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_FORMAT = "deepchoice-schema"
SCHEMA_VERSION = 1
MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


class DataError(ValueError):
    pass


@dataclass
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    q_mean: np.ndarray
    q_scale: np.ndarray


@dataclass
class ChoiceDataset:
    """``x`` (N, J, Kx) attributes, ``q`` (N, Kq) characteristics, ``y`` (N,) choices."""

    x: np.ndarray
    q: np.ndarray
    y: np.ndarray
    alternatives: list = field(default_factory=list)
    attributes: list = field(default_factory=list)
    characteristics: list = field(default_factory=list)
    attribute_units: list = field(default_factory=list)
    binary_characteristics: list = field(default_factory=list)
    stats: Standardization | None = None
    dropped: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        n, J, Kx = self.x.shape
        if self.q.ndim != 2 or self.q.shape[0] != n or self.y.shape != (n,):
            raise DataError(f"inconsistent shapes x={self.x.shape} q={self.q.shape} y={self.y.shape}")
        if n and (self.y.min() < 0 or self.y.max() >= J):
            raise DataError("choice index out of range")
        if not self.alternatives:
            self.alternatives = [f"alt{j + 1}" for j in range(J)]
        if not self.attributes:
            self.attributes = [f"x{k + 1}" for k in range(Kx)]
        if not self.characteristics:
            self.characteristics = [f"q{k + 1}" for k in range(self.q.shape[1])]
        if not self.attribute_units:
            self.attribute_units = [""] * Kx
        if not self.binary_characteristics:
            self.binary_characteristics = [_is_binary(self.q[:, k]) for k in range(self.q.shape[1])]

    def __len__(self):
        return len(self.y)

    @property
    def n_alternatives(self):
        return self.x.shape[1]

    @property
    def n_attributes(self):
        return self.x.shape[2]

    @property
    def n_characteristics(self):
        return self.q.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], q=self.q[idx], y=self.y[idx], dropped=0)

    def attribute_scale(self):
        """Raw-unit scale per attribute (1 when the data are unstandardised)."""
        if self.stats is None:
            return np.ones(self.n_attributes)
        return self.stats.x_scale.copy()


def _is_binary(col):
    return bool(np.all((col == 0) | (col == 1)))


def load_schema(path_or_dict):
    if isinstance(path_or_dict, dict):
        schema = path_or_dict
    else:
        with open(path_or_dict, encoding="utf-8") as fh:
            schema = json.load(fh)
    if schema.get("format") != SCHEMA_FORMAT:
        raise DataError("not a deepchoice schema file")
    if schema.get("version") != SCHEMA_VERSION:
        raise DataError(f"unsupported schema version {schema.get('version')}")
    J = len(schema["alternatives"])
    for attr in schema["attributes"]:
        if len(attr["columns"]) != J:
            raise DataError(f"attribute {attr['name']!r} needs one column per alternative ({J})")
    if len(schema["choice"]["codes"]) != J:
        raise DataError("choice codes must list one code per alternative")
    return schema


def swiss_schema():
    """Schema for the public Swiss train route-choice data (wide layout)."""
    text = resources.files("deepchoice").joinpath("schemas/swiss_route_choice.json").read_text()
    return load_schema(json.loads(text))


def _parse(token, row_no, column):
    token = token.strip()
    if token.lower() in MISSING_TOKENS:
        return None
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"row {row_no}, column {column!r}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value):
        return None
    return value


def load_wide_csv(path, schema):
    """Read a wide CSV (one row per choice situation) into a :class:`ChoiceDataset`.

    Rows with a missing required cell are dropped; the count is stored in
    ``dataset.dropped``.  Numbers are parsed locale-independently.
    """
    schema = load_schema(schema)
    attr_cols = [a["columns"] for a in schema["attributes"]]
    char_cols = [c["column"] for c in schema["characteristics"]]
    choice_col = schema["choice"]["column"]
    codes = {float(c): j for j, c in enumerate(schema["choice"]["codes"])}
    required = [c for cols in attr_cols for c in cols] + char_cols + [choice_col]

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        index = {h: i for i, h in enumerate(header)}
        unknown = [c for c in required if c not in index]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}")
        J, Kx, Kq = len(schema["alternatives"]), len(attr_cols), len(char_cols)
        xs, qs, ys = [], [], []
        dropped = 0
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            vals = {c: _parse(row[index[c]] if index[c] < len(row) else "", row_no, c) for c in required}
            if any(v is None for v in vals.values()):
                dropped += 1
                continue
            code = vals[choice_col]
            if code not in codes:
                raise DataError(f"row {row_no}: choice code {code!r} not among {list(codes)}")
            xs.append([[vals[attr_cols[k][j]] for k in range(Kx)] for j in range(J)])
            qs.append([vals[c] for c in char_cols])
            ys.append(codes[code])
    if dropped:
        log.info("%s: dropped %d row(s) with missing values", path, dropped)
    n = len(ys)
    return ChoiceDataset(
        x=np.asarray(xs, dtype=np.float64).reshape(n, J, Kx),
        q=np.asarray(qs, dtype=np.float64).reshape(n, Kq),
        y=np.asarray(ys, dtype=np.int64),
        alternatives=list(schema["alternatives"]),
        attributes=[a["name"] for a in schema["attributes"]],
        characteristics=[c["name"] for c in schema["characteristics"]],
        attribute_units=[a.get("unit", "") for a in schema["attributes"]],
        binary_characteristics=[bool(c.get("binary", False)) for c in schema["characteristics"]],
        dropped=dropped,
    )


def default_schema(dataset):
    """A schema with generated column names, used for synthetic data files."""
    J = dataset.n_alternatives
    return {
        "format": SCHEMA_FORMAT,
        "version": SCHEMA_VERSION,
        "alternatives": list(dataset.alternatives),
        "attributes": [
            {"name": a, "unit": u, "columns": [f"{a}_{j + 1}" for j in range(J)]}
            for a, u in zip(dataset.attributes, dataset.attribute_units)
        ],
        "characteristics": [
            {"name": c, "column": c, "binary": b}
            for c, b in zip(dataset.characteristics, dataset.binary_characteristics)
        ],
        "choice": {"column": "choice", "codes": list(range(1, J + 1))},
    }


def write_wide_csv(dataset, path, schema=None):
    """Write ``dataset`` in the wide layout ``load_wide_csv`` reads back exactly."""
    schema = load_schema(schema if schema is not None else default_schema(dataset))
    attr_cols = [a["columns"] for a in schema["attributes"]]
    char_cols = [c["column"] for c in schema["characteristics"]]
    codes = schema["choice"]["codes"]
    header = [c for cols in attr_cols for c in cols] + char_cols + [schema["choice"]["column"]]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(dataset.x[i, j, k])) for k, cols in enumerate(attr_cols) for j in range(len(cols))]
            row += [repr(float(v)) for v in dataset.q[i]]
            row.append(codes[int(dataset.y[i])])
            w.writerow(row)
    return schema


def fit_standardization(train):
    """Per-attribute statistics pooled over alternatives; binary characteristics are left alone."""
    x = train.x.reshape(-1, train.n_attributes)
    x_mean = x.mean(axis=0)
    x_scale = x.std(axis=0)
    binary_x = np.array([_is_binary(x[:, k]) for k in range(x.shape[1])])
    if np.any((x_scale == 0) & ~binary_x):
        bad = [train.attributes[k] for k in np.flatnonzero((x_scale == 0) & ~binary_x)]
        raise DataError(f"zero-variance attribute(s): {bad}")
    x_mean = np.where(binary_x, 0.0, x_mean)
    x_scale = np.where(binary_x, 1.0, x_scale)

    q_mean = train.q.mean(axis=0)
    q_scale = train.q.std(axis=0)
    binary_q = np.asarray(train.binary_characteristics, dtype=bool)
    if np.any((q_scale == 0) & ~binary_q):
        bad = [train.characteristics[k] for k in np.flatnonzero((q_scale == 0) & ~binary_q)]
        raise DataError(f"zero-variance characteristic(s): {bad}")
    q_mean = np.where(binary_q, 0.0, q_mean)
    q_scale = np.where(binary_q, 1.0, q_scale)
    return Standardization(x_mean, x_scale, q_mean, q_scale)


def standardize(dataset, stats=None):
    """Return a standardised copy; ``stats`` should come from the training split."""
    if dataset.stats is not None:
        raise DataError("dataset is already standardised")
    stats = fit_standardization(dataset) if stats is None else stats
    return replace(
        dataset,
        x=(dataset.x - stats.x_mean) / stats.x_scale,
        q=(dataset.q - stats.q_mean) / stats.q_scale,
        stats=stats,
    )


def destandardize(dataset):
    if dataset.stats is None:
        return dataset
    s = dataset.stats
    return replace(dataset, x=dataset.x * s.x_scale + s.x_mean, q=dataset.q * s.q_scale + s.q_mean, stats=None)


def split(dataset, holdout_fraction, seed):
    """Stratified train/test split; returns ``(train, test)`` datasets.

    The test size is ``round(holdout_fraction * N)``, allocated across classes
    by largest remainder so class shares are preserved.
    """
    train_idx, test_idx = split_indices(dataset.y, holdout_fraction, seed)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def split_indices(y, holdout_fraction, seed):
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError(f"holdout fraction must lie in (0, 1), got {holdout_fraction}")
    y = np.asarray(y)
    n = len(y)
    n_test = int(round(holdout_fraction * n))
    if n_test == 0 or n_test == n:
        raise DataError(f"holdout fraction {holdout_fraction} leaves an empty split for N={n}")
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    members = [rng.permutation(np.flatnonzero(y == c)) for c in classes]
    quota = np.array([holdout_fraction * len(m) for m in members])
    take = np.floor(quota).astype(int)
    order = np.argsort(-(quota - take), kind="stable")
    for c in order[: n_test - take.sum()]:
        take[c] += 1
    test = np.sort(np.concatenate([m[:t] for m, t in zip(members, take)]))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def minibatches(n, batch_size, epoch_seed):
    """Shuffled index batches over ``range(n)``; a trailing batch smaller than 2 is dropped."""
    if batch_size < 2:
        raise DataError("batch_size must be at least 2 (batch normalisation)")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches
