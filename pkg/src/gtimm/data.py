"""Dataset container, CSV ingestion, standardization, and simulation generators.

A :class:`Dataset` bundles the response ``y``, the fixed-effect design ``X``
(leading column is the intercept), and the random-effect design ``Z``.  For
grouped data ``Z`` is the one-hot encoding of a group label re-indexed to
``{1..q}``.  All arrays are frozen after construction so datasets can be
shared read-only across threads.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError, SchemaError

# Region-wise fixed-effect coefficients of the four-cluster generator:
# rows are regions 1..4, columns (intercept, x1, x2).
REGION_COEFFS = np.array(
    [
        [2.0, 1.5, 0.5],
        [-1.0, 2.5, -0.5],
        [1.0, -2.0, 1.0],
        [-2.0, -1.5, -1.0],
    ]
)
REGION_COEFFS.setflags(write=False)

# Cluster centers for (x1, x2); region m is drawn around row m-1.
REGION_CENTERS = np.array([[5.0, 5.0], [-5.0, 5.0], [-5.0, -5.0], [5.0, -5.0]])
REGION_CENTERS.setflags(write=False)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable (y, X, Z) triple with optional group labels.

    Invariants enforced at construction: at least one row, no non-finite
    entries, an all-ones leading column of ``X``, and, when ``group_label``
    is present, an exactly one-hot ``Z`` consistent with the labels.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    group_label: np.ndarray | None = None
    group_names: tuple[str, ...] | None = None

    def __post_init__(self):
        y = _frozen(np.asarray(self.y, dtype=float))
        X = _frozen(np.asarray(self.X, dtype=float))
        Z = _frozen(np.asarray(self.Z, dtype=float))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if y.ndim != 1 or X.ndim != 2 or Z.ndim != 2:
            raise DataError("y must be a vector; X and Z must be matrices")
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one observation")
        if X.shape[0] != n or Z.shape[0] != n:
            raise DataError(
                f"row mismatch: y has {n}, X has {X.shape[0]}, Z has {Z.shape[0]}"
            )
        if Z.shape[1] < 1:
            raise DataError("Z must have at least one column")
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite entries in {name}")
        if not np.all(X[:, 0] == 1.0):
            raise DataError("X column 0 must be identically 1 (intercept)")
        if self.group_label is not None:
            lab = _frozen(np.asarray(self.group_label, dtype=int))
            object.__setattr__(self, "group_label", lab)
            if lab.shape != (n,):
                raise DataError("group_label length must match y")
            if lab.min() < 1 or lab.max() > Z.shape[1]:
                raise DataError("group labels must lie in {1..q}")
            rows = np.arange(n)
            onehot = np.zeros_like(Z)
            onehot[rows, lab - 1] = 1.0
            if not np.array_equal(Z, onehot):
                raise DataError("Z must be the one-hot encoding of group_label")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        """Row subset as a new Dataset (q is preserved; groups may empty out)."""
        lab = None if self.group_label is None else self.group_label[idx]
        return Dataset(self.y[idx], self.X[idx], self.Z[idx], lab, self.group_names)


@dataclass(frozen=True)
class SimTruth:
    """Generating quantities of a simulated dataset."""

    beta_star_true: np.ndarray  # (p, M), column m-1 holds region m's coefficients
    b_true: np.ndarray  # (q,)
    region_true: np.ndarray  # (N,) in {1..M}
    sigma_b2: float
    sigma_eps2: float

    def __post_init__(self):
        object.__setattr__(self, "beta_star_true", _frozen(np.asarray(self.beta_star_true, dtype=float)))
        object.__setattr__(self, "b_true", _frozen(np.asarray(self.b_true, dtype=float)))
        object.__setattr__(self, "region_true", _frozen(np.asarray(self.region_true, dtype=int)))
        if self.sigma_b2 < 0:
            raise DataError("sigma_b2 must be >= 0")
        if self.sigma_eps2 <= 0:
            raise DataError("sigma_eps2 must be > 0")
        m = self.beta_star_true.shape[1]
        if self.region_true.min() < 1 or self.region_true.max() > m:
            raise DataError("region_true must lie in {1..M}")


@dataclass(frozen=True)
class StandardizationParams:
    """Per-column location/scale of the non-intercept X columns and of y."""

    x_mean: np.ndarray  # (p-1,)
    x_sd: np.ndarray  # (p-1,)
    y_mean: float
    y_sd: float

    def __post_init__(self):
        object.__setattr__(self, "x_mean", _frozen(np.asarray(self.x_mean, dtype=float)))
        object.__setattr__(self, "x_sd", _frozen(np.asarray(self.x_sd, dtype=float)))
        if np.any(self.x_sd <= 0) or self.y_sd <= 0:
            raise DataError("all stored standard deviations must be > 0")


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`: one response column plus either a
    group column (one-hot expanded) or explicit random-effect columns."""

    y_col: str
    x_cols: tuple[str, ...]
    group_col: str | None = None
    z_cols: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        if self.z_cols is not None:
            object.__setattr__(self, "z_cols", tuple(self.z_cols))
        if len(self.x_cols) < 1:
            raise SchemaError("schema needs at least one predictor column")
        if (self.group_col is None) == (self.z_cols is None):
            raise SchemaError("schema needs exactly one of group_col or z_cols")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Read a headered CSV into (header, rows of raw strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    return header, rows


def _parse_cell(raw: str, row: int, col: str) -> float:
    raw = raw.strip()
    if raw == "":
        raise ParseError(f"row {row}, column '{col}': missing value")
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"row {row}, column '{col}': not a number: {raw!r}") from None
    if not np.isfinite(value):
        raise ParseError(f"row {row}, column '{col}': non-finite value {raw!r}")
    return value


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Load a headered CSV into a validated Dataset.

    Numeric columns are parsed strictly (missing or non-finite cells raise
    :class:`ParseError` naming the 1-based data row).  A group column is
    densely re-indexed to ``{1..q}`` in order of first appearance and one-hot
    expanded into ``Z``; the original labels are kept in ``group_names``.
    """
    header, rows = read_table(path)
    pos = {name: i for i, name in enumerate(header)}
    needed = [schema.y_col, *schema.x_cols]
    if schema.group_col is not None:
        needed.append(schema.group_col)
    else:
        needed.extend(schema.z_cols)
    for name in needed:
        if name not in pos:
            raise SchemaError(f"column '{name}' not found; file has {header}")
    if not rows:
        raise DataError(f"{path}: no data rows")

    n = len(rows)
    y = np.empty(n)
    X = np.ones((n, 1 + len(schema.x_cols)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"row {i + 1}: expected {len(header)} cells, got {len(row)}")
        y[i] = _parse_cell(row[pos[schema.y_col]], i + 1, schema.y_col)
        for j, name in enumerate(schema.x_cols):
            X[i, 1 + j] = _parse_cell(row[pos[name]], i + 1, name)

    if schema.group_col is not None:
        raw_labels = [row[pos[schema.group_col]].strip() for row in rows]
        names: list[str] = []
        index: dict[str, int] = {}
        for lab in raw_labels:
            if lab not in index:
                index[lab] = len(names)
                names.append(lab)
        if len(names) < 2:
            raise DataError(
                f"group column '{schema.group_col}' has {len(names)} distinct "
                "value(s); at least 2 are required"
            )
        labels = np.array([index[lab] + 1 for lab in raw_labels])
        Z = np.zeros((n, len(names)))
        Z[np.arange(n), labels - 1] = 1.0
        return Dataset(y, X, Z, labels, tuple(names))

    Z = np.empty((n, len(schema.z_cols)))
    for i, row in enumerate(rows):
        for j, name in enumerate(schema.z_cols):
            Z[i, j] = _parse_cell(row[pos[name]], i + 1, name)
    return Dataset(y, X, Z)


def write_csv(path, d: Dataset, schema: CsvSchema | None = None) -> None:
    """Write a Dataset back to CSV so that :func:`load_csv` round-trips it.

    Floats are written with ``repr`` (shortest exact form), so a reload
    reproduces the arrays bitwise.
    """
    if schema is None:
        x_cols = tuple(f"x{j}" for j in range(1, d.p))
        schema = CsvSchema("y", x_cols, group_col="group" if d.group_label is not None else None,
                           z_cols=None if d.group_label is not None else tuple(f"z{j}" for j in range(1, d.q + 1)))
    header = [schema.y_col, *schema.x_cols]
    if schema.group_col is not None:
        if d.group_label is None:
            raise DataError("dataset has no group labels to write")
        header.append(schema.group_col)
    else:
        header.extend(schema.z_cols)
    names = d.group_names or tuple(str(g) for g in range(1, d.q + 1))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            row = [repr(float(d.y[i]))] + [repr(float(v)) for v in d.X[i, 1:]]
            if schema.group_col is not None:
                row.append(names[d.group_label[i] - 1])
            else:
                row.extend(repr(float(v)) for v in d.Z[i])
            writer.writerow(row)


def standardize(d: Dataset) -> tuple[Dataset, StandardizationParams]:
    """Center and scale y and the non-intercept X columns to mean 0, sd 1.

    Uses the N-1 denominator.  The intercept column and Z are untouched.
    Raises :class:`DataError` naming any zero-variance column.
    """
    if d.n < 2:
        raise DataError("standardization needs at least 2 observations")
    x_mean = d.X[:, 1:].mean(axis=0)
    x_sd = d.X[:, 1:].std(axis=0, ddof=1)
    for j, s in enumerate(x_sd):
        if s <= 0:
            raise DataError(f"X column {j + 1} has zero variance; cannot standardize")
    y_sd = float(d.y.std(ddof=1))
    if y_sd <= 0:
        raise DataError("y has zero variance; cannot standardize")
    y_mean = float(d.y.mean())
    X = d.X.copy()
    X[:, 1:] = (X[:, 1:] - x_mean) / x_sd
    y = (d.y - y_mean) / y_sd
    params = StandardizationParams(x_mean, x_sd, y_mean, y_sd)
    return Dataset(y, X, d.Z, d.group_label, d.group_names), params


def destandardize(d: Dataset, params: StandardizationParams) -> Dataset:
    """Invert :func:`standardize` exactly (up to float rounding)."""
    X = d.X.copy()
    X[:, 1:] = X[:, 1:] * params.x_sd + params.x_mean
    y = d.y * params.y_sd + params.y_mean
    return Dataset(y, X, d.Z, d.group_label, d.group_names)


def destandardize_y(values: np.ndarray, params: StandardizationParams) -> np.ndarray:
    """Map standardized-scale responses or predictions back to the raw scale."""
    return np.asarray(values) * params.y_sd + params.y_mean


def regional_mean(x1: float, x2: float, region: int) -> float:
    """Region-wise linear mean of the four-cluster generator."""
    if not 1 <= region <= 4:
        raise ValueError(f"region must be in 1..4, got {region}")
    c = REGION_COEFFS[region - 1]
    return float(c[0] + c[1] * x1 + c[2] * x2)


def simulate_gtimm(
    n_total: int,
    seed,
    sigma_b2: float = 2.0,
    sigma_eps2: float = 1.0,
    n_groups: int = 10,
    beta_star: np.ndarray | None = None,
) -> tuple[Dataset, SimTruth]:
    """Four-cluster simulation: (x1, x2) normal around (+-5, +-5) with unit sd,
    a region-dependent linear mean, a shared group random effect, and
    Gaussian noise.

    ``sigma_b2`` and ``sigma_eps2`` are variances.  Each observation is
    assigned uniformly to one of ``n_groups`` groups, independently of its
    region.  ``beta_star`` (p x 4) overrides the default region coefficients;
    passing four identical columns yields the common-coefficient design used
    by the MSPE-gap experiment.
    """
    if n_total % 4 != 0:
        raise ValueError(f"n_total must be divisible by 4, got {n_total}")
    if n_total < 4:
        raise ValueError("n_total must be at least 4")
    if sigma_b2 < 0 or sigma_eps2 <= 0:
        raise ValueError("sigma_b2 must be >= 0 and sigma_eps2 > 0")
    coeffs = REGION_COEFFS if beta_star is None else np.asarray(beta_star, dtype=float).T
    if coeffs.shape != (4, 3):
        raise ValueError("beta_star must be 3x4 (intercept, x1, x2 by region)")

    rng = np.random.default_rng(seed)
    per = n_total // 4
    region = np.repeat(np.arange(1, 5), per)
    x = rng.normal(REGION_CENTERS[region - 1], 1.0)
    group = rng.integers(1, n_groups + 1, size=n_total)
    b = rng.normal(0.0, np.sqrt(sigma_b2), size=n_groups)
    eps = rng.normal(0.0, np.sqrt(sigma_eps2), size=n_total)

    X = np.column_stack([np.ones(n_total), x])
    mean = np.sum(X * coeffs[region - 1], axis=1)
    y = mean + b[group - 1] + eps
    Z = np.zeros((n_total, n_groups))
    Z[np.arange(n_total), group - 1] = 1.0

    d = Dataset(y, X, Z, group, tuple(str(g) for g in range(1, n_groups + 1)))
    truth = SimTruth(coeffs.T, b, region, sigma_b2, sigma_eps2)
    return d, truth


def simulate_common_effects(
    n_total: int,
    seed,
    beta=(1.0, 2.0, -1.0),
    sigma_b2: float = 1.0,
    sigma_eps2: float = 1.0,
    n_groups: int = 10,
) -> tuple[Dataset, SimTruth]:
    """Single-plane generator: standard-normal predictors and one coefficient
    vector shared by all observations, plus group effect and noise.

    Used by the MSPE-gap scaling experiment, where a tree-partitioned model
    and a global linear mixed model target the same truth.
    """
    if sigma_b2 < 0 or sigma_eps2 <= 0:
        raise ValueError("sigma_b2 must be >= 0 and sigma_eps2 > 0")
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_total, beta.shape[0] - 1))
    group = rng.integers(1, n_groups + 1, size=n_total)
    b = rng.normal(0.0, np.sqrt(sigma_b2), size=n_groups)
    eps = rng.normal(0.0, np.sqrt(sigma_eps2), size=n_total)
    X = np.column_stack([np.ones(n_total), x])
    y = X @ beta + b[group - 1] + eps
    Z = np.zeros((n_total, n_groups))
    Z[np.arange(n_total), group - 1] = 1.0
    d = Dataset(y, X, Z, group, tuple(str(g) for g in range(1, n_groups + 1)))
    truth = SimTruth(np.tile(beta[:, None], (1, 4)), b, np.ones(n_total, dtype=int),
                     sigma_b2, sigma_eps2)
    return d, truth


def group_stratified_folds(group_label: np.ndarray | None, n: int, folds: int, seed) -> np.ndarray:
    """Fold index per observation; each group is dealt round-robin across folds
    so every fold sees every group when group sizes allow.

    Falls back to unstratified shuffled folds (with a warning) when some group
    has fewer members than folds, or when no labels are given.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    if group_label is not None:
        counts = np.bincount(group_label)
        small = [g for g in np.unique(group_label) if counts[g] < folds]
        if not small:
            fold_of = np.empty(n, dtype=int)
            for g in np.unique(group_label):
                members = rng.permutation(np.where(group_label == g)[0])
                fold_of[members] = np.arange(members.size) % folds
            return fold_of
        warnings.warn(
            f"groups {small} have fewer than {folds} members; using unstratified folds",
            stacklevel=2,
        )
    order = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % folds
    return fold_of


def train_test_split_grouped(d: Dataset, train_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Group-stratified row split; every group must land in the training part."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test = np.zeros(d.n, dtype=bool)
    if d.group_label is not None:
        for g in np.unique(d.group_label):
            members = rng.permutation(np.where(d.group_label == g)[0])
            n_test = int(round((1.0 - train_fraction) * members.size))
            test[members[:n_test]] = True
            if n_test >= members.size:
                raise DataError(
                    f"group {g} would be absent from training at train_fraction={train_fraction}"
                )
    else:
        order = rng.permutation(d.n)
        test[order[: int(round((1.0 - train_fraction) * d.n))]] = True
    if not test.any():
        # keep the test side non-empty so error metrics stay defined even
        # at extreme train fractions; take one row from the largest group
        if d.group_label is not None:
            counts = np.bincount(d.group_label)
            g = int(np.argmax(counts))
            test[np.where(d.group_label == g)[0][-1]] = True
        else:
            test[d.n - 1] = True
    train_idx = np.where(~test)[0]
    test_idx = np.where(test)[0]
    if train_idx.size == 0:
        raise DataError("empty training split")
    return train_idx, test_idx
