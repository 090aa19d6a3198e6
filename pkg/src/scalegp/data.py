"""Dataset container, CSV ingestion, normalization, splits and toy data.

Normalization follows the usual protocol: statistics are estimated on the
training rows only (sample std, ddof=1) and the same statistics are applied
to test inputs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DimensionError


@dataclass(frozen=True)
class NormStats:
    """Per-column statistics used to standardize a dataset."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    kept_columns: np.ndarray  # indices of the original columns that survived
    n_columns: int            # original feature count before dropping

    def apply_x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_columns:
            raise DimensionError(
                f"expected {self.n_columns} feature column(s), got {X.shape[1]}")
        return (X[:, self.kept_columns] - self.x_mean) / self.x_std

    def apply_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def undo_y_mean(self, mu):
        return np.asarray(mu) * self.y_std + self.y_mean

    def undo_y_var(self, var):
        return np.asarray(var) * self.y_std**2


@dataclass(frozen=True)
class Dataset:
    """Input matrix X (n x d), target vector y (n,), optional normalization
    statistics, and (for generated toys) the noiseless targets."""

    X: np.ndarray
    y: np.ndarray
    norm_stats: Optional[NormStats] = None
    latent_y: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DimensionError(f"dataset needs n >= 1 and d >= 1, got X shape {X.shape}")
        if X.shape[0] != y.size:
            raise DimensionError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def load_csv(path, target_column) -> Dataset:
    """Load a numeric CSV with a header row; the named column becomes y and
    the remaining columns become X, preserving row order."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        if target_column not in header:
            raise ConfigError(
                f"{path}: target column {target_column!r} not found "
                f"(columns: {', '.join(header)})"
            )
        t_idx = header.index(target_column)
        rows = []
        for r, row in enumerate(reader, start=2):  # 1-based, header is line 1
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}: row {r} has {len(row)} cells, expected {len(header)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                for c, cell in enumerate(row):
                    try:
                        float(cell)
                    except ValueError:
                        raise ConfigError(
                            f"{path}: non-numeric cell at row {r}, "
                            f"column {header[c]!r}: {cell!r}"
                        ) from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least 2 data rows, found {len(rows)}")
    data = np.array(rows, dtype=float)
    y = data[:, t_idx]
    X = np.delete(data, t_idx, axis=1)
    return Dataset(X, y)


def normalize(data: Dataset) -> Dataset:
    """Standardize each column of X and y to zero mean / unit sample std
    (ddof=1), recording the statistics.  Constant input columns are dropped
    with a warning; a constant target is an error."""
    X, y = data.X, data.y
    x_std_all = X.std(axis=0, ddof=1) if data.n > 1 else np.zeros(data.d)
    kept = np.flatnonzero(x_std_all > 0)
    if kept.size < data.d:
        dropped = sorted(set(range(data.d)) - set(kept.tolist()))
        warnings.warn(f"dropping zero-variance input column(s) {dropped}")
    if kept.size == 0:
        raise ConfigError("all input columns have zero variance")
    y_std = y.std(ddof=1) if data.n > 1 else 0.0
    if y_std <= 0:
        raise ConfigError("target has zero variance; cannot normalize")
    stats = NormStats(
        x_mean=X[:, kept].mean(axis=0),
        x_std=x_std_all[kept],
        y_mean=float(y.mean()),
        y_std=float(y_std),
        kept_columns=kept,
        n_columns=data.d,
    )
    out = Dataset(stats.apply_x(X), stats.apply_y(y), norm_stats=stats,
                  latent_y=None if data.latent_y is None else stats.apply_y(data.latent_y))
    assert np.all(np.abs(out.X.mean(axis=0)) < 1e-8)
    assert np.all(np.abs(out.X.std(axis=0, ddof=1) - 1) < 1e-8)
    return out


def apply_normalization(data: Dataset, stats: NormStats) -> Dataset:
    """Transform a dataset (typically the test set) with training statistics."""
    return Dataset(stats.apply_x(data.X), stats.apply_y(data.y), norm_stats=stats,
                   latent_y=None if data.latent_y is None else stats.apply_y(data.latent_y))


def split(data: Dataset, test_fraction, seed) -> tuple:
    """Deterministic disjoint train/test split of the rows."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(data.n * test_fraction))
    if n_test < 1 or data.n - n_test < 1:
        raise ConfigError(
            f"split of {data.n} rows at fraction {test_fraction} leaves an empty side"
        )
    order = np.random.default_rng(seed).permutation(data.n)
    te, tr = order[:n_test], order[n_test:]

    def take(idx):
        return Dataset(data.X[idx], data.y[idx],
                       latent_y=None if data.latent_y is None else data.latent_y[idx])

    return take(tr), take(te)


def generate_sinc(n_train=120, n_test=300, train_range=(-4.0, 4.0),
                  test_range=(-7.0, 7.0), noise_var=0.04, seed=0) -> tuple:
    """Noisy sinc toy: y = sinc(x) + eps with eps ~ N(0, noise_var).

    Training inputs are uniform on ``train_range``; test inputs are equally
    spaced on ``test_range``.  Both datasets keep the noiseless targets in
    ``latent_y``.
    """
    lo, hi = float(train_range[0]), float(train_range[1])
    tlo, thi = float(test_range[0]), float(test_range[1])
    if not (lo < hi and tlo < thi):
        raise ConfigError("ranges must be ordered (low, high)")
    if noise_var < 0:
        raise ConfigError("noise_var must be >= 0")
    rng = np.random.default_rng(seed)
    x_tr = rng.uniform(lo, hi, size=n_train)
    f_tr = np.sinc(x_tr)
    y_tr = f_tr + rng.normal(0.0, np.sqrt(noise_var), size=n_train)
    x_te = np.linspace(tlo, thi, n_test)
    f_te = np.sinc(x_te)
    y_te = f_te + rng.normal(0.0, np.sqrt(noise_var), size=n_test)
    train = Dataset(x_tr[:, None], y_tr, latent_y=f_tr)
    test = Dataset(x_te[:, None], y_te, latent_y=f_te)
    return train, test
