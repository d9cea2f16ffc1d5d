"""Ratings ingestion, filtering and splitting; regression standardization;
synthetic generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .matfac import RatingSet

RATINGS_HEADER = ("user_id", "item_id", "rating")


class DataFileError(ValueError):
    """Malformed or inconsistent input file."""


# -- ratings ---------------------------------------------------------------

def load_ratings_csv(path, delimiter=","):
    """Read ``user_id,item_id,rating`` rows into a :class:`RatingSet`.

    Identifiers are mapped to dense indices in first-seen order.
    """
    path = Path(path)
    user_index, item_index = {}, {}
    users, items, ratings = [], [], []
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataFileError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != RATINGS_HEADER:
            raise DataFileError(
                f"{path}: line 1: expected header {','.join(RATINGS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataFileError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            uid, iid, raw = (c.strip() for c in row)
            try:
                value = float(raw)
            except ValueError:
                raise DataFileError(
                    f"{path}: line {lineno}: rating {raw!r} is not a number") from None
            if not np.isfinite(value):
                raise DataFileError(f"{path}: line {lineno}: rating must be finite")
            if (uid, iid) in seen:
                raise DataFileError(
                    f"{path}: line {lineno}: duplicate rating for user {uid!r}, item {iid!r}")
            seen.add((uid, iid))
            users.append(user_index.setdefault(uid, len(user_index)))
            items.append(item_index.setdefault(iid, len(item_index)))
            ratings.append(value)
    return RatingSet(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                     np.array(ratings, dtype=float), len(user_index), len(item_index),
                     tuple(user_index), tuple(item_index))


def write_ratings_csv(data, path):
    uids = data.user_ids or tuple(range(data.n))
    iids = data.item_ids or tuple(range(data.m))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RATINGS_HEADER)
        for u, i, r in data.triples():
            w.writerow([uids[u], iids[i], repr(r)])


def _reindex(data, keep):
    users, items = data.users[keep], data.items[keep]
    u_keep = np.unique(users)
    i_keep = np.unique(items)
    u_map = np.full(data.n, -1)
    u_map[u_keep] = np.arange(u_keep.size)
    i_map = np.full(data.m, -1)
    i_map[i_keep] = np.arange(i_keep.size)
    uids = tuple(data.user_ids[k] for k in u_keep) if data.user_ids else tuple(u_keep.tolist())
    iids = tuple(data.item_ids[k] for k in i_keep) if data.item_ids else tuple(i_keep.tolist())
    return RatingSet(u_map[users], i_map[items], data.ratings[keep],
                     int(u_keep.size), int(i_keep.size), uids, iids)


def dense_subset_filter(data, min_user=55, min_item=24):
    """Drop sparse users and items alternately until both thresholds hold.

    The result is reindexed densely; original identifiers are kept in
    ``user_ids``/``item_ids``.
    """
    if min_user < 0 or min_item < 0:
        raise ValueError("thresholds must be nonnegative")
    keep = np.ones(len(data), dtype=bool)
    while True:
        ucount = np.bincount(data.users[keep], minlength=data.n)
        bad_u = ucount < min_user
        keep_next = keep & ~bad_u[data.users]
        icount = np.bincount(data.items[keep_next], minlength=data.m)
        bad_i = icount < min_item
        keep_next &= ~bad_i[data.items]
        if np.array_equal(keep_next, keep):
            break
        keep = keep_next
    return _reindex(data, keep)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError("fraction must lie in (0, 1)")


def split_half(data, spec=None):
    """Random train/test partition; both parts keep the full index space."""
    spec = spec or SplitSpec()
    rng = np.random.default_rng(spec.seed)
    N = len(data)
    n_train = int(np.floor(spec.fraction * N + 0.5))
    perm = rng.permutation(N)
    mask = np.zeros(N, dtype=bool)
    mask[perm[:n_train]] = True
    return data.subset(mask), data.subset(~mask)


def synth_lowrank_ratings(n, m, K_true, noise_sd, density, seed=0):
    """``r_ui = p_u . q_i + noise`` observed independently with prob ``density``."""
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((n, K_true))
    Q = rng.standard_normal((m, K_true))
    observed = rng.random((n, m)) < density
    users, items = np.nonzero(observed)
    r = np.einsum("ij,ij->i", P[users], Q[items])
    r = r + noise_sd * rng.standard_normal(r.size)
    return RatingSet(users, items, r, n, m)


# -- regression ------------------------------------------------------------

@dataclass(frozen=True)
class RegressionProblem:
    """Response ``y`` and design ``X`` (columns are predictors)."""

    y: np.ndarray
    X: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asfortranarray(np.asarray(self.X, dtype=float))
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("X must be n x d with n = len(y)")
        if self.standardized:
            tol = 1e-10
            if abs(y.sum()) > tol or abs(np.linalg.norm(y) - 1) > tol:
                raise ValueError("y is not standardized")
            if (np.max(np.abs(X.sum(axis=0)), initial=0) > tol
                    or np.max(np.abs(np.linalg.norm(X, axis=0) - 1), initial=0) > tol):
                raise ValueError("X columns are not standardized")
        y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def X_f(self):
        return self.X

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


def _center_scale(v):
    c = v - v.mean(axis=0)
    return c / np.linalg.norm(c, axis=0)


def standardize(y, X, names=None):
    """Center ``y`` and each column, then scale them to unit norm."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if y.size < 2:
        raise ValueError("need at least two observations")
    spread = np.ptp(X, axis=0)
    const = np.flatnonzero(spread == 0)
    if const.size:
        j = int(const[0])
        label = names[j] if names is not None else j
        raise ValueError(f"predictor column {label} is constant")
    if np.ptp(y) == 0:
        raise ValueError("response is constant")
    return RegressionProblem(_center_scale(y), _center_scale(X), standardized=True)


def load_regression_csv(path):
    """Header row; first column is the response, the rest predictors.

    Returns ``(problem, predictor_names)``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise DataFileError(f"{path}: need a header with a response and predictors")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFileError(f"{path}: line {lineno}: expected {len(header)} fields")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataFileError(f"{path}: line {lineno}: non-numeric field") from None
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise DataFileError(f"{path}: need at least two data rows")
    names = [h.strip() for h in header[1:]]
    return standardize(arr[:, 0], arr[:, 1:], names), names
