"""Tabular datasets: CSV ingestion, preprocessing, client splits, empirical problems."""

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from . import rng as rngmod
from .errors import ConfigurationError, DataFormatError
from .model import ClientSpec, CovarianceModel, problem_from_clients, solve_psd

log = logging.getLogger(__name__)

_MISSING = {"", "na", "nan", "null"}


@dataclass(frozen=True, eq=False)
class Dataset:
    rows: np.ndarray
    labels: np.ndarray
    feature_names: tuple = None
    dropped: int = 0

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        labels = np.asarray(self.labels, dtype=float).ravel()
        if rows.ndim != 2 or rows.shape[0] != labels.shape[0]:
            raise DataFormatError("rows must be n x d with one label per row")
        if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(labels))):
            raise DataFormatError("dataset contains non-finite values")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass(frozen=True, eq=False)
class Preprocess:
    kind: str
    fitted_means: np.ndarray
    fitted_scales: np.ndarray
    rotation: np.ndarray = None

    def transform(self, rows):
        z = (np.asarray(rows, dtype=float) - self.fitted_means) / self.fitted_scales
        return z if self.rotation is None else z @ self.rotation


def load_csv(path, label_column):
    """Read a headed numeric CSV; rows with missing cells (empty, NA, NaN) are dropped and counted."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataFormatError(f"{path}: label column {label_column!r} not in header {header}")
        lab = header.index(label_column)
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            parsed = []
            for col, cell in enumerate(row):
                if cell.strip().lower() in _MISSING:
                    parsed.append(np.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}:{lineno}: column {header[col]!r} is not numeric: {cell!r}"
                    ) from None
            values.append(parsed)
    if not values:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.array(values)
    ok = np.all(np.isfinite(arr), axis=1)
    dropped = int(np.count_nonzero(~ok))
    if dropped:
        log.warning("%s: dropped %d row(s) with missing values", path, dropped)
    arr = arr[ok]
    if arr.shape[0] == 0:
        raise DataFormatError(f"{path}: every row has missing values")
    feats = [j for j in range(len(header)) if j != lab]
    return Dataset(rows=arr[:, feats], labels=arr[:, lab],
                   feature_names=tuple(header[j] for j in feats), dropped=dropped)


def fit_apply_preprocess(ds, kind):
    """Fit ``none``, ``standardize`` or ``pca`` on ``ds`` and return the transformed copy."""
    if ds.n < 2:
        raise DataFormatError("preprocessing needs at least 2 rows")
    d = ds.dim
    if kind == "none":
        pre = Preprocess("none", np.zeros(d), np.ones(d))
        return ds, pre
    if kind not in ("standardize", "pca"):
        raise ConfigurationError(f"unknown preprocessing {kind!r}")
    means = ds.rows.mean(axis=0)
    scales = ds.rows.std(axis=0)
    flat = scales <= 1e-12 * max(1.0, float(np.abs(ds.rows).max()))
    if np.any(flat):
        names = ds.feature_names or tuple(range(d))
        log.warning("zero-variance column(s) kept unscaled: %s",
                    ", ".join(str(names[j]) for j in np.flatnonzero(flat)))
        scales = np.where(flat, 1.0, scales)
    rotation = None
    if kind == "pca":
        z = (ds.rows - means) / scales
        evals, evecs = np.linalg.eigh(z.T @ z / ds.n)
        rotation = evecs[:, ::-1]
    pre = Preprocess(kind, means, scales, rotation)
    return replace(ds, rows=pre.transform(ds.rows)), pre


def _balance(points, centroids, n_clients):
    """Greedy reassignment to equal cluster sizes (differing by at most one)."""
    n = points.shape[0]
    caps = np.full(n_clients, n // n_clients)
    caps[: n % n_clients] += 1
    dist = np.linalg.norm(points[:, None, :] - centroids[None], axis=2)
    # points sure of their cluster choose first
    order = np.argsort(np.sort(dist, axis=1)[:, 0] - np.sort(dist, axis=1)[:, min(1, n_clients - 1)],
                       kind="stable")
    counts = np.zeros(n_clients, dtype=int)
    out = np.empty(n, dtype=int)
    for i in order:
        for c in np.argsort(dist[i], kind="stable"):
            if counts[c] < caps[c]:
                out[i] = c
                counts[c] += 1
                break
    return out


def split_clients(ds, n_clients, strategy="iid", seed=0):
    """Partition rows into ``n_clients`` near-equal groups (row order kept within a group)."""
    if not 1 <= n_clients <= ds.n:
        raise ConfigurationError(f"cannot split {ds.n} rows into {n_clients} clients")
    if n_clients == 1:
        return [ds]
    g = rngmod.stream(seed, 0, 0, rngmod.ROLE_MISC)
    if strategy == "iid":
        perm = g.permutation(ds.n)
        assign = np.empty(ds.n, dtype=int)
        assign[perm] = np.arange(ds.n) % n_clients
    elif strategy == "cluster":
        centroids, _ = kmeans2(ds.rows, n_clients, minit="++", seed=g)
        assign = _balance(ds.rows, centroids, n_clients)
    else:
        raise ConfigurationError(f"unknown split strategy {strategy!r}")
    return [replace(ds, rows=ds.rows[assign == c], labels=ds.labels[assign == c])
            for c in range(n_clients)]


def _lstsq_min_norm(h, b):
    model = h if isinstance(h, CovarianceModel) else CovarianceModel.from_matrix(h)
    w = solve_psd(model, b)
    rank = int(np.count_nonzero(model.eigvals > 0))
    if rank < model.dim:
        log.warning("second-moment matrix has rank %d < %d; using the minimum-norm solution",
                    rank, model.dim)
    return w


def empirical_problem(clients):
    """ProblemSpec whose clients sample uniformly from the given datasets."""
    if not clients or any(c.n == 0 for c in clients):
        raise ConfigurationError("every client needs at least one row")
    specs = []
    for ds in clients:
        h = CovarianceModel.from_matrix(ds.rows.T @ ds.rows / ds.n)
        w_loc = _lstsq_min_norm(h, ds.rows.T @ ds.labels / ds.n)
        specs.append((ds, h, w_loc))
    # pooled problem with equal client weights, matching the algorithm's 1/N average
    hbar = np.mean([s[1].matrix for s in specs], axis=0)
    bbar = np.mean([ds.rows.T @ ds.labels / ds.n for ds in clients], axis=0)
    w_star = _lstsq_min_norm(hbar, bbar)
    resid = np.concatenate([ds.labels - ds.rows @ w_star for ds in clients])
    sigma2 = float(np.mean(resid**2))
    out = [ClientSpec(covariance=cov, w_star_local=w_loc, noise_var=sigma2,
                      rows=ds.rows, labels=ds.labels) for ds, cov, w_loc in specs]
    return problem_from_clients(out, w_star_global=w_star)


def pooled_loss(clients, w):
    """Mean over clients of half the client mean squared residual."""
    return float(np.mean([0.5 * np.mean((ds.labels - ds.rows @ w) ** 2) for ds in clients]))
