"""Evaluation metrics: Fréchet distance, ANMI, Hungarian accuracy, 1-NN AUROC, pseudo-labels."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln
from scipy.stats import rankdata

from .dataset import FeatureSet
from .errors import DataError, NumericalError, ParameterError
from .kmeans import ClusterAssignment
from .nn import softmax

EVAL_CSV_COLUMNS = ("run_id", "C", "samples_seen", "frechet", "ufid", "auroc", "anmi", "accuracy")


def _rows(x) -> np.ndarray:
    if isinstance(x, FeatureSet):
        x = x.features
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DataError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise DataError("non-finite Gaussian statistics")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9:
            raise DataError("covariance is not symmetric")
        if np.any(np.diag(cov) < 0):
            raise DataError("covariance has a negative diagonal entry")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_stats(samples) -> GaussianStats:
    """Sample mean and unbiased, symmetrized covariance."""
    x = _rows(samples)
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 samples for covariance, got {x.shape[0]}")
    mu = x.mean(0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), x.shape[0])


def _psd_eigvals(a: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(a)
    tol = 1e-8 * max(float(np.trace(a)), 0.0)
    if w.size and w.min() < -tol and w.min() < -1e-300:
        raise NumericalError(f"matrix has negative eigenvalue {w.min():.3g} (trace {np.trace(a):.3g})")
    return np.maximum(w, 0.0)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root through an eigendecomposition, eigenvalues clamped at 0."""
    w, v = np.linalg.eigh(a)
    tol = 1e-8 * max(float(np.trace(a)), 0.0)
    if w.size and w.min() < -tol and w.min() < -1e-300:
        raise NumericalError(f"matrix has negative eigenvalue {w.min():.3g} (trace {np.trace(a):.3g})")
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    if a.dim != b.dim:
        raise DataError(f"dimension mismatch: {a.dim} vs {b.dim}")
    ra = sqrtm_psd(a.cov)
    m = ra @ b.cov @ ra
    cross = np.sqrt(_psd_eigvals(0.5 * (m + m.T))).sum()
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(d, 0.0)


def frechet_from_samples(x, y) -> float:
    return frechet_distance(gaussian_stats(x), gaussian_stats(y))


# ---------------------------------------------------------------------------
# Partition comparison


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    counts: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.counts))
        if np.any(c < 0) or not np.all(c == np.round(c)):
            raise DataError("contingency counts must be non-negative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_labels(cls, clusters, labels, C: int | None = None, K: int | None = None):
        a = np.asarray(getattr(clusters, "assignments", clusters), dtype=np.int64)
        b = np.asarray(labels, dtype=np.int64)
        if a.shape != b.shape:
            raise DataError(f"length mismatch: {a.size} assignments vs {b.size} labels")
        if a.size == 0:
            raise DataError("empty partitions")
        if np.any(a < 0) or np.any(b < 0):
            raise DataError("ids must be non-negative")
        C = int(a.max()) + 1 if C is None else C
        K = int(b.max()) + 1 if K is None else K
        t = np.zeros((C, K), dtype=np.int64)
        np.add.at(t, (a, b), 1)
        return cls(t)

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def _entropy(sums: np.ndarray, n: int) -> float:
    p = sums[sums > 0] / n
    return float(-(p * np.log(p)).sum())


def mutual_info(table: ContingencyTable) -> float:
    t, n = table.counts, table.n
    a, b = table.row_sums, table.col_sums
    i, j = np.nonzero(t)
    nij = t[i, j].astype(np.float64)
    return float((nij / n * (np.log(n * nij) - np.log(a[i] * b[j].astype(np.float64)))).sum())


def expected_mutual_info(table: ContingencyTable) -> float:
    """Exact E[MI] under the permutation (hypergeometric) model."""
    a = table.row_sums[table.row_sums > 0].astype(np.int64)
    b = table.col_sums[table.col_sums > 0].astype(np.int64)
    n = table.n
    lg = gammaln(np.arange(n + 2, dtype=np.float64))  # lg[k] = log((k-1)!)
    total = 0.0
    for ai in a:
        for bj in b:
            lo, hi = max(1, ai + bj - n), min(ai, bj)
            if lo > hi:
                continue
            k = np.arange(lo, hi + 1)
            log_p = (lg[ai + 1] + lg[bj + 1] + lg[n - ai + 1] + lg[n - bj + 1] - lg[n + 1]
                     - lg[k + 1] - lg[ai - k + 1] - lg[bj - k + 1] - lg[n - ai - bj + k + 1])
            term = k / n * (np.log(n * k) - np.log(float(ai) * float(bj)))
            total += float((term * np.exp(log_p)).sum())
    return total


def anmi(assignment, labels) -> float:
    """Adjusted mutual information with arithmetic-mean normalization."""
    table = ContingencyTable.from_labels(assignment, labels)
    a, b, n = table.row_sums, table.col_sums, table.n
    hu, hv = _entropy(a, n), _entropy(b, n)
    used_a, used_b = np.count_nonzero(a), np.count_nonzero(b)
    if used_a == used_b == 1 or (used_a == used_b == n):
        return 1.0
    mi = mutual_info(table)
    emi = expected_mutual_info(table)
    denom = 0.5 * (hu + hv) - emi
    if abs(denom) < np.finfo(np.float64).eps:
        denom = np.finfo(np.float64).eps if denom >= 0 else -np.finfo(np.float64).eps
    return float((mi - emi) / denom)


def hungarian_map(table: ContingencyTable) -> tuple[np.ndarray, float]:
    """Maximum-weight one-to-one cluster-to-class mapping.

    Returns ``(mapping, accuracy)``; ``mapping[c]`` is the class for cluster
    ``c``, or -1 for clusters left unmatched when C > K.
    """
    t = table.counts
    rows, cols = linear_sum_assignment(t, maximize=True)
    mapping = np.full(t.shape[0], -1, dtype=np.int64)
    mapping[rows] = cols
    return mapping, float(t[rows, cols].sum()) / table.n


def cluster_accuracy(assignment, labels) -> float:
    return hungarian_map(ContingencyTable.from_labels(assignment, labels))[1]


# ---------------------------------------------------------------------------
# Out-of-distribution style scores


def _unit_rows(x, name: str) -> np.ndarray:
    x = _rows(x)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DataError(f"{name}: zero-norm row {bad[0]}")
    return x / norms[:, None]


def nn_cosine_scores(queries, train, chunk: int = 2048) -> np.ndarray:
    """Top-1 cosine similarity of each query row against ``train``."""
    q = _unit_rows(queries, "queries")
    t = _unit_rows(train, "train")
    if q.shape[1] != t.shape[1]:
        raise DataError(f"dimension mismatch: {q.shape[1]} vs {t.shape[1]}")
    out = np.empty(q.shape[0])
    for s in range(0, q.shape[0], chunk):
        out[s : s + chunk] = (q[s : s + chunk] @ t.T).max(1)
    return out


def auroc(pos_scores, neg_scores) -> float:
    """Rank-statistic AUROC (midranks for ties); positives expected to score higher."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUROC needs non-empty positive and negative sets")
    r = rankdata(np.concatenate([pos, neg]))
    return float((r[: pos.size].sum() - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def nn_auroc(generated, train, test) -> float:
    """AUROC separating test rows (positive) from generated rows by top-1 NN cosine to train."""
    return auroc(nn_cosine_scores(test, train), nn_cosine_scores(generated, train))


def pseudo_label(image_feats, prototypes, temperature: float = 0.01,
                 return_probs: bool = False):
    """Argmax of the softmax over cosine similarities to ``prototypes``."""
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    x = _unit_rows(image_feats, "features")
    p = _unit_rows(prototypes, "prototypes")
    if x.shape[1] != p.shape[1]:
        raise DataError(f"dimension mismatch: {x.shape[1]} vs {p.shape[1]}")
    probs = softmax(x @ p.T, temperature)
    a = ClusterAssignment.from_assignments(np.argmax(probs, axis=1), p.shape[0], "pseudo")
    return (a, probs) if return_probs else a


# ---------------------------------------------------------------------------
# Reports


def metric_report(metric: str, value: float, n_a: int, n_b: int | None = None,
                  config: dict | None = None) -> dict:
    return {"metric": metric, "value": float(value), "n_a": int(n_a),
            "n_b": None if n_b is None else int(n_b), "config": config or {}}


def write_reports(reports: list[dict], path) -> None:
    with open(path, "w") as f:
        json.dump(reports, f, indent=2, sort_keys=True)
