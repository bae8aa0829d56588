"""Baseline k-means clustering (k-means++ seeding, Lloyd iterations)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import FeatureSet
from .errors import DataError, NumericalError, ParameterError

METHODS = ("kmeans", "temi", "labels", "pseudo")


def empirical_distribution(assignments, C: int) -> np.ndarray:
    """Fraction of samples assigned to each of the ``C`` clusters."""
    a = np.asarray(assignments)
    if a.size == 0:
        raise DataError("empty assignment vector")
    if a.min() < 0 or a.max() >= C:
        raise DataError(f"assignments must lie in [0, {C})")
    return np.bincount(a, minlength=C).astype(np.float64) / a.size


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    assignments: np.ndarray
    C: int
    q: np.ndarray
    utilized: int
    method: str
    inertia: float | None = None

    @classmethod
    def from_assignments(cls, assignments, C: int, method: str, **extra) -> ClusterAssignment:
        if method not in METHODS:
            raise ParameterError(f"unknown method tag {method!r}")
        a = np.asarray(assignments, dtype=np.int64).copy()
        q = empirical_distribution(a, C)
        a.flags.writeable = False
        q.flags.writeable = False
        return cls(a, int(C), q, int(np.count_nonzero(q)), method, **extra)

    @property
    def n(self) -> int:
        return self.assignments.size

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "C": self.C,
            "assignments": self.assignments.tolist(),
            "q": self.q.tolist(),
            "utilized": self.utilized,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClusterAssignment:
        return cls.from_assignments(d["assignments"], d["C"], d["method"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> ClusterAssignment:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, C):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt : nxt + 1])[:, 0])
    return x[idx].copy()


def _inertia(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centers[labels]
    return float((diff * diff).sum())


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 300, tol: float = 1e-6):
    """Run Lloyd iterations from ``centers``.

    Returns ``(labels, centers, inertia, history)`` where ``history`` holds
    the inertia after every assignment/update pair.
    """
    C = centers.shape[0]
    history = []
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(x, centers), axis=1)
        counts = np.bincount(labels, minlength=C)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        history.append(_inertia(x, new, labels))
        if len(history) > 1 and history[-1] > history[-2] * (1 + 1e-12) + 1e-12:
            raise NumericalError(f"k-means inertia increased: {history[-2]} -> {history[-1]}")
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    counts = np.bincount(labels, minlength=C)
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, x)
    filled = counts > 0
    centers[filled] = sums[filled] / counts[filled, None]
    return labels, centers, _inertia(x, centers, labels), history


def kmeans_fit(
    fs: FeatureSet,
    C: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    restarts: int = 10,
) -> ClusterAssignment:
    """Best-of-``restarts`` k-means. Empty clusters are kept, so ``utilized`` may be < C."""
    x = fs.features.astype(np.float64)
    if C < 1 or C > x.shape[0]:
        raise ParameterError(f"need 1 <= C <= N, got C={C}, N={x.shape[0]}")
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    best = None
    for rng in np.random.default_rng(seed).spawn(restarts):
        labels, centers, inertia, _ = lloyd(x, _kmeanspp(x, C, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    return ClusterAssignment.from_assignments(best[0], C, "kmeans", inertia=best[2])
