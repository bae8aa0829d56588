"""Feature datasets: file I/O, normalization, synthetic generation and k-NN mining."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError

MAGIC = b"CCFS"
VERSION = 1
_HEADER = struct.Struct("<4sBBII")
FLAG_LABELS = 0x01


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """N x D embedding matrix with optional integer labels.

    Arrays are stored read-only so a FeatureSet can be shared freely.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float32, copy=True)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-D array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise DataError(f"non-finite feature value in row {bad}")
        object.__setattr__(self, "features", _frozen(x))
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (x.shape[0],):
                raise DataError(f"labels length {y.shape} does not match N={x.shape[0]}")
            if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0):
                raise DataError("labels must be non-negative integers")
            object.__setattr__(self, "labels", _frozen(y.astype(np.int64)))
        ids = np.arange(x.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (x.shape[0],):
            raise DataError("ids length does not match N")
        object.__setattr__(self, "ids", _frozen(ids.copy()))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, index) -> FeatureSet:
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return FeatureSet(self.features[index], labels, self.ids[index])


@dataclass(frozen=True, eq=False)
class NeighborSets:
    """Row ``i`` of ``neighbors`` lists the ``m`` most cosine-similar samples to ``i``."""

    m: int
    neighbors: np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    modes: int
    dim: int
    samples_per_mode: tuple[int, ...]
    mode_separation: float = 10.0
    mode_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        spm = tuple(int(s) for s in np.atleast_1d(self.samples_per_mode))
        if len(spm) == 1 and self.modes > 1:
            spm = spm * self.modes
        object.__setattr__(self, "samples_per_mode", spm)
        if self.modes < 1 or self.dim < 1:
            raise ParameterError("modes and dim must be >= 1")
        if len(spm) != self.modes or min(spm) < 1:
            raise ParameterError("samples_per_mode needs one positive count per mode")
        if self.mode_separation <= 0 or self.mode_scale <= 0:
            raise ParameterError("mode_separation and mode_scale must be positive")

    @property
    def total(self) -> int:
        return sum(self.samples_per_mode)


# ---------------------------------------------------------------------------
# File formats


def save_features(fs: FeatureSet, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        write_feature_array(path, fs.features, fs.labels)
    elif format == "csv":
        with open(path, "w") as f:
            for i in range(fs.n):
                row = [repr(float(v)) for v in fs.features[i]]
                if fs.labels is not None:
                    row.append(str(int(fs.labels[i])))
                f.write(",".join(row) + "\n")
    else:
        raise ParameterError(f"unknown feature format {format!r}")


def load_features(path, format: str = "binary", labels_col: bool = False) -> FeatureSet:
    """Read a feature file.

    ``labels_col`` only applies to CSV input, where it marks the last column
    as integer labels. Binary files carry a labels flag in their header.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path, labels_col)
    raise ParameterError(f"unknown feature format {format!r}")


def write_feature_array(path, features, labels=None) -> None:
    """Binary writer for raw arrays; unlike :class:`FeatureSet` it accepts N = 0."""
    x = np.asarray(features, dtype="<f4")
    if x.ndim != 2 or x.shape[1] < 1:
        raise DataError(f"expected an N x D array with D >= 1, got shape {x.shape}")
    flags = FLAG_LABELS if labels is not None else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, flags, x.shape[0], x.shape[1]))
        f.write(np.ascontiguousarray(x).tobytes())
        if labels is not None:
            f.write(np.asarray(labels).astype("<u4").tobytes())


def read_feature_array(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Binary reader returning ``(features, labels)``; accepts N = 0."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return _parse_binary(path, allow_empty=True)


def _load_binary(path: Path) -> FeatureSet:
    x, labels = _parse_binary(path, allow_empty=False)
    return FeatureSet(x, labels)


def _parse_binary(path: Path, allow_empty: bool):
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, flags, n, d = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte 4")
    if n < (0 if allow_empty else 1) or d < 1:
        raise DataError(f"{path}: invalid shape N={n}, D={d} at byte 6")
    off = _HEADER.size
    need = off + 4 * n * d + (4 * n if flags & FLAG_LABELS else 0)
    if len(raw) != need:
        raise DataError(
            f"{path}: header declares N={n}, D={d} ({need} bytes) but payload ends at byte {len(raw)}"
        )
    x = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        i, j = bad[0]
        raise DataError(f"{path}: non-finite value at byte {off + 4 * (i * d + j)}")
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * d).astype(np.int64)
    return x.astype(np.float32), labels


def _load_csv(path: Path, labels_col: bool) -> FeatureSet:
    rows, labels = [], []
    width = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"{path}: line {lineno} has {len(cells)} columns, expected {width}")
            try:
                if labels_col:
                    labels.append(int(cells[-1]))
                    cells = cells[:-1]
                vals = [float(c) for c in cells]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}: non-finite value on line {lineno}")
            rows.append(vals)
    if not rows or not rows[0]:
        raise DataError(f"{path}: no feature rows")
    return FeatureSet(np.array(rows, dtype=np.float32), np.array(labels) if labels_col else None)


# ---------------------------------------------------------------------------
# Transforms


def l2_normalize(fs: FeatureSet) -> FeatureSet:
    x = fs.features.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"row {zero[0]} has zero norm")
    return FeatureSet((x / norms[:, None]).astype(np.float32), fs.labels, fs.ids)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"row {zero[0]} has zero norm")
    return x / norms[:, None]


def mine_knn(fs: FeatureSet, m: int, chunk: int = 512) -> NeighborSets:
    """Exact top-``m`` cosine neighbors, excluding self, ties to the lower index."""
    n = fs.n
    if m < 1 or m >= n:
        raise ParameterError(f"need 1 <= m < N, got m={m}, N={n}")
    z = _unit_rows(fs.features)
    out = np.empty((n, m), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sims = z[start:stop] @ z.T
        # snap away rounding noise so mathematically equal cosines tie exactly
        sims = np.round(sims, 12)
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # stable sort keeps lower indices first among equal similarities
        out[start:stop] = np.argsort(-sims, axis=1, kind="stable")[:, :m]
    return NeighborSets(m, _frozen(out))


# ---------------------------------------------------------------------------
# Synthetic data


def mode_centers(modes: int, dim: int, separation: float) -> np.ndarray:
    """Mode centers with pairwise distance >= ``separation``.

    Ring of radius ``separation / (2 sin(pi/K))`` when ``dim == 2``, regular
    simplex vertices otherwise.
    """
    if modes == 1:
        return np.zeros((1, dim))
    if dim == 2:
        radius = separation / (2.0 * np.sin(np.pi / modes))
        angles = 2.0 * np.pi * np.arange(modes) / modes
        return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if modes > dim + 1:
        raise ParameterError(f"cannot place {modes} simplex vertices in {dim} dimensions")
    # centered standard simplex has edge length sqrt(2); express it in a (K-1)-dim basis
    e = np.eye(modes) - 1.0 / modes
    u, s, _ = np.linalg.svd(e, full_matrices=False)
    coords = u[:, : modes - 1] * s[: modes - 1]
    centers = np.zeros((modes, dim))
    centers[:, : modes - 1] = coords * (separation / np.sqrt(2.0))
    return centers


def make_synthetic(spec: SyntheticSpec) -> FeatureSet:
    centers = mode_centers(spec.modes, spec.dim, spec.mode_separation)
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.modes), spec.samples_per_mode)
    x = centers[labels] + spec.mode_scale * rng.standard_normal((labels.size, spec.dim))
    order = rng.permutation(labels.size)
    return FeatureSet(x[order].astype(np.float32), labels[order])
