"""Upper and lower bounds on the useful number of clusters from TEMI utilization.

Nothing here imports the diffusion code: bounds are computed before any
generative model is trained.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import FeatureSet, NeighborSets
from .errors import NumericalError, ParameterError
from .kmeans import ClusterAssignment
from .temi import TemiConfig, temi_assign, temi_fit


class BoundNotFoundError(NumericalError):
    """Utilization stayed above alpha for every doubling probe."""


def utilization_ratio(a: ClusterAssignment) -> float:
    """``r_C = C^u / C``."""
    return a.utilized / a.C


def probe_seed(seed: int, C: int) -> int:
    """Per-probe TEMI seed derived from ``(seed, C)``."""
    return int(np.random.SeedSequence([seed, C]).generate_state(1)[0])


@dataclass(frozen=True)
class BoundSearchConfig:
    alpha: float = 0.96
    C_start: int = 2
    max_doublings: int = 16
    refine_step: int | None = None
    temi: TemiConfig = field(default_factory=lambda: TemiConfig(C=2))
    probe_epochs: int | None = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.C_start < 2:
            raise ParameterError(f"C_start must be >= 2, got {self.C_start}")
        if self.max_doublings < 0:
            raise ParameterError("max_doublings must be >= 0")
        if self.refine_step is not None and self.refine_step < 1:
            raise ParameterError("refine_step must be >= 1")

    def replace(self, **kw) -> BoundSearchConfig:
        return dataclasses.replace(self, **kw)

    def probe_config(self, C: int, gamma: float | None = None) -> TemiConfig:
        kw = {"C": C, "seed": probe_seed(self.seed, C)}
        if self.probe_epochs is not None:
            kw["epochs"] = self.probe_epochs
        if gamma is not None:
            kw["gamma"] = gamma
        return self.temi.replace(**kw)


@dataclass(frozen=True)
class Probe:
    C: int
    utilized: int
    r_C: float
    wall_time: float
    phase: str


@dataclass
class BoundReport:
    probes: list[Probe]
    C_max: int
    alpha: float
    C_start: int
    warning: bool = False
    C_lower: int | None = None

    @property
    def doubling_probes(self) -> int:
        return sum(p.phase == "doubling" for p in self.probes)

    def to_dict(self, wall_time: bool = True) -> dict:
        probes = [dataclasses.asdict(p) for p in self.probes]
        if not wall_time:
            for p in probes:
                p.pop("wall_time")
        return {"probes": probes, "C_max": self.C_max, "alpha": self.alpha,
                "C_start": self.C_start, "warning": self.warning, "C_lower": self.C_lower}

    @classmethod
    def from_dict(cls, d: dict) -> BoundReport:
        probes = [Probe(**{"wall_time": 0.0, **p}) for p in d["probes"]]
        return cls(probes, d["C_max"], d["alpha"], d["C_start"], d["warning"], d["C_lower"])

    def save(self, path, wall_time: bool = True) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(wall_time), f, indent=2)

    @classmethod
    def load(cls, path) -> BoundReport:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def write_csv(self, path, wall_time: bool = True) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["C", "r_C", "passed", "wall_time"] if wall_time else ["C", "r_C", "passed"])
            for p in self.probes:
                row = [p.C, repr(p.r_C), int(p.r_C > self.alpha)]
                w.writerow(row + [f"{p.wall_time:.3f}"] if wall_time else row)


def _probe(fs, neighbors, cfg: BoundSearchConfig, C: int, phase: str, log) -> Probe:
    if C > fs.n:
        raise ParameterError(f"probe C={C} exceeds sample count {fs.n}")
    t0 = time.perf_counter()
    model, _ = temi_fit(fs, neighbors, cfg.probe_config(C))
    a = temi_assign(model, fs)
    p = Probe(C, a.utilized, utilization_ratio(a), time.perf_counter() - t0, phase)
    if log is not None:
        log(p)
    return p


def find_upper_bound(fs: FeatureSet, neighbors: NeighborSets, cfg: BoundSearchConfig,
                     log=None) -> BoundReport:
    """Doubling search on ``r_C`` followed by an even grid inside the bracket.

    ``C_max`` is the largest probed ``C`` with ``r_C > alpha``.
    """
    if cfg.C_start >= fs.n:
        raise ParameterError(f"C_start={cfg.C_start} must be below N={fs.n}")
    probes = []
    C, last_pass = cfg.C_start, None
    for k in range(cfg.max_doublings + 1):
        p = _probe(fs, neighbors, cfg, C, "doubling", log)
        probes.append(p)
        if p.r_C <= cfg.alpha:
            break
        last_pass = C
        if k == cfg.max_doublings:
            raise BoundNotFoundError(
                f"bound not found: r_C={p.r_C:.3f} > alpha={cfg.alpha} after {k} doublings (C={C})")
        C *= 2
    first_fail = C

    if last_pass is None:
        warnings.warn(f"r_C <= alpha already at C_start={cfg.C_start}", stacklevel=2)
        return BoundReport(probes, cfg.C_start, cfg.alpha, cfg.C_start, warning=True)

    step = cfg.refine_step or max(1, last_pass // 8)
    for c in range(last_pass + step, first_fail, step):
        probes.append(_probe(fs, neighbors, cfg, c, "refine", log))
    probes.sort(key=lambda p: p.C)
    c_max = max(p.C for p in probes if p.r_C > cfg.alpha)
    return BoundReport(probes, c_max, cfg.alpha, cfg.C_start)


def find_lower_bound(fs: FeatureSet, neighbors: NeighborSets, C_big: int,
                     cfg: BoundSearchConfig) -> int:
    """Utilized clusters of a gamma = 1 TEMI run at a large ``C_big``."""
    if C_big < 2 or C_big > fs.n:
        raise ParameterError(f"need 2 <= C_big <= N, got {C_big}")
    model, _ = temi_fit(fs, neighbors, cfg.probe_config(C_big, gamma=1.0))
    return temi_assign(model, fs).utilized
