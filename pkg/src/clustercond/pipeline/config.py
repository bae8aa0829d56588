"""Experiment configuration: a JSON tree mapped onto nested dataclasses.

Schema (every key optional; unknown keys are rejected)::

    {
      "data":     {"path": null, "format": "binary", "labels_col": false,
                   "synthetic": {"modes": 8, "dim": 2, "samples_per_mode": [512],
                                 "mode_separation": 2.0, "mode_scale": 0.1, "seed": 0}},
      "heldout":  same shape as "data"; null derives a fresh synthetic draw,
      "method":   "kmeans" | "temi" | "labels" | "pseudo" | "none",
      "C":        [8],                       # one entry, or a sweep
      "prototypes": null,                    # K x D feature file for method "pseudo"
      "temi":     {TemiConfig overrides on top of the desk defaults},
      "bound":    {"alpha", "C_start", "max_doublings", "refine_step", "probe_epochs",
                   "C_big" (set to also run the gamma = 1 lower bound)},
      "train":    {TrainRunConfig fields; its seed is replaced by the global seed},
      "model":    {"hidden", "depth", "n_freq", "sigma_data" (null = data std)},
      "schedule": {NoiseSchedule fields},
      "sampling": {"n_samples", "n_sets", "condition_distribution", "solver"},
      "metrics":  ["frechet", "ufid", "auroc", "anmi", "accuracy"],
      "seeds":    [0, 1, 2, 3, 4],           # per-seed repeats for reproduce trends
      "reproduce": {trend-specific overrides},
      "out":      "runs/default",
      "seed":     0
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..bounds import BoundSearchConfig
from ..dataset import SyntheticSpec
from ..diffusion import NoiseSchedule, TrainRunConfig
from ..errors import DataError, ParameterError
from ..temi import TemiConfig

METHODS = ("kmeans", "temi", "labels", "pseudo", "none")
METRICS = ("frechet", "ufid", "auroc", "anmi", "accuracy")

# Desk-scale TEMI: a few narrow heads trained briefly on small synthetic sets.
DESK_TEMI = {"H": 4, "hidden_dim": 32, "bottleneck_dim": 16, "momentum": 0.99,
             "epochs": 50, "learning_rate": 1e-3}


def _build(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ParameterError(f"{name}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ParameterError(f"{name}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class DataSource:
    path: str | None = None
    format: str = "binary"
    labels_col: bool = False
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            object.__setattr__(self, "synthetic", _build(SyntheticSpec, self.synthetic, "synthetic"))
        if (self.path is None) == (self.synthetic is None):
            raise ParameterError("a data source needs exactly one of 'path' or 'synthetic'")
        if self.format not in ("binary", "csv"):
            raise ParameterError(f"unknown data format {self.format!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.synthetic is not None:
            d["synthetic"]["samples_per_mode"] = list(self.synthetic.samples_per_mode)
        return d


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    depth: int = 3
    n_freq: int = 0
    sigma_data: float | None = None


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 10_000
    n_sets: int = 3
    condition_distribution: str = "empirical"
    solver: str = "heun"

    def __post_init__(self):
        if self.n_samples < 0 or self.n_sets < 1:
            raise ParameterError("need n_samples >= 0 and n_sets >= 1")
        if self.condition_distribution not in ("empirical", "uniform"):
            raise ParameterError(f"unknown condition_distribution {self.condition_distribution!r}")
        if self.solver not in ("heun", "euler"):
            raise ParameterError(f"unknown solver {self.solver!r}")


def _default_data() -> DataSource:
    return DataSource(synthetic=SyntheticSpec(8, 2, 512, 2.0, 0.1, seed=0))


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource = field(default_factory=_default_data)
    heldout: DataSource | None = None
    method: str = "temi"
    C: tuple[int, ...] = (8,)
    prototypes: str | None = None
    temi: dict = field(default_factory=dict)
    bound: dict = field(default_factory=dict)
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    metrics: tuple[str, ...] = ("frechet",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    reproduce: dict = field(default_factory=dict)
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        for name in ("C", "metrics", "seeds"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(v) if isinstance(v, (list, tuple)) else (v,))
        if self.method not in METHODS:
            raise ParameterError(f"unknown clustering method {self.method!r}")
        if not self.C or min(self.C) < 1:
            raise ParameterError("C must be a non-empty list of positive integers")
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ParameterError(f"unknown metrics {sorted(bad)}")
        known = {f.name for f in dataclasses.fields(TemiConfig)} - {"C", "seed"}
        if set(self.temi) - known:
            raise ParameterError(f"temi: unknown keys {sorted(set(self.temi) - known)}")
        known = {"alpha", "C_start", "max_doublings", "refine_step", "probe_epochs", "C_big"}
        if set(self.bound) - known:
            raise ParameterError(f"bound: unknown keys {sorted(set(self.bound) - known)}")
        self.temi_config(max(self.C))
        self.bound_config()

    # -- derived configs -------------------------------------------------------

    def temi_config(self, C: int, n: int | None = None, seed: int | None = None) -> TemiConfig:
        kw = {**DESK_TEMI, **self.temi}
        if n is not None:
            kw.setdefault("m", max(1, min(50, n // 4)))
            kw["batch_size"] = min(kw.get("batch_size", 512), n)
        return TemiConfig(C=C, seed=self.seed if seed is None else seed, **kw)

    def bound_config(self, n: int | None = None, seed: int | None = None) -> BoundSearchConfig:
        seed = self.seed if seed is None else seed
        kw = {k: v for k, v in self.bound.items() if k != "C_big"}
        return BoundSearchConfig(temi=self.temi_config(2, n, seed), seed=seed, **kw)

    def train_config(self, seed: int | None = None, **kw) -> TrainRunConfig:
        return self.train.replace(seed=self.seed if seed is None else seed, **kw)

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "heldout": None if self.heldout is None else self.heldout.to_dict(),
            "method": self.method,
            "C": list(self.C),
            "prototypes": self.prototypes,
            "temi": dict(self.temi),
            "bound": dict(self.bound),
            "train": dataclasses.asdict(self.train),
            "model": dataclasses.asdict(self.model),
            "schedule": dataclasses.asdict(self.schedule),
            "sampling": dataclasses.asdict(self.sampling),
            "metrics": list(self.metrics),
            "seeds": list(self.seeds),
            "reproduce": dict(self.reproduce),
            "out": self.out,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"config: unknown keys {sorted(unknown)}")
        kw = dict(d)
        for key, sub in (("data", DataSource), ("heldout", DataSource), ("train", TrainRunConfig),
                         ("model", ModelConfig), ("schedule", NoiseSchedule),
                         ("sampling", SamplingConfig)):
            if key in kw and kw[key] is not None:
                kw[key] = _build(sub, kw[key], key)
        return cls(**kw)

    def replace(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        p = Path(path)
        if not p.exists():
            raise DataError(f"{p}: config file not found")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ParameterError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from e
        return cls.from_dict(d)

    def validate_paths(self) -> None:
        for src in (self.data, self.heldout):
            if src is not None and src.path is not None and not Path(src.path).exists():
                raise DataError(f"{src.path}: data file not found")
        if self.prototypes is not None and not Path(self.prototypes).exists():
            raise DataError(f"{self.prototypes}: prototype file not found")
