"""Desk-scale trend protocols with plot-ready CSV output and a PASS/FAIL verdict.

Trends:

``sample_efficiency``
    Conditional (``C = cfg.C[0]``) versus unconditional diffusion on the same
    data and data order. Passes when the conditional model ends with the lower
    Fréchet distance in at least 4/5 of the seeds and reaches the unconditional
    model's final value by half of ``M_img`` in at least 3/5.
``bound_sweep``
    Utilization-based upper bound per seed. Passes when ``C_max >= K`` with
    ``r_C(K) = 1`` in at least 4/5 of the seeds and the doubling probe count
    respects the logarithmic bound. The first seed also gets the Fréchet distance
    of a conditional model at each doubling probe.
``ood_sweep``
    uFID (conditional vs unconditional samples from shared initial noise) and
    1-NN AUROC across a C sweep. Passes when uFID at the largest C exceeds uFID
    at the smallest C in at least 4/5 of the seeds.
``sampling_distribution``
    k-means conditioning on modes with 8:1 size imbalance, sampled from q(c) or
    uniformly. Passes when q(c) sampling gives the lower Fréchet distance in at
    least 4/5 of the seeds and every condition draw passes a chi-square test
    (p > 0.001) against its intended distribution.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from ..bounds import find_upper_bound, probe_seed
from ..dataset import FeatureSet, SyntheticSpec, l2_normalize, mine_knn
from ..diffusion import DiffusionModel
from ..errors import ParameterError
from ..kmeans import ClusterAssignment, kmeans_fit
from ..metrics import frechet_distance, gaussian_stats, nn_auroc
from ..temi import temi_assign, temi_fit
from .commands import (
    cluster_features, draw_samples, heldout_source, load_source, out_dir, train_model, write_rows,
)
from .config import DataSource, ExperimentConfig

TRENDS = ("sample_efficiency", "bound_sweep", "ood_sweep", "sampling_distribution")


def need(fraction: float, n: int) -> int:
    """Seeds required to pass: ``fraction`` of ``n``, rounded up (4/5 -> 4 of 5)."""
    return math.ceil(fraction * n - 1e-9)


def seeded(cfg: ExperimentConfig, seed: int, synthetic: SyntheticSpec | None = None) -> ExperimentConfig:
    """Copy of ``cfg`` with the global seed and (synthetic) data seed set to ``seed``."""
    spec = synthetic or cfg.data.synthetic
    data = cfg.data if spec is None else DataSource(synthetic=dataclasses.replace(spec, seed=seed))
    return cfg.replace(seed=seed, data=data)


def mean_frechet(model: DiffusionModel, q, ref_stats, cfg: ExperimentConfig, seed: int,
                 uniform: bool | None = None, return_conditions: bool = False):
    """Fréchet distance to ``ref_stats`` averaged over ``n_sets`` independent sample sets."""
    vals, conds = [], []
    for r in range(cfg.sampling.n_sets):
        x, c, _ = draw_samples(model, q, cfg.sampling.n_samples, cfg, (seed, r), uniform=uniform)
        vals.append(frechet_distance(gaussian_stats(x), ref_stats))
        conds.append(c)
    return (float(np.mean(vals)), conds) if return_conditions else float(np.mean(vals))


class Bundle:
    """Rows flushed to ``<trend>.csv`` after every seed, plus the final verdict."""

    def __init__(self, cfg: ExperimentConfig, trend: str, columns, fmt: str):
        self.dir = out_dir(cfg, "reproduce", trend)
        self.trend, self.columns, self.fmt = trend, columns, fmt
        self.rows: list[dict] = []

    def add(self, *rows: dict) -> None:
        self.rows.extend(rows)
        write_rows(self.dir / self.trend, self.rows, self.columns, self.fmt)

    def verdict(self, ok: bool, **detail) -> dict:
        v = {"trend": self.trend, "pass": bool(ok), **detail}
        (self.dir / "verdict.json").write_text(json.dumps(v, indent=2, sort_keys=True) + "\n")
        return v


# ---------------------------------------------------------------------------


def sample_efficiency(cfg: ExperimentConfig, fmt: str = "csv") -> dict:
    C = cfg.C[0]
    frac = float(cfg.reproduce.get("efficiency_fraction", 0.5))
    full = bool(cfg.reproduce.get("full_curves", False))
    b = Bundle(cfg, "sample_efficiency", ("seed", "samples_seen", "frechet", "condition_mode"), fmt)
    wins, fast, per_seed = 0, 0, []
    for s in cfg.seeds:
        sc = seeded(cfg, s)
        fs = load_source(sc.data)
        ref = gaussian_stats(load_source(heldout_source(sc)).features)
        a, _ = cluster_features(sc, fs, C)
        M = sc.train.M_img
        curves = {}
        for mode, nc, conds, q in (("uncond", 0, np.zeros(fs.n, np.int64), None),
                                   ("cond", a.C, a.assignments, a.q)):
            pts = []

            def on_m(tr, k, mode=mode, q=q, pts=pts):
                last = k == tr.cfg.milestones - 1
                if full or last or (mode == "cond" and tr.samples_seen <= frac * M):
                    pts.append((tr.samples_seen, mean_frechet(tr.model, q, ref, sc, s)))

            train_model(sc, fs, nc, conds, q, s, on_milestone=on_m)
            curves[mode] = pts
            b.add(*({"seed": s, "samples_seen": n, "frechet": f, "condition_mode": mode}
                    for n, f in pts))
        u_final = curves["uncond"][-1][1]
        c_final = curves["cond"][-1][1]
        reach = next((n for n, f in curves["cond"] if f <= u_final), None)
        win, quick = c_final < u_final, reach is not None and reach <= frac * M
        wins += win
        fast += quick
        per_seed.append({"seed": s, "cond_final": c_final, "uncond_final": u_final,
                         "reach_samples": reach, "utilized": a.utilized})
    n = len(cfg.seeds)
    return b.verdict(wins >= need(0.8, n) and fast >= need(0.6, n),
                     conditioning_helps={"wins": wins, "need": need(0.8, n)},
                     sample_efficiency={"fast": fast, "need": need(0.6, n), "fraction": frac},
                     per_seed=per_seed)


def bound_sweep(cfg: ExperimentConfig, fmt: str = "csv") -> dict:
    K = cfg.C[0]
    with_frechet = bool(cfg.reproduce.get("bound_frechet", True))
    b = Bundle(cfg, "bound_sweep", ("seed", "C", "r_C", "passed", "phase", "frechet"), fmt)
    ok_count, per_seed = 0, []
    for i, s in enumerate(cfg.seeds):
        sc = seeded(cfg, s)
        raw = load_source(sc.data)
        fs = l2_normalize(raw)
        bc = sc.bound_config(fs.n)
        neighbors = mine_knn(fs, bc.temi.m)
        rep = find_upper_bound(fs, neighbors, bc)
        frechet = {}
        if with_frechet and i == 0:
            ref = gaussian_stats(load_source(heldout_source(sc)).features)
            for p in rep.probes:
                if p.phase != "doubling":
                    continue
                model, _ = temi_fit(fs, neighbors, bc.probe_config(p.C))
                a = temi_assign(model, fs)
                tr = train_model(sc, raw, a.C, a.assignments, a.q, s)
                frechet[p.C] = mean_frechet(tr.model, a.q, ref, sc, s)
        b.add(*({"seed": s, "C": p.C, "r_C": p.r_C, "passed": int(p.r_C > rep.alpha),
                 "phase": p.phase, "frechet": frechet.get(p.C)} for p in rep.probes))
        r_K = next((p.r_C for p in rep.probes if p.C == K), None)
        doubling = [p.C for p in rep.probes if p.phase == "doubling"]
        limit = math.ceil(math.log2(max(doubling) / bc.C_start)) + 1
        ok = rep.C_max >= K and r_K == 1.0 and len(doubling) <= limit
        ok_count += ok
        per_seed.append({"seed": s, "C_max": rep.C_max, "r_C_at_K": r_K, "warning": rep.warning,
                         "doubling_probes": len(doubling), "probe_limit": limit,
                         "C_V": min(frechet, key=frechet.get) if frechet else None})
    n = len(cfg.seeds)
    return b.verdict(ok_count >= need(0.8, n), K=K, seeds_ok=ok_count, need=need(0.8, n),
                     per_seed=per_seed)


def ood_sweep(cfg: ExperimentConfig, fmt: str = "csv") -> dict:
    Cs = sorted(int(c) for c in cfg.reproduce.get("ood_C", (2, 64)))
    if len(Cs) < 2:
        raise ParameterError("ood_sweep needs at least two C values")
    b = Bundle(cfg, "ood_sweep", ("seed", "C", "utilized", "ufid", "auroc", "frechet"), fmt)
    grows, per_seed = 0, []
    for s in cfg.seeds:
        sc = seeded(cfg, s)
        fs = load_source(sc.data)
        ho = load_source(heldout_source(sc)).features.astype(np.float64)
        ref = gaussian_stats(ho)
        n = sc.sampling.n_samples
        uncond = train_model(sc, fs, 0, np.zeros(fs.n, np.int64), None, s)
        xu, _, _ = draw_samples(uncond.model, None, n, sc, (s, 0))
        u_stats = gaussian_stats(xu)
        ufid = {}
        for C in Cs:
            a, _ = cluster_features(sc, fs, C)
            tr = train_model(sc, fs, a.C, a.assignments, a.q, s)
            x, _, _ = draw_samples(tr.model, a.q, n, sc, (s, 0))
            st = gaussian_stats(x)
            ufid[C] = frechet_distance(st, u_stats)
            b.add({"seed": s, "C": C, "utilized": a.utilized, "ufid": ufid[C],
                   "auroc": nn_auroc(x, fs.features, ho), "frechet": frechet_distance(st, ref)})
        grows += ufid[Cs[-1]] > ufid[Cs[0]]
        per_seed.append({"seed": s, "ufid": {str(c): v for c, v in ufid.items()}})
    k = len(cfg.seeds)
    return b.verdict(grows >= need(0.8, k), C_low=Cs[0], C_high=Cs[-1], grows=grows,
                     need=need(0.8, k), per_seed=per_seed)


def imbalanced_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    """Modes alternate between ``big`` and ``big / ratio`` samples."""
    base = cfg.data.synthetic or SyntheticSpec(8, 2, 512, 2.0, 0.1)
    r = cfg.reproduce
    K = int(r.get("imbalance_modes", base.modes))
    big, ratio = int(r.get("imbalance_big", 1024)), int(r.get("imbalance_ratio", 8))
    sizes = tuple(big if k % 2 == 0 else max(1, big // ratio) for k in range(K))
    return SyntheticSpec(K, base.dim, sizes, base.mode_separation, base.mode_scale, base.seed)


def sampling_distribution(cfg: ExperimentConfig, fmt: str = "csv") -> dict:
    spec = imbalanced_spec(cfg)
    b = Bundle(cfg, "sampling_distribution",
               ("seed", "distribution", "frechet", "chi2_p_min"), fmt)
    wins, chi_ok, per_seed = 0, True, []
    for s in cfg.seeds:
        sc = seeded(cfg, s, spec)
        fs = load_source(sc.data)
        ref = gaussian_stats(load_source(heldout_source(sc)).features)
        a = kmeans_fit(l2_normalize(fs), spec.modes, seed=s)
        tr = train_model(sc, fs, a.C, a.assignments, a.q, s)
        res = {}
        for dist in ("empirical", "uniform"):
            uni = dist == "uniform"
            f, conds = mean_frechet(tr.model, a.q, ref, sc, s, uniform=uni, return_conditions=True)
            target = np.full(a.C, 1.0 / a.C) if uni else a.q
            p_min = min(chi2_pvalue(c, target) for c in conds)
            res[dist] = (f, p_min)
            chi_ok &= p_min > 1e-3
            b.add({"seed": s, "distribution": dist, "frechet": f, "chi2_p_min": p_min})
        wins += res["empirical"][0] < res["uniform"][0]
        per_seed.append({"seed": s, "frechet_q": res["empirical"][0],
                         "frechet_uniform": res["uniform"][0], "q": a.q.tolist()})
    n = len(cfg.seeds)
    return b.verdict(wins >= need(0.8, n) and chi_ok, wins=wins, need=need(0.8, n),
                     chi_square_ok=bool(chi_ok), mode_sizes=list(spec.samples_per_mode),
                     per_seed=per_seed)


def chi2_pvalue(conditions, target) -> float:
    """Chi-square goodness of fit of condition counts over the support of ``target``."""
    target = np.asarray(target, dtype=np.float64)
    counts = np.bincount(np.asarray(conditions), minlength=target.size)
    support = target > 0
    if np.any(counts[~support]):
        return 0.0
    if support.sum() < 2:
        return 1.0
    return float(chisquare(counts[support], counts.sum() * target[support]).pvalue)


_RUNNERS = {"sample_efficiency": sample_efficiency, "bound_sweep": bound_sweep,
            "ood_sweep": ood_sweep, "sampling_distribution": sampling_distribution}


def cmd_reproduce(cfg: ExperimentConfig, trend: str, fmt: str = "csv") -> dict:
    if trend not in _RUNNERS:
        raise ParameterError(f"unknown trend {trend!r}; choose from {', '.join(TRENDS)}")
    cfg.validate_paths()
    return _RUNNERS[trend](cfg, fmt)
