"""Pipeline commands: each reads an :class:`ExperimentConfig` and writes files under ``cfg.out``.

Output layout::

    <out>/config.json                       resolved config
    <out>/data.ccfs, heldout.ccfs           gen-data
    <out>/cluster/assign_<method>_C<C>.json cluster (+ report.csv / report.json)
    <out>/bound/report.json, bound.csv      bound
    <out>/train/<tag>/ckpt_<k>.ccdm         train (+ loss.csv, checkpoints.csv)
    <out>/samples/<tag>.ccfs                sample (+ <tag>.conds.json sidecar)
    <out>/eval/eval.csv | eval.json         eval (+ msp_<run_id>.json)
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..bounds import find_lower_bound, find_upper_bound
from ..dataset import (
    FeatureSet, SyntheticSpec, l2_normalize, load_features, make_synthetic, mine_knn,
    read_feature_array, save_features, write_feature_array,
)
from ..diffusion import DiffusionModel, DiffusionTrainer, heun_sample, sample_conditions
from ..errors import DataError, ParameterError
from ..kmeans import ClusterAssignment, kmeans_fit
from ..metrics import (
    EVAL_CSV_COLUMNS, anmi, cluster_accuracy, frechet_distance, gaussian_stats, nn_auroc,
    pseudo_label,
)
from ..temi import TemiModel, msp_confidence, temi_assign, temi_fit
from .config import DataSource, ExperimentConfig

HELDOUT_SEED_OFFSET = 1000


# ---------------------------------------------------------------------------
# Data


def load_source(src: DataSource) -> FeatureSet:
    if src.synthetic is not None:
        return make_synthetic(src.synthetic)
    return load_features(src.path, src.format, src.labels_col)


def heldout_source(cfg: ExperimentConfig) -> DataSource:
    """Configured held-out data, or a fresh draw from the training generator."""
    if cfg.heldout is not None:
        return cfg.heldout
    spec = cfg.data.synthetic
    if spec is None:
        raise ParameterError("held-out data must be configured when training data comes from a file")
    return DataSource(synthetic=SyntheticSpec(spec.modes, spec.dim, spec.samples_per_mode,
                                              spec.mode_separation, spec.mode_scale,
                                              spec.seed + HELDOUT_SEED_OFFSET))


def out_dir(cfg: ExperimentConfig, *parts) -> Path:
    p = Path(cfg.out, *parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_rows(path: Path, rows: list[dict], columns, fmt: str) -> Path:
    """Write ``rows`` as CSV or JSON (the suffix follows ``fmt``)."""
    path = path.with_suffix("." + fmt)
    if fmt == "json":
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) for k in columns})
    else:
        raise ParameterError(f"unknown output format {fmt!r}")
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_gen_data(cfg: ExperimentConfig) -> list[Path]:
    if cfg.data.synthetic is None:
        raise ParameterError("gen-data needs a synthetic data spec")
    d = out_dir(cfg)
    paths = [d / "data.ccfs", d / "heldout.ccfs"]
    save_features(load_source(cfg.data), paths[0])
    save_features(load_source(heldout_source(cfg)), paths[1])
    return paths


# ---------------------------------------------------------------------------
# Clustering


def cluster_features(cfg: ExperimentConfig, fs: FeatureSet, C: int, seed: int | None = None,
                     method: str | None = None):
    """Run the configured clustering; returns ``(assignment, temi_model or None)``."""
    method = method or cfg.method
    seed = cfg.seed if seed is None else seed
    if method == "labels":
        if fs.labels is None:
            raise DataError("method 'labels' needs labelled data")
        return ClusterAssignment.from_assignments(fs.labels, max(C, fs.num_classes), "labels"), None
    if method == "pseudo":
        if cfg.prototypes is None:
            raise ParameterError("method 'pseudo' needs a prototypes file")
        protos = load_features(cfg.prototypes).features
        return pseudo_label(fs, protos, cfg.temi.get("temperature", 0.01)), None
    if method == "none":
        return ClusterAssignment.from_assignments(np.zeros(fs.n, np.int64), 1, "labels"), None
    norm = l2_normalize(fs)
    if method == "kmeans":
        return kmeans_fit(norm, C, seed=seed), None
    tc = cfg.temi_config(C, fs.n, seed)
    model, _ = temi_fit(norm, mine_knn(norm, tc.m), tc)
    return temi_assign(model, norm), model


def assignment_path(cfg: ExperimentConfig, C: int, method: str | None = None) -> Path:
    return Path(cfg.out, "cluster", f"assign_{method or cfg.method}_C{C}.json")


def cmd_cluster(cfg: ExperimentConfig, fmt: str = "json") -> list[dict]:
    cfg.validate_paths()
    if cfg.method == "none":
        raise ParameterError("method 'none' has nothing to cluster")
    fs = load_source(cfg.data)
    d = out_dir(cfg, "cluster")
    rows = []
    for C in cfg.C:
        a, model = cluster_features(cfg, fs, C)
        a.save(assignment_path(cfg, C))
        if model is not None:
            model.save(d / f"temi_C{C}.cctm")
        row = {"method": a.method, "C": a.C, "utilized": a.utilized, "r_C": a.utilized / a.C,
               "anmi": None, "accuracy": None}
        if fs.labels is not None:
            row["anmi"] = anmi(a, fs.labels)
            row["accuracy"] = cluster_accuracy(a, fs.labels)
        rows.append(row)
    write_rows(d / "report", rows, ("method", "C", "utilized", "r_C", "anmi", "accuracy"), fmt)
    return rows


# ---------------------------------------------------------------------------
# Bounds


def cmd_bound(cfg: ExperimentConfig, timing: bool = False, log=None):
    """Upper bound search (and the gamma = 1 lower bound when ``bound.C_big`` is set)."""
    cfg.validate_paths()
    fs = l2_normalize(load_source(cfg.data))
    bc = cfg.bound_config(fs.n)
    neighbors = mine_knn(fs, bc.temi.m)
    report = find_upper_bound(fs, neighbors, bc, log=log)
    if cfg.bound.get("C_big"):
        report.C_lower = find_lower_bound(fs, neighbors, int(cfg.bound["C_big"]), bc)
    d = out_dir(cfg, "bound")
    report.save(d / "report.json", wall_time=timing)
    report.write_csv(d / "bound.csv", wall_time=timing)
    return report


# ---------------------------------------------------------------------------
# Diffusion training


def sigma_data_for(cfg: ExperimentConfig, x: np.ndarray) -> float:
    if cfg.model.sigma_data is not None:
        return float(cfg.model.sigma_data)
    return float(np.sqrt(x.var(axis=0).mean()))


def training_conditions(cfg: ExperimentConfig, fs: FeatureSet, C: int, source: str,
                        assignment: ClusterAssignment | None = None):
    """``(tag, num_conditions, per-sample conditions, q)`` for one training run."""
    if source == "none":
        return "uncond", 0, np.zeros(fs.n, np.int64), None
    if source == "labels":
        if fs.labels is None:
            raise DataError("condition_source 'labels' needs labelled data")
        a = ClusterAssignment.from_assignments(fs.labels, fs.num_classes, "labels")
        return "labels", a.C, a.assignments, a.q
    if assignment is None:
        path = assignment_path(cfg, C)
        if not path.exists():
            raise DataError(f"{path}: assignment file missing; run 'cluster' first")
        assignment = ClusterAssignment.load(path)
    if assignment.n != fs.n:
        raise DataError(f"assignment covers {assignment.n} samples, data has {fs.n}")
    return f"{assignment.method}_C{assignment.C}", assignment.C, assignment.assignments, assignment.q


def train_model(cfg: ExperimentConfig, fs: FeatureSet, num_conditions: int, conditions, q,
                seed: int, on_milestone=None, ckpt_dir: Path | None = None) -> DiffusionTrainer:
    """Train one diffusion model, saving a checkpoint at each milestone when ``ckpt_dir`` is set."""
    x = fs.features.astype(np.float64)
    model = DiffusionModel.create(fs.dim, num_conditions, sigma_data_for(cfg, x),
                                  cfg.model.hidden, cfg.model.depth, cfg.model.n_freq, seed=seed)
    trainer = DiffusionTrainer(model, x, conditions, cfg.train_config(seed), cfg.schedule)
    trainer.q = None if q is None else [float(v) for v in q]
    rows = []

    def milestone(tr, k):
        if ckpt_dir is not None:
            path = ckpt_dir / f"ckpt_{k:02d}.ccdm"
            save_trainer(tr, path)
            rows.append({"milestone": k, "samples_seen": tr.samples_seen, "path": path.name})
        if on_milestone is not None:
            on_milestone(tr, k)

    trainer.run(milestone)
    if ckpt_dir is not None:
        write_rows(ckpt_dir / "checkpoints", rows, ("milestone", "samples_seen", "path"), "csv")
        write_rows(ckpt_dir / "loss", [{"samples_seen": s, "loss": l} for s, l in trainer.curve],
                   ("samples_seen", "loss"), "csv")
    return trainer


def save_trainer(tr: DiffusionTrainer, path: Path) -> None:
    tr.save(path)
    # q travels in a sidecar so checkpoints stay self-describing for sampling
    Path(str(path) + ".json").write_text(json.dumps(
        {"q": getattr(tr, "q", None), "samples_seen": tr.samples_seen,
         "num_conditions": tr.model.num_conditions}, sort_keys=True) + "\n")


def checkpoint_meta(path) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise DataError(f"{side}: checkpoint sidecar missing")
    return json.loads(side.read_text())


def cmd_train(cfg: ExperimentConfig) -> list[Path]:
    cfg.validate_paths()
    fs = load_source(cfg.data)
    source = cfg.train.condition_source
    Cs = cfg.C if source == "cluster" else cfg.C[:1]
    dirs = []
    for C in Cs:
        tag, nc, conds, q = training_conditions(cfg, fs, C, source)
        d = out_dir(cfg, "train", tag)
        train_model(cfg, fs, nc, conds, q, cfg.seed, ckpt_dir=d)
        dirs.append(d)
    return dirs


def cmd_resume(cfg: ExperimentConfig, checkpoint) -> DiffusionTrainer:
    """Continue a run from ``checkpoint`` to its configured ``M_img``."""
    fs = load_source(cfg.data)
    meta = checkpoint_meta(checkpoint)
    source = cfg.train.condition_source
    nc = meta["num_conditions"]
    _, _, conds, _ = training_conditions(cfg, fs, nc, source if nc else "none")
    tr = DiffusionTrainer.resume(checkpoint, fs.features.astype(np.float64), conds)
    tr.q = meta["q"]
    d = Path(checkpoint).parent
    marks = tr.cfg.milestone_samples()

    def milestone(t, k):
        save_trainer(t, d / f"ckpt_{k:02d}.ccdm")

    tr.run(milestone)
    assert tr.samples_seen >= marks[-1] - tr.cfg.batch_size
    return tr


# ---------------------------------------------------------------------------
# Sampling


def draw_samples(model: DiffusionModel, q, n: int, cfg: ExperimentConfig, seed,
                 noise_seed: int | None = None, uniform: bool | None = None):
    """``(samples, conditions, x0)`` with conditions and initial noise on separate streams."""
    if uniform is None:
        uniform = cfg.sampling.condition_distribution == "uniform"
    base = np.atleast_1d(seed if noise_seed is None else noise_seed).tolist()
    cond_rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 11])
    noise_rng = np.random.default_rng([*base, 12])
    if model.num_conditions == 0:
        conds = np.full(n, model.unconditional_id, dtype=np.int64)
    else:
        conds = sample_conditions(np.asarray(q), n, cond_rng, uniform=uniform)
    x0 = cfg.schedule.sigma_max * noise_rng.standard_normal((n, model.data_dim))
    x = heun_sample(model, None, conds, cfg.schedule, x0=x0, solver=cfg.sampling.solver)
    return x, conds, x0


def cmd_sample(cfg: ExperimentConfig, checkpoint, out=None, noise_seed: int | None = None,
               n: int | None = None, dump_noise: bool = False) -> Path:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise DataError(f"{checkpoint}: checkpoint not found")
    model = DiffusionModel.load(checkpoint)
    meta = checkpoint_meta(checkpoint)
    n = cfg.sampling.n_samples if n is None else n
    x, conds, x0 = draw_samples(model, meta["q"], n, cfg, cfg.seed, noise_seed)
    path = Path(out) if out else out_dir(cfg, "samples") / f"{checkpoint.parent.name}_{checkpoint.stem}.ccfs"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_feature_array(path, x)
    side = {"conditions": conds.tolist(), "num_conditions": model.num_conditions,
            "distribution": cfg.sampling.condition_distribution, "q": meta["q"],
            "noise_seed": noise_seed, "seed": cfg.seed, "samples_seen": meta["samples_seen"],
            "checkpoint": checkpoint.name}
    Path(str(path.with_suffix("")) + ".conds.json").write_text(json.dumps(side, sort_keys=True) + "\n")
    if dump_noise:
        write_feature_array(str(path.with_suffix("")) + ".x0.ccfs", x0)
    return path


# ---------------------------------------------------------------------------
# Evaluation


def _read_samples(path) -> tuple[np.ndarray, dict]:
    x, _ = read_feature_array(path)
    side = Path(str(Path(path).with_suffix("")) + ".conds.json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return x.astype(np.float64), meta


def cmd_eval(cfg: ExperimentConfig, samples, reference, uncond=None, train=None,
             temi_model=None, fmt: str = "csv", msp_k: int = 16) -> list[dict]:
    """One metrics row per sample file."""
    ref, _ = _read_samples(reference)
    ref_stats = gaussian_stats(ref)
    u_stats = None
    if uncond is not None:
        u, _ = _read_samples(uncond)
        _check_dims(u, ref, uncond, reference)
        u_stats = gaussian_stats(u)
    train_x = None if train is None else _read_samples(train)[0]
    tm = None if temi_model is None else TemiModel.load(temi_model)
    d = out_dir(cfg, "eval")
    rows = []
    for path in samples:
        x, meta = _read_samples(path)
        _check_dims(x, ref, path, reference)
        run_id = Path(path).stem
        row = {"run_id": run_id, "C": meta.get("num_conditions"),
               "samples_seen": meta.get("samples_seen"), "frechet": None, "ufid": None,
               "auroc": None, "anmi": None, "accuracy": None}
        if x.shape[0] >= 2:
            s = gaussian_stats(x)
            if "frechet" in cfg.metrics:
                row["frechet"] = frechet_distance(s, ref_stats)
            if u_stats is not None:
                row["ufid"] = frechet_distance(s, u_stats)
        if train_x is not None and "auroc" in cfg.metrics and x.shape[0]:
            _check_dims(x, train_x, path, train)
            row["auroc"] = nn_auroc(x, train_x, ref)
        if tm is not None and x.shape[0]:
            gen = l2_normalize(FeatureSet(x))
            conds = np.asarray(meta.get("conditions", []))
            if conds.size == x.shape[0] and meta.get("num_conditions"):
                a = temi_assign(tm, gen)
                row["anmi"] = anmi(a, conds)
                row["accuracy"] = cluster_accuracy(a, conds)
            conf = msp_confidence(tm, gen)
            order = np.argsort(-conf, kind="stable")
            k = min(msp_k, conf.size)
            (d / f"msp_{run_id}.json").write_text(json.dumps(
                {"highest": order[:k].tolist(), "lowest": order[::-1][:k].tolist(),
                 "highest_conf": conf[order[:k]].tolist(),
                 "lowest_conf": conf[order[::-1][:k]].tolist()}, sort_keys=True) + "\n")
        rows.append(row)
    write_rows(d / "eval", rows, EVAL_CSV_COLUMNS, fmt)
    cv = best_C_per_milestone(rows)
    if cv:
        (d / "c_v.json").write_text(json.dumps(cv, indent=2, sort_keys=True) + "\n")
    return rows


def best_C_per_milestone(rows) -> list[dict]:
    """C_V per ``samples_seen``: the swept C with the lowest Fréchet distance (first wins ties)."""
    best: dict = {}
    for r in rows:
        if r["frechet"] is None or r["C"] is None:
            continue
        key = r["samples_seen"]
        if key not in best or r["frechet"] < best[key]["frechet"]:
            best[key] = {"samples_seen": key, "C_V": r["C"], "frechet": r["frechet"],
                         "run_id": r["run_id"]}
    return [best[k] for k in sorted(best, key=lambda v: (v is None, v))]


def _check_dims(a: np.ndarray, b: np.ndarray, pa, pb) -> None:
    if a.shape[1] != b.shape[1]:
        raise DataError(f"dimension mismatch: {pa} has D={a.shape[1]}, {pb} has D={b.shape[1]}")
