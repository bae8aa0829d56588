import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from clustercond.dataset import read_feature_array, write_feature_array
from clustercond.errors import ParameterError
from clustercond.kmeans import ClusterAssignment
from clustercond.pipeline.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from clustercond.pipeline.commands import best_C_per_milestone
from clustercond.pipeline.config import ExperimentConfig

TINY = {
    "data": {"synthetic": {"modes": 4, "dim": 2, "samples_per_mode": [64],
                           "mode_separation": 2.0, "mode_scale": 0.1, "seed": 0}},
    "method": "kmeans", "C": [4],
    "train": {"M_img": 4096, "batch_size": 128, "milestones": 4},
    "model": {"hidden": 32, "depth": 2},
    "sampling": {"n_samples": 200, "n_sets": 2},
    "temi": {"epochs": 5}, "bound": {"probe_epochs": 5, "max_doublings": 4},
    "metrics": ["frechet", "ufid", "auroc", "anmi", "accuracy"],
    "seeds": [0, 1],
}


def write_config(tmp_path, name="cfg.json", **over) -> tuple[str, Path]:
    d = json.loads(json.dumps(TINY))
    d.update(over)
    d.setdefault("out", str(tmp_path / "run"))
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p), Path(d["out"])


def cli(*argv) -> int:
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:  # argparse usage errors
        return e.code


def tree_hashes(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def full_flow(cfg, out):
    assert cli("gen-data", "--config", cfg) == EXIT_OK
    assert cli("cluster", "--config", cfg) == EXIT_OK
    assert cli("bound", "--config", cfg) == EXIT_OK
    assert cli("train", "--config", cfg) == EXIT_OK
    ck = out / "train" / "kmeans_C4" / "ckpt_03.ccdm"
    assert cli("sample", "--config", cfg, ck, "--noise-seed", 5, "--dump-noise") == EXIT_OK
    s = out / "samples" / "kmeans_C4_ckpt_03.ccfs"
    assert cli("eval", "--config", cfg, s, "--reference", out / "heldout.ccfs",
               "--train-data", out / "data.ccfs") == EXIT_OK


# -- configuration ---------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY | {"out": "x"})
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert ExperimentConfig.from_dict(back.to_dict()).dumps() == cfg.dumps()


@pytest.mark.parametrize("bad", [{"colour": 1}, {"train": {"epochs": 3}}, {"temi": {"gama": 1}},
                                 {"method": "dbscan"}, {"metrics": ["fid"]}])
def test_config_rejects_unknown_keys_and_values(bad):
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict(TINY | bad)


def test_replace_keeps_other_fields():
    cfg = ExperimentConfig.from_dict(TINY)
    r = cfg.replace(seed=7)
    assert r.seed == 7 and r.to_dict() | {"seed": 0} == cfg.to_dict()


# -- exit codes ------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    cfg, out = write_config(tmp_path)
    assert cli("gen-data", "--config", cfg) == EXIT_OK
    assert cli("gen-data", "--bogus-flag") == EXIT_USAGE
    assert cli("frobnicate") == EXIT_USAGE
    assert cli("reproduce", "no_such_trend", "--config", cfg) == EXIT_USAGE
    bad, _ = write_config(tmp_path, "bad.json", colour=3)
    assert cli("gen-data", "--config", bad) == EXIT_USAGE
    assert cli("gen-data", "--config", tmp_path / "missing.json") == EXIT_DATA
    assert cli("sample", "--config", cfg, tmp_path / "nope.ccdm") == EXIT_DATA
    assert cli("eval", "--config", cfg, tmp_path / "nope.ccfs", "--reference", out / "heldout.ccfs") == EXIT_DATA
    assert cli("train", "--config", cfg) == EXIT_DATA  # no assignment file yet
    nb, _ = write_config(tmp_path, "nb.json", bound={"probe_epochs": 3, "max_doublings": 0})
    assert cli("bound", "--config", nb) == EXIT_NUMERICAL
    err = capsys.readouterr().err
    assert "bound not found" in err and "assignment file missing" in err


def test_dimension_mismatch_is_a_data_error(tmp_path):
    cfg, out = write_config(tmp_path)
    write_feature_array(tmp_path / "a.ccfs", np.zeros((4, 2)))
    write_feature_array(tmp_path / "b.ccfs", np.zeros((4, 3)))
    assert cli("eval", "--config", cfg, tmp_path / "a.ccfs", "--reference", tmp_path / "b.ccfs") == EXIT_DATA


# -- commands --------------------------------------------------------------------


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("flow")
    cfg, out = write_config(tmp)
    full_flow(cfg, out)
    return cfg, out


def test_flow_artifacts(flow):
    cfg, out = flow
    for rel in ("data.ccfs", "heldout.ccfs", "cluster/assign_kmeans_C4.json", "cluster/report.csv",
                "bound/report.json", "bound/bound.csv", "train/kmeans_C4/loss.csv",
                "train/kmeans_C4/checkpoints.csv", "eval/eval.csv", "eval/c_v.json", "config.json"):
        assert (out / rel).is_file(), rel
    rows = (out / "train/kmeans_C4/checkpoints.csv").read_text().splitlines()[1:]
    seen = [int(r.split(",")[1]) for r in rows]
    assert len(seen) == 4 and seen[-1] == 4096 and all(s <= m for s, m in zip(seen, (1024, 2048, 3072, 4096)))
    a = ClusterAssignment.load(out / "cluster/assign_kmeans_C4.json")
    assert a.C == 4 and a.n == 256


def test_commands_are_deterministic(flow, tmp_path):
    cfg, out = flow
    first = tree_hashes(out)
    shutil.rmtree(out)
    full_flow(cfg, out)
    assert tree_hashes(out) == first


def test_shared_noise_across_models(flow, tmp_path):
    cfg, out = flow
    d = out / "train" / "kmeans_C4"
    paths = []
    for ck in ("ckpt_01.ccdm", "ckpt_03.ccdm"):
        p = tmp_path / f"{ck}.ccfs"
        assert cli("sample", "--config", cfg, d / ck, "--noise-seed", 9, "--dump-noise",
                   "--output", p, "-n", 50) == EXIT_OK
        paths.append(p)
    x0 = [read_feature_array(str(p.with_suffix("")) + ".x0.ccfs")[0] for p in paths]
    assert x0[0].tobytes() == x0[1].tobytes()
    assert read_feature_array(paths[0])[0].tobytes() != read_feature_array(paths[1])[0].tobytes()
    side = json.loads((tmp_path / "ckpt_01.ccdm.conds.json").read_text())
    assert side["noise_seed"] == 9 and len(side["conditions"]) == 50


def test_zero_samples_give_an_empty_valid_file(flow, tmp_path):
    cfg, out = flow
    p = tmp_path / "empty.ccfs"
    assert cli("sample", "--config", cfg, out / "train/kmeans_C4/ckpt_03.ccdm", "-n", 0,
               "--output", p) == EXIT_OK
    x, labels = read_feature_array(p)
    assert x.shape == (0, 2) and labels is None


def test_resume_is_bitwise(flow, tmp_path):
    cfg, out = flow
    d = tmp_path / "kmeans_C4"
    shutil.copytree(out / "train/kmeans_C4", d)
    for k in (2, 3):
        (d / f"ckpt_{k:02d}.ccdm").unlink()
    assert cli("train", "--config", cfg, "--resume", d / "ckpt_01.ccdm") == EXIT_OK
    for k in (2, 3):
        name = f"ckpt_{k:02d}.ccdm"
        assert (d / name).read_bytes() == (out / "train/kmeans_C4" / name).read_bytes()


def test_eval_identical_files_and_inputs_untouched(flow, tmp_path):
    cfg, out = flow
    ref = out / "heldout.ccfs"
    before = hashlib.sha256(ref.read_bytes()).hexdigest()
    cp = tmp_path / "same.ccfs"
    shutil.copy(ref, cp)
    assert cli("eval", "--config", cfg, cp, "--reference", ref, "--format", "json") == EXIT_OK
    rows = json.loads((out / "eval/eval.json").read_text())
    assert rows[0]["frechet"] == pytest.approx(0.0, abs=1e-8)
    assert hashlib.sha256(ref.read_bytes()).hexdigest() == before


def test_eval_sweep_writes_one_row_per_file(flow, tmp_path):
    cfg, out = flow
    rng = np.random.default_rng(0)
    files = []
    for C in (2, 4, 8):
        for seen in (1024, 2048):
            p = tmp_path / f"C{C}_{seen}.ccfs"
            write_feature_array(p, rng.standard_normal((100, 2)) * (1 + 0.1 * C))
            Path(str(p.with_suffix("")) + ".conds.json").write_text(
                json.dumps({"num_conditions": C, "samples_seen": seen}))
            files.append(p)
    assert cli("eval", "--config", cfg, *files, "--reference", out / "heldout.ccfs",
               "--format", "json") == EXIT_OK
    rows = json.loads((out / "eval/eval.json").read_text())
    assert len(rows) == 6
    cv = json.loads((out / "eval/c_v.json").read_text())
    assert [r["samples_seen"] for r in cv] == [1024, 2048]
    for r in cv:
        mine = [x for x in rows if x["samples_seen"] == r["samples_seen"]]
        assert r["frechet"] == min(x["frechet"] for x in mine)


def test_best_C_per_milestone_tie_and_missing():
    rows = [{"run_id": "a", "C": 2, "samples_seen": 10, "frechet": 1.0},
            {"run_id": "b", "C": 4, "samples_seen": 10, "frechet": 1.0},
            {"run_id": "c", "C": 8, "samples_seen": 10, "frechet": None}]
    assert best_C_per_milestone(rows) == [{"samples_seen": 10, "C_V": 2, "frechet": 1.0, "run_id": "a"}]


def test_cluster_with_labels_and_single_cluster(tmp_path):
    cfg, out = write_config(tmp_path, method="labels", C=[4])
    assert cli("cluster", "--config", cfg, "--format", "json") == EXIT_OK
    rows = json.loads((out / "cluster/report.json").read_text())
    assert rows[0]["anmi"] == pytest.approx(1.0) and rows[0]["accuracy"] == 1.0
    cfg1, out1 = write_config(tmp_path, "one.json", C=[1], out=str(tmp_path / "one"))
    assert cli("cluster", "--config", cfg1, "--format", "json") == EXIT_OK
    a = ClusterAssignment.load(out1 / "cluster/assign_kmeans_C1.json")
    assert a.utilized == 1 and np.all(a.assignments == 0)


def test_seed_override_changes_outputs(tmp_path):
    cfg, out = write_config(tmp_path, method="temi", C=[4])
    assert cli("cluster", "--config", cfg) == EXIT_OK
    a = (out / "cluster/assign_temi_C4.json").read_bytes()
    assert cli("cluster", "--config", cfg, "--seed", 3) == EXIT_OK
    assert (out / "cluster/assign_temi_C4.json").read_bytes() != a
