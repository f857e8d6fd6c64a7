import json

import numpy as np
import pytest

from driftscope.checkpoint import Checkpoint, checkpoint_path, read_direction, write_checkpoint
from driftscope.cli import main

TINY = ["--layers", "2", "--d-model", "16", "--heads", "2", "--d-ff", "32", "--steps", "40", "--ckpt-every", "4",
        "--batch-size", "4", "--eval-ood", "16", "--seed", "5"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--out", str(out), *TINY]) == 0
    return out


def _csv_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# flags: ")
    return [line.split(",") for line in lines[2:]], lines[1].split(",")


def test_train_outputs(run):
    assert len(list(run.glob("ckpt_*.dsck"))) == 11
    m = json.loads((run / "manifest.json").read_text())
    assert m["run_id"] == "run" and len(m["checkpoints"]) == 11
    import hashlib
    assert m["config_hash"] == hashlib.sha256((run / "config.json").read_bytes()).hexdigest()
    assert m["outputs"]["eval.csv"]["argv"][:2] == ["driftscope", "train"]


def test_train_refuses_nonempty(run, capsys):
    assert main(["train", "--out", str(run), *TINY]) == 1
    assert "--force" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train"],
    ["train", "--out", "x", "--optimizer", "adamw", "--momentum", "0.9"],
    ["train", "--out", "x", "--optimizer", "sgd-momentum", "--beta2", "0.9"],
    ["rayleigh", "--run", "x", "--dir", "v.vec", "--K", "0"],
    ["analyze", "powerlaw", "--run", "x", "--window", "5,1"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 2


def test_sgd_momentum_flag_mapping(tmp_path):
    out = tmp_path / "sgd"
    argv = ["train", "--out", str(out), "--optimizer", "sgd", "--momentum", "0.9", "--lr", "1e-2", "--wd", "0.05",
            *TINY[:-4], "--steps", "4", "--ckpt-every", "4"]
    assert main(argv) == 0
    optim = json.loads((out / "config.json").read_text())["optim"]
    assert optim["kind"] == "sgd-momentum" and optim["decay"] == "l2" and optim["momentum"] == 0.9


def test_analyze_suite(run):
    r = str(run)
    assert main(["analyze", "pca", "--run", r, "--anchor", "0", "--row-normalize"]) == 0
    summary = json.loads((run / "analysis/pca.json").read_text())
    assert summary["flags"]["row_normalize"] is True
    assert {"rho1", "k95", "k99"} <= set(summary["result"])
    v = read_direction(run / "analysis/pca_backbone.vec")
    assert v.size == 2 * (4 * 16 * 16 + 2 * 16 * 32)

    assert main(["analyze", "rolling", "--run", r, "--width", "4", "--row-normalize"]) == 0
    assert main(["analyze", "phases", "--run", r, "--early", "0,20", "--late", "20,40", "--width", "4"]) == 0
    assert main(["analyze", "decompose", "--run", r]) == 0
    rows, header = _csv_rows(run / "analysis/decompose.csv")
    assert header == ["step", "a", "r_norm", "f_b"] and len(rows) == 10
    assert main(["analyze", "powerlaw", "--run", r, "--series", "a", "--window", "4,40"]) == 0
    rows, header = _csv_rows(run / "analysis/powerlaw_a.csv")
    assert header == ["window_lo", "window_hi", "gamma", "C", "R2", "n"]
    assert main(["analyze", "align", "--run", r, "--grad-batches", "2"]) == 0
    assert main(["analyze", "switch", "--run", r, "--peaks", "8", "--troughs", "16"]) == 0
    assert main(["analyze", "pca", "--run", r, "--anchor", "0", "--block", "1"]) == 0
    assert (run / "analysis/pca_block1.json").exists()
    m = json.loads((run / "manifest.json").read_text())
    for rel, entry in m["outputs"].items():
        assert (run / rel).exists()
        assert entry["argv"][0] == "driftscope"


def test_analysis_errors(run, tmp_path):
    r = str(run)
    assert main(["analyze", "pca", "--run", r, "--anchor", "3", "--tag", "bad"]) == 1
    assert main(["analyze", "powerlaw", "--run", r, "--window", "100,200", "--tag", "bad"]) == 1
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["analyze", "pca", "--run", str(empty), "--anchor", "0"]) == 1


def test_outputs_need_force_and_are_reproducible(run):
    r = str(run)
    argv = ["analyze", "rolling", "--run", r, "--width", "4", "--tag", "rep"]
    assert main(argv) == 0
    first = (run / "analysis/rolling_rep.csv").read_bytes()
    assert main(argv) == 1
    assert main(argv + ["--force"]) == 0
    assert (run / "analysis/rolling_rep.csv").read_bytes() == first


def test_rayleigh(run, tmp_path):
    r = str(run)
    vec = run / "analysis/pca_backbone.vec"
    if not vec.exists():
        assert main(["analyze", "pca", "--run", r, "--anchor", "0", "--tag", "ray"]) == 0
        vec = run / "analysis/pca_ray_backbone.vec"
    argv = ["rayleigh", "--run", r, "--dir", str(vec), "--K", "3", "--M", "2", "--seed", "7", "--steps", "0,40",
            "--tag", "t"]
    assert main(argv) == 0
    out = run / "analysis/rayleigh_t.csv"
    rows, header = _csv_rows(out)
    assert header == ["step", "direction_label", "q", "alpha", "K", "M", "seed"] and len(rows) == 2
    first = out.read_bytes()
    assert main(argv + ["--force"]) == 0
    assert out.read_bytes() == first
    bad = tmp_path / "bad.vec"
    from driftscope.checkpoint import write_direction
    write_direction(np.ones(5), bad)
    assert main(["rayleigh", "--run", r, "--dir", str(bad), "--steps", "0", "--tag", "bad"]) == 1


def test_reheat_cli(run, tmp_path):
    out = tmp_path / "reheat"
    vec = tmp_path / "v.vec"
    from driftscope.checkpoint import write_direction
    write_direction(np.eye(2 * (4 * 16 * 16 + 2 * 16 * 32))[0], vec)
    argv = ["reheat", "--from", str(checkpoint_path(run, 40)), "--out", str(out), "--lrs", "0,1e-3",
            "--lambda", "4.0", "--steps", "4", "--eval-every", "2", "--backbone", str(vec)]
    assert main(argv) == 0
    frozen = (out / "lr_0/eval.csv").read_text().splitlines()[1:]
    assert len({line.split(",")[3] for line in frozen}) == 1
    assert (out / "lr_0.001/track.csv").exists()
    assert main(["reheat", "--from", str(tmp_path / "nope.dsck"), "--out", str(out), "--lrs", "1e-3",
                 "--lambda", "4"]) == 1


def test_decompose_rank_one_run(tmp_path):
    run = tmp_path / "rank1"
    run.mkdir()
    u = np.random.default_rng(0).standard_normal(12)
    u /= np.linalg.norm(u)
    for s in range(6):
        write_checkpoint(Checkpoint(s * 10, {"blocks.0.mlp.w_up": (s * u).reshape(3, 4)}), checkpoint_path(run, s * 10))
    assert main(["analyze", "decompose", "--run", str(run), "--backbone", "global"]) == 0
    rows, _ = _csv_rows(run / "analysis/decompose.csv")
    fb = np.array([float(r[3]) for r in rows])
    assert np.all(np.abs(fb - 1) <= 1e-9)


def test_lock_blocks_concurrent_writer(run):
    from filelock import FileLock
    lock = FileLock(str(run / ".driftscope.lock"))
    with lock:
        assert main(["analyze", "decompose", "--run", str(run), "--tag", "locked"]) == 1


def test_correlate_synthetic_run(tmp_path):
    from driftscope.trainer.train import EvalRecord, write_eval_csv

    run = tmp_path / "syn"
    run.mkdir()
    rng = np.random.default_rng(1)
    pts = np.cumsum(rng.standard_normal((12, 12)), axis=0)
    recs = []
    for i, p in enumerate(pts):
        write_checkpoint(Checkpoint(i * 10, {"blocks.0.mlp.w_up": p.reshape(3, 4)}), checkpoint_path(run, i * 10))
        recs.append(EvalRecord(i * 10, 1.0, 0.5, 0.5 + 0.4 * np.sin(i), 2.0, 0.0))
    write_eval_csv(recs, run / "eval.csv")
    assert main(["analyze", "correlate", "--run", str(run), "--window", "10,110", "--window", "10,50"]) == 0
    rows, header = _csv_rows(run / "analysis/correlate.csv")
    assert header == ["window_lo", "window_hi", "r", "n"]
    assert [int(r[3]) for r in rows] == [11, 5]
    assert all(-1 <= float(r[2]) <= 1 for r in rows)
