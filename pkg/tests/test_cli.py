"""End-to-end CLI smoke run on a tiny configuration."""
import csv
import json
import os

import numpy as np
import pytest

from nsf.cli import load_config, run
from nsf.io import load_ply
from nsf.skeleton import Pose, save_pose_sequence

TINY = {
    "synth": {"n_train": 6, "n_heldout": 2, "n_keys": 3},
    "canon": {"points_per_frame": 300},
    "fusion": {"hidden": [32, 32], "n_steps": 60, "sphere_steps": 30},
    "nsf": {"mesh_resolution": 32, "feature_dim": 8, "pose_dim": 8},
    "train": {"epochs": 2, "points_per_step": 64},
    "finetune": {"frame_stride": 3, "epochs": 2},
    "refine": {"steps": 2},
}


def nsf(*args):
    return run([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", cfg, "--seed", 3]
    assert nsf("synth", *c, "--out", d / "data") == 0
    assert nsf("train-fusion", *c, "--data", d / "data", "--out", d / "fusion.nsf1") == 0
    assert nsf("train-nsf", *c, "--data", d / "data", "--fusion", d / "fusion.nsf1", "--log", d / "log.jsonl",
               "--out", d / "m.nsf1") == 0
    return d, c


def test_dataset_layout(work):
    d, _ = work
    man = json.loads((d / "data" / "manifest.json").read_text())
    assert man["subjects"] == ["s0", "s1", "s2"] and man["finetune_subject"] == "s2"
    for name in ("frame_0000.ply", "poses.json", "camera.json", "gt/frame_0007.ply"):
        assert (d / "data" / "s0" / name).exists()


def test_training_log_is_json_lines(work):
    d, _ = work
    recs = [json.loads(line) for line in (d / "log.jsonl").read_text().splitlines()]
    assert recs and all({"epoch", "step", "total", "point"} <= set(r) for r in recs)


def test_extract_reconstruct_refine_eval(work, capsys):
    d, c = work
    assert nsf("extract", *c, "--ckpt", d / "fusion.nsf1", "--subject", "s0", "--res", 24, "--out", d / "f.ply") == 0
    assert load_ply(str(d / "f.ply")).n_faces > 0
    assert nsf("reconstruct", *c, "--ckpt", d / "m.nsf1", "--data", d / "data", "--subject", "s0", "--frame", 6,
               "--out", d / "r.ply") == 0
    assert nsf("refine", *c, "--ckpt", d / "m.nsf1", "--data", d / "data", "--subject", "s0", "--frame", 6,
               "--out", d / "rf.ply") == 0
    assert nsf("eval", *c, "--ckpt", d / "m.nsf1", "--data", d / "data", "--subject", "s0",
               "--out", d / "e.csv") == 0
    rows = list(csv.reader(open(d / "e.csv")))
    assert rows[0] == ["frame_id", "cd_cm", "nc", "iou"]
    assert [r[0] for r in rows[1:]] == ["6", "7", "mean"]
    out = capsys.readouterr().out
    assert "objective" in out and "CD" in out


def test_finetune_adds_subject(work):
    d, c = work
    assert nsf("finetune", *c, "--ckpt", d / "m.nsf1", "--data", d / "data", "--out", d / "ft.nsf1") == 0
    assert nsf("reconstruct", *c, "--ckpt", d / "ft.nsf1", "--data", d / "data", "--subject", "s2", "--frame", 7,
               "--out", d / "r2.ply") == 0


def test_animate_copies_faces_and_extracts_once(work, capsys):
    d, c = work
    rng = np.random.default_rng(0)
    skel_path = d / "data" / "s0" / "poses.json"
    from nsf.skeleton import load_pose_sequence
    skel, _, _ = load_pose_sequence(str(skel_path))
    poses = [Pose(rng.uniform(-0.4, 0.4, (5, 3))) for _ in range(5)]
    save_pose_sequence(str(d / "dance.json"), skel, poses)
    assert nsf("animate", *c, "--ckpt", d / "m.nsf1", "--subject", "s0", "--poses", d / "dance.json",
               "--res", 40, "--out", d / "anim") == 0
    assert "1 extraction(s)" in capsys.readouterr().out
    faces = [load_ply(str(d / "anim" / f"frame_{t:04d}.ply")).faces for t in range(5)]
    assert all(np.array_equal(faces[0], f) for f in faces[1:])
    # second run reads the cached canonical mesh
    assert nsf("animate", *c, "--ckpt", d / "m.nsf1", "--subject", "s0", "--poses", d / "dance.json",
               "--res", 40, "--out", d / "anim") == 0
    assert "0 extraction(s)" in capsys.readouterr().out


def test_bench_features_table(capsys):
    assert nsf("bench", "--features") == 0
    out = capsys.readouterr().out
    for s in ("262,144", "49,152", "6,890", "97.4%", "86.0%"):
        assert s in out


def test_bench_timing_runs(work, capsys):
    d, c = work
    assert nsf("bench", *c, "--ckpt", d / "m.nsf1", "--frames", 1, 3, "--res", 24) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("F=")]
    assert len(lines) == 2


def test_seeded_runs_are_byte_identical(work, tmp_path):
    d, c = work
    for k in (1, 2):
        assert nsf("train-nsf", *c, "--data", d / "data", "--fusion", d / "fusion.nsf1",
                   "--set", "train.epochs=1", "--out", tmp_path / f"m{k}.nsf1") == 0
        assert nsf("reconstruct", *c, "--ckpt", tmp_path / f"m{k}.nsf1", "--data", d / "data", "--subject", "s1",
                   "--frame", 2, "--out", tmp_path / f"r{k}.ply") == 0
    assert (tmp_path / "m1.nsf1").read_bytes() == (tmp_path / "m2.nsf1").read_bytes()
    assert (tmp_path / "r1.ply").read_bytes() == (tmp_path / "r2.ply").read_bytes()


@pytest.mark.parametrize("argv", [
    ["reconstruct", "--ckpt", "/nonexistent.nsf1", "--data", "/nonexistent", "--subject", "s0", "--frame", "0",
     "--out", "x.ply"],
    ["bench"],
    ["extract", "--ckpt", "x"],
    ["no-such-command"],
    ["eval", "--set", "oops", "--ckpt", "a", "--data", "b", "--subject", "s", "--out", "c"],
])
def test_user_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_subject_exit_1(work):
    d, c = work
    assert nsf("reconstruct", *c, "--ckpt", d / "m.nsf1", "--data", d / "data", "--subject", "zz", "--frame", 0,
               "--out", d / "x.ply") == 1


def test_internal_error_exit_2(monkeypatch):
    import nsf.bench

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(nsf.bench, "features_bench", boom)
    assert run(["bench", "--features"]) == 2


def test_config_merging(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 5}, "extra": 1}))
    cfg = load_config(str(p), ["train.w_edr=0.5", "nsf.mesh_resolution=128"], seed=9)
    assert cfg["train"] == {"epochs": 5, "w_edr": 0.5}
    assert cfg["nsf"]["mesh_resolution"] == 128 and cfg["nsf"]["feature_dim"] == 64
    assert cfg["seed"] == 9 and cfg["extra"] == 1


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "train-nsf" in capsys.readouterr().out
