import json

import numpy as np
import pytest

from voxelsl import io
from voxelsl.cli import run_pipeline


def run(*argv):
    return run_pipeline([str(a) for a in argv])


def test_no_arguments_is_usage_error(capsys):
    assert run_pipeline([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_bad_flags():
    assert run("frobnicate") == 1
    assert run("gen-patterns") == 1
    assert run("gen-patterns", "--out", "x", "--count", "0") == 1


def test_eval_size_mismatch_is_data_error(tmp_path, capsys):
    io.write_pfm(tmp_path / "a.pfm", np.ones((4, 5), np.float32))
    io.write_pfm(tmp_path / "b.pfm", np.ones((5, 4), np.float32))
    assert run("eval", "--est", tmp_path / "a.pfm", "--gt", tmp_path / "b.pfm", "--fx", 1, "--baseline", 1) == 2
    assert "estimate 5x4 vs ground truth 4x5" in capsys.readouterr().err


def test_missing_inputs_are_data_errors(tmp_path):
    assert run("simulate", "--scene", "plane", "--patterns", tmp_path / "nope", "--out", tmp_path / "c") == 2
    (tmp_path / "x.pfm").write_bytes(b"garbage")
    assert run("export-depth-vis", "--input", tmp_path / "x.pfm", "--out", tmp_path / "v.png") == 2


def test_gen_patterns_manifest(tmp_path):
    assert run("gen-patterns", "--width", 60, "--height", 40, "--seed", 3, "--out", tmp_path) == 0
    m = json.loads((tmp_path / "patterns.json").read_text())
    assert [p["cell"] for p in m["patterns"]] == [20, 20, 10, 10, 5, 5]
    assert m["seed"] == 3
    for p in m["patterns"]:
        assert io.sha256_file(tmp_path / p["file"]) == p["sha256"]
        assert io.read_gray(tmp_path / p["file"]).shape == (40, 60)


def pipeline(root, cfg, seed=0):
    pats, caps = root / "pats", root / "caps"
    assert run("gen-patterns", "--width", 140, "--height", 151, "--out", pats) == 0
    assert run("simulate", "--scene", "plane", "--params", '{"depth": 1000}', "--patterns", pats,
               "--out", caps, "--config", cfg) == 0
    assert run("train", "--config", cfg, "--patterns", pats, "--captures", caps, "--out", root / "grid.ckpt",
               "--depth-out", root / "depth.pfm", "--log", root / "loss.csv", "--seed", seed,
               "--deterministic") == 0
    assert run("eval", "--est", root / "depth.pfm", "--gt", caps / "gt_depth.pfm", "--fx", 59.088,
               "--baseline", 209.39, "--out", root / "metrics.json") == 0
    return root


def test_full_pipeline(tmp_path, tiny_config):
    root = pipeline(tmp_path, tiny_config)
    caps = json.loads((root / "caps" / "captures.json").read_text())
    assert len(caps["captures"]) == 6 and caps["scene"]["kind"] == "plane"
    gt = io.read_pfm(root / "caps" / "gt_depth.pfm")
    assert gt.shape == (51, 64)
    metrics = json.loads((root / "metrics.json").read_text())
    assert {"mae_mm", "o(1)", "est_sha256"} <= set(metrics)
    rows = (root / "loss.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,photo") and len(rows) == 1 + 5
    assert io.read_checkpoint(root / "grid.ckpt").dims == (16, 16, 16)
    manifest = json.loads((root / "grid.ckpt.json").read_text())
    assert manifest["train"]["seed"] == 0
    assert run("export-depth-vis", "--input", root / "depth.pfm", "--out", root / "vis.png", "--depth",
               "--fx", 59.088, "--baseline", 209.39) == 0
    vis = io.read_gray(root / "vis.png")
    assert vis.shape == (51, 64) and vis.max() <= 1.0


def test_deterministic_runs_are_bitwise_identical(tmp_path, tiny_config):
    a = pipeline(tmp_path / "a", tiny_config, seed=4)
    b = pipeline(tmp_path / "b", tiny_config, seed=4)
    assert (a / "grid.ckpt").read_bytes() == (b / "grid.ckpt").read_bytes()
    ma = json.loads((a / "metrics.json").read_text())
    mb = json.loads((b / "metrics.json").read_text())
    assert ma == mb
