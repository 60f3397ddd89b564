import os
import subprocess
import sys

import numpy as np
import pytest

from splatprune.cli import EXIT_CODES, main
from splatprune.gaussians import ply_file_size, read_ply
from splatprune.images import read_float_dump
from splatprune.metrics import MetricReport

SPEC = "n_gaussians = 60\nn_cameras = 6\nimage_width = 20\nimage_height = 20\n"
TRAIN_CFG = ("prune.keep_fraction = 0.5\nencoder.feature_width = 16\nencoder.hidden = 16\n"
             "encoder.sh_reduced_dim = 4\nrefiner.feature_width = 16\nrefiner.blocks = 1 1\n"
             "refiner.heads = 2\nrefiner.knn_k = 4\nrefiner.ffn_hidden = 16\nrefiner.head_hidden = 16\n"
             "train.iterations = 3\ntrain.lr = 0.001\n")


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    (d / "spec.cfg").write_text(SPEC)
    assert run("synth", "--spec", d / "spec.cfg", "--out", d / "s", "--seed", 3) == 0
    return d / "s"


def test_synth_layout(scene):
    assert (scene / "scene.ply").exists() and (scene / "cameras.txt").exists()
    fds = sorted(p.name for p in (scene / "targets").glob("*.fd"))
    assert fds == [f"view_{i:03d}.fd" for i in range(6)]
    assert read_float_dump(scene / "targets" / "view_000.fd").shape == (20, 20, 3)


def test_keep_everything_is_byte_identical(scene, tmp_path):
    assert run("prune", "--in", scene / "scene.ply", "--keep-fraction", 1.0, "--out", tmp_path / "all.ply") == 0
    assert (tmp_path / "all.ply").read_bytes() == (scene / "scene.ply").read_bytes()


@pytest.mark.parametrize("fraction,kept", [(0.5, 30), (0.3, 18), (0.1, 6)])
def test_pruned_file_size_accounting(scene, tmp_path, fraction, kept):
    out = tmp_path / "p.ply"
    assert run("prune", "--in", scene / "scene.ply", "--keep-fraction", fraction, "--out", out) == 0
    assert len(read_ply(out)) == kept
    assert os.path.getsize(out) == ply_file_size(kept, 3)
    data = out.read_bytes()
    assert len(data) - data.index(b"end_header\n") - len(b"end_header\n") == kept * 62 * 4


def test_prune_report_and_summary(scene, tmp_path):
    assert run("prune", "--in", scene / "scene.ply", "--keep-count", 10, "--out", tmp_path / "p.ply",
               "--report", tmp_path / "r.csv", "--summary", tmp_path / "s.txt") == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    header = rows[0].split(",")
    sel = [r.split(",")[header.index("selected")] for r in rows[1:]]
    assert len(rows) == 61 and sel.count("1") == 10
    assert run("stats", "--in", scene / "scene.ply", "--selected", tmp_path / "r.csv", "--bins", 10,
               "--out", tmp_path / "h.csv", "--summary", tmp_path / "m.txt") == 0
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 1 + 2 * 10


def test_render_eval_roundtrip(scene, tmp_path):
    assert run("render", "--in", scene / "scene.ply", "--cameras", scene / "cameras.txt",
               "--out", tmp_path / "r", "--float-dump") == 0
    assert run("eval", "--renders", tmp_path / "r", "--targets", scene / "targets",
               "--report", tmp_path / "e.txt") == 0
    rep = MetricReport.from_text((tmp_path / "e.txt").read_text())
    assert rep.psnr == 99.0 and rep.ssim == 1.0 and len(rep.per_view) == 6


def test_render_test_split_only(scene, tmp_path):
    assert run("render", "--in", scene / "scene.ply", "--cameras", scene / "cameras.txt",
               "--out", tmp_path / "r", "--split", "test") == 0
    splits = [ln.split()[-1] for ln in (scene / "cameras.txt").read_text().splitlines()
              if ln.strip() and not ln.startswith("#")]
    assert len(list((tmp_path / "r").glob("*.png"))) == splits.count("test")


def test_train_refine_report(scene, tmp_path):
    (tmp_path / "t.cfg").write_text(TRAIN_CFG)
    ck = tmp_path / "m.ckpt"
    assert run("train", "--scenes", scene, "--config", tmp_path / "t.cfg", "--checkpoint", ck,
               "--log", tmp_path / "log.txt") == 0
    assert len((tmp_path / "log.txt").read_text().splitlines()) == 3
    assert run("prune", "--in", scene / "scene.ply", "--keep-fraction", 0.5, "--out", tmp_path / "p.ply") == 0
    assert run("refine", "--in", tmp_path / "p.ply", "--checkpoint", ck, "--out", tmp_path / "r.ply") == 0
    assert len(read_ply(tmp_path / "r.ply")) == 30
    run_dir = tmp_path / "runs" / "scene0"
    for name, ply in (("pruned", "p.ply"), ("refined", "r.ply")):
        assert run("render", "--in", tmp_path / ply, "--cameras", scene / "cameras.txt",
                   "--out", tmp_path / name, "--float-dump") == 0
        assert run("eval", "--renders", tmp_path / name, "--targets", scene / "targets",
                   "--report", run_dir / f"eval_{name}.txt") == 0
    assert run("report", "--runs", tmp_path / "runs", "--out", tmp_path / "table.md") == 0
    lines = (tmp_path / "table.md").read_text().splitlines()
    assert lines[0] == "| Run | Method | PSNR | SSIM |"
    assert [ln.split("|")[2].strip() for ln in lines[2:]] == ["Pruned*", "Refined", "Pruned*", "Refined"]


def test_train_is_deterministic(scene, tmp_path):
    (tmp_path / "t.cfg").write_text(TRAIN_CFG)
    for name in ("a", "b"):
        assert run("train", "--scenes", scene, "--config", tmp_path / "t.cfg",
                   "--checkpoint", tmp_path / f"{name}.ckpt", "--seed", 4) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_exit_code_missing_file(tmp_path, capsys):
    assert run("prune", "--in", tmp_path / "nope.ply", "--out", tmp_path / "o.ply") == EXIT_CODES["missing-file"]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: missing-file: ")


def test_exit_code_unknown_flag(scene, tmp_path, capsys):
    code = run("prune", "--in", scene / "scene.ply", "--out", tmp_path / "o.ply", "--bogus", 1)
    assert code == EXIT_CODES["usage"]
    assert capsys.readouterr().err.startswith("error: usage: ")


def test_exit_code_config(scene, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("train.not_a_key = 3\n")
    code = run("train", "--scenes", scene, "--config", tmp_path / "bad.cfg", "--checkpoint", tmp_path / "c")
    assert code == EXIT_CODES["config"]
    assert capsys.readouterr().err.startswith("error: config: ")
    assert run("prune", "--in", scene / "scene.ply", "--keep-fraction", 1.5,
               "--out", tmp_path / "o.ply") == EXIT_CODES["config"]


def test_exit_code_load(tmp_path, capsys):
    (tmp_path / "junk.ply").write_bytes(b"not a ply file")
    assert run("prune", "--in", tmp_path / "junk.ply", "--out", tmp_path / "o.ply") == EXIT_CODES["load"]
    assert capsys.readouterr().err.startswith("error: load: ")


def test_exit_codes_are_distinct():
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES) and 0 not in EXIT_CODES.values()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "splatprune", "eval", "--renders", str(tmp_path / "x"),
                           "--targets", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_CODES["missing-file"]
    assert proc.stderr.startswith("error: missing-file:")


def test_synth_seed_changes_scene(tmp_path):
    (tmp_path / "spec.cfg").write_text(SPEC)
    for name, seed in (("a", 0), ("b", 0), ("c", 1)):
        assert run("synth", "--spec", tmp_path / "spec.cfg", "--out", tmp_path / name, "--seed", seed) == 0
    ply = {n: (tmp_path / n / "scene.ply").read_bytes() for n in "abc"}
    assert ply["a"] == ply["b"] and ply["a"] != ply["c"]
    assert np.array_equal(read_float_dump(tmp_path / "a" / "targets" / "view_001.fd"),
                          read_float_dump(tmp_path / "b" / "targets" / "view_001.fd"))
