import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ttedit.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, main
from ttedit.pipeline import load_image


@pytest.fixture(autouse=True)
def isolated_cache(monkeypatch, tmp_path):
    monkeypatch.setenv("TTEDIT_CACHE_DIR", str(tmp_path / "cache-dir"))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def image(workdir):
    path = workdir / "src.png"
    assert main(["render", "--prompt", "red circle standing on blue", "--out", str(path)]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def cache(workdir, image):
    out = workdir / "job.brtc"
    code = main(["invert", "--image", str(image), "--prompt", "red square standing on blue", "--steps", "6",
                 "--seed", "3", "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_render_writes_png(image):
    img = load_image(image)
    assert img.shape == (16, 16, 3) and img.dtype == np.uint8


def test_invert_summary(cache, capsys, workdir, image):
    again = workdir / "again.brtc"
    assert main(["invert", "--image", str(image), "--prompt", "red square standing on blue", "--steps", "6",
                 "--seed", "3", "--out", str(again)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 6
    assert summary["total_iterations"] <= 250 and summary["max_iterations_per_step"] <= 5
    assert summary["config"]["optimizer"]["learning_rate"] == 0.001
    # same seed and config give a byte-identical cache
    assert again.read_bytes() == cache.read_bytes()


def test_reconstruct(cache, capsys, workdir):
    out = workdir / "rec.png"
    assert main(["reconstruct", "--cache", str(cache), "--out", str(out)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert out.exists() and 0 <= report["psnr"] <= 99


def test_edit_writes_images_and_report(cache, capsys, workdir):
    out = workdir / "edit"
    assert main(["edit", "--cache", str(cache), "--out", str(out), "--dump-attention"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    for name in ("edit.png", "reconstruction.png", "transition.png", "initial.png", "metrics.json"):
        assert (out / name).exists()
    assert list((out / "attention").glob("*.png"))
    assert record["omega_start"] == 0.8 and record["lambda"] == 0.6
    assert "psnr_reconstruction" in record and record["config"]["steps"] == 6


def test_edit_without_injection_is_initial_pass(cache, capsys, workdir):
    out = workdir / "plain"
    assert main(["edit", "--cache", str(cache), "--out", str(out), "--eta", "0", "--lambda", "0"]) == EXIT_OK
    capsys.readouterr()
    assert np.array_equal(load_image(out / "edit.png"), load_image(out / "initial.png"))


def test_edit_sweep(cache, capsys, workdir):
    out = workdir / "sweep"
    assert main(["edit", "--cache", str(cache), "--out", str(out), "--sweep"]) == EXIT_OK
    capsys.readouterr()
    with (out / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["omega_start"]) for r in rows] == [0.9, 0.8, 0.6, 0.5, 0.0]
    assert (out / "sweep.png").stat().st_size > 0


def test_config_file_precedence(cache, capsys, workdir):
    cfg = workdir / "edit.yaml"
    cfg.write_text("omega-start: 0.6\nlambda: 0.2\n")
    out = workdir / "cfg"
    assert main(["edit", "--cache", str(cache), "--out", str(out), "--config", str(cfg), "--lambda", "0.4"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["omega_start"] == 0.6 and record["lambda"] == 0.4


def test_bench_outputs(workdir, capsys):
    out = workdir / "bench.csv"
    code = main(["bench", "--suite", "toy", "--cases", "1", "--steps", "4", "--out", str(out)])
    assert code == EXIT_OK
    capsys.readouterr()
    summary = json.loads(out.with_suffix(".summary.json").read_text())
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == sum(m["total_iterations"] for m in summary["modes"].values())
    assert out.with_suffix(".png").exists()


def test_train_toy_tiny(workdir, capsys):
    cfg = workdir / "toy.yaml"
    cfg.write_text("latent_size: 8\nwidths: [8, 16]\nheads: 2\nembed_dim: 8\nseq_len: 6\nbatch_size: 4\n")
    out = workdir / "tiny.brtc"
    assert main(["train-toy", "--config", str(cfg), "--steps", "3", "--out", str(out)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert out.exists() and out.with_suffix(".png").exists() and len(report["digest"]) == 64


class TestExitCodes:
    def test_missing_cache(self, workdir, capsys):
        assert main(["reconstruct", "--cache", str(workdir / "nope.brtc")]) == EXIT_INPUT

    def test_corrupt_cache(self, cache, workdir, capsys):
        bad = workdir / "bad.brtc"
        bad.write_bytes(b"JUNK" + cache.read_bytes()[4:])
        assert main(["reconstruct", "--cache", str(bad)]) == EXIT_INPUT
        assert "bad-magic" in capsys.readouterr().err

    def test_truncated_cache(self, cache, workdir, capsys):
        bad = workdir / "short.brtc"
        bad.write_bytes(cache.read_bytes()[:-50])
        assert main(["edit", "--cache", str(bad)]) == EXIT_INPUT
        assert "truncated" in capsys.readouterr().err

    def test_missing_image(self, workdir, capsys):
        assert main(["invert", "--image", str(workdir / "none.png"), "--prompt", "red circle",
                     "--out", str(workdir / "x.brtc")]) == EXIT_INPUT

    def test_empty_prompt(self, image, workdir, capsys):
        assert main(["invert", "--image", str(image), "--prompt", " ", "--out", str(workdir / "x.brtc")]) == EXIT_CONFIG

    def test_unknown_token(self, image, workdir, capsys):
        assert main(["invert", "--image", str(image), "--prompt", "red dog", "--steps", "2",
                     "--out", str(workdir / "x.brtc")]) == EXIT_CONFIG

    def test_bad_parameter(self, cache, workdir, capsys):
        assert main(["edit", "--cache", str(cache), "--omega-start", "0.05", "--out", str(workdir / "e")]) == EXIT_CONFIG

    def test_adapter_selected(self, workdir, capsys):
        assert main(["bench", "--backbone", "adapter", "--out", str(workdir / "b.csv")]) == EXIT_CONFIG

    def test_unknown_suite(self, workdir, capsys):
        assert main(["bench", "--suite", "imagenet", "--out", str(workdir / "b.csv")]) == EXIT_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ttedit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("invert", "edit", "reconstruct", "bench", "train-toy"):
        assert cmd in proc.stdout
