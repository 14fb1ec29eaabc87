import json
import subprocess
import sys

import numpy as np
import pytest

from llsrflow import CHECKPOINT_FORMAT_VERSION
from llsrflow import flow as flow_mod
from llsrflow.cli import main
from llsrflow.imageio import read_png, write_png

TINY = {"total_steps": 3, "warmup_steps": 2, "batch": 2, "crop": 16, "steps_per_level": 2, "hidden": 8,
        "encoder": {"width": 8, "stages": 1, "blocks": 1, "window": 4, "heads": 2, "streams": 2}}


def run(*args):
    return subprocess.run([sys.executable, "-m", "llsrflow.cli", *args], capture_output=True, text=True)


def test_no_args_and_bad_flags():
    res = run()
    assert res.returncode == 2 and "usage" in res.stderr
    assert main(["train"]) == 2
    assert main(["frobnicate"]) == 2


def test_version():
    res = run("--version")
    assert res.returncode == 0
    assert f"checkpoint format {CHECKPOINT_FORMAT_VERSION}" in res.stdout


def test_selfcheck_passes_and_writes_report(tmp_path, capsys):
    report = tmp_path / "r" / "report.json"
    assert main(["selfcheck", "--quick", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    entries = json.loads(report.read_text())
    names = {e["suite"] for e in entries}
    assert names == {"invertibility", "logdet-layers", "logdet-composite", "gradcheck", "density-normalization",
                     "cr-invariance", "noise-variance", "isp-roundtrip", "metric-oracles"}
    for e in entries:
        assert e["passed"] and isinstance(e["error"], float) and e["error"] <= e["tol"]


def test_selfcheck_catches_logdet_sign_bug(monkeypatch, capsys):
    original = flow_mod.CondAffineCoupling.forward

    def flipped(self, x, cond):
        y, ld = original(self, x, cond)
        return y, ld * -1.0

    monkeypatch.setattr(flow_mod.CondAffineCoupling, "forward", flipped)
    assert main(["selfcheck", "--quick"]) != 0
    out = capsys.readouterr().out
    assert any(line.startswith("logdet-layers") and "FAIL" in line for line in out.splitlines())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--out", str(root / "data"), "--count", "4", "--synthetic", "2", "--size", "32"]) == 0
    assert main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                 "--out", str(root / "a.llsf")]) == 0
    return root


def test_infer_doubles_resolution(trained, tmp_path):
    write_png(tmp_path / "x.png", np.random.default_rng(0).uniform(size=(3, 16, 16)))
    assert main(["infer", "--ckpt", str(trained / "a.llsf"), "--in", str(tmp_path / "x.png"),
                 "--out", str(tmp_path / "y.png")]) == 0
    assert read_png(tmp_path / "y.png").shape == (3, 32, 32)
    assert json.loads((tmp_path / "y.config.json").read_text())["command"] == "infer"


def test_determinism(trained, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--count", "4", "--synthetic", "2", "--size", "32"]) == 0
    for f in sorted((trained / "data").glob("*.png")):
        assert (tmp_path / "data" / f.name).read_bytes() == f.read_bytes()
    assert main(["train", "--config", str(trained / "cfg.json"), "--data", str(trained / "data"),
                 "--out", str(tmp_path / "b.llsf"), "--threads", "1"]) == 0
    assert (tmp_path / "b.llsf").read_bytes() == (trained / "a.llsf").read_bytes()
    assert (tmp_path / "b.csv").read_bytes() == (trained / "a.csv").read_bytes()
    for d in ("p1", "p2"):
        assert main(["infer", "--ckpt", str(trained / "a.llsf"), "--in", str(trained / "data"),
                     "--out", str(tmp_path / d)]) == 0
    preds = sorted((tmp_path / "p1").glob("*_pred.png"))
    assert len(preds) == 4
    for f in preds:
        assert (tmp_path / "p2" / f.name).read_bytes() == f.read_bytes()


def test_eval_report(trained, tmp_path):
    assert main(["infer", "--ckpt", str(trained / "a.llsf"), "--in", str(trained / "data"),
                 "--out", str(tmp_path / "pred")]) == 0
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(trained / "data"),
                 "--out", str(tmp_path / "report.json")]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["per_image"]) == 4 and -1 <= rep["ssim"] <= 1 and rep["psnr_db"] > 0


def test_crmap_demo(tmp_path, capsys):
    write_png(tmp_path / "in.png", np.random.default_rng(1).uniform(0.1, 1.0, size=(3, 16, 16)))
    assert main(["crmap-demo", "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "demo")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert abs(summary["cr_channel_sum_min"] - 1) < 1e-9 and abs(summary["cr_channel_sum_max"] - 1) < 1e-9
    assert (tmp_path / "demo" / "cr_dark_small.png").exists()
