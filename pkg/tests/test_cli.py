"""Command-line integration: subcommands, outputs and exit codes."""
import json
import subprocess
import sys

import numpy as np
import pytest

from cesst.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from cesst.config import CesstConfig
from cesst.data import load_cube
from cesst.serialize import save_tensor

SMALL = CesstConfig(base_width=4, window_size=2)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "model.json"
    cfg.write_text(SMALL.to_json())
    assert main(["synth-data", "--seed", "0", "--count", "2", "--size", "16", "--out", str(root / "data")]) == 0
    rc = main(["train", "--config", str(cfg), "--data", str(root / "data"), "--steps", "2", "--crop", "16",
               "--out", str(root / "run")])
    assert rc == 0
    return root


class TestCommands:
    def test_synth_data_writes_manifest(self, workspace):
        entries = json.loads((workspace / "data" / "manifest.json").read_text())
        assert len(entries) == 2
        assert load_cube(workspace / "data" / entries[0]["cube_path"]).data.shape == (31, 16, 16)

    def test_train_outputs(self, workspace):
        assert (workspace / "run" / "checkpoint.ckpt").exists()
        record = json.loads((workspace / "run" / "run.json").read_text())
        assert len(record["steps"]) == 2

    def test_resume(self, workspace, tmp_path):
        out = tmp_path / "r"
        args = ["train", "--config", str(workspace / "model.json"), "--data", str(workspace / "data"),
                "--steps", "3", "--crop", "16", "--out", str(out)]
        assert main(args + ["--stop-at", "1"]) == EXIT_OK
        assert main(args + ["--resume", str(out / "checkpoint.ckpt")]) == EXIT_OK
        assert len(json.loads((out / "run.json").read_text())["steps"]) == 3

    def test_eval_report(self, workspace, capsys):
        report = workspace / "report.json"
        rc = main(["eval", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"), "--data", str(workspace / "data"),
                   "--report", str(report)])
        assert rc == EXIT_OK
        d = json.loads(report.read_text())
        assert {"mrae", "rmse", "psnr", "sam", "ergas", "per_band_rmse", "params", "flops"} <= set(d)
        lines = (workspace / "report.bands.csv").read_text().strip().split("\n")
        assert lines[0] == "band_nm,rmse" and len(lines) == 32

    def test_infer(self, workspace, tmp_path):
        rgb = tmp_path / "rgb.tnsr"
        save_tensor(rgb, np.random.default_rng(0).random((3, 10, 12)).astype(np.float32))
        out = tmp_path / "out.hsic"
        rc = main(["infer", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"), "--rgb", str(rgb),
                   "--out", str(out)])
        assert rc == EXIT_OK
        cube = load_cube(out)
        assert cube.data.shape == (31, 10, 12) and 0 <= cube.data.min() and cube.data.max() <= 1

    def test_gradcheck_ops(self, capsys):
        assert main(["gradcheck", "--scope", "ops", "--seeds", "0"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["failed"] == []

    def test_ablate(self, tmp_path):
        out = tmp_path / "abl.csv"
        rc = main(["ablate", "--config", _cfg(tmp_path), "--rows", "baseline,full", "--budget", "1",
                   "--count", "1", "--size", "16", "--crop", "16", "--out", str(out)])
        assert rc == EXIT_OK
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "row,params,flops,mrae,rmse,psnr" and len(lines) == 3

    def test_bench(self, tmp_path):
        out = tmp_path / "bench.csv"
        rc = main(["bench", "--variants", "window,spectral", "--sizes", "16,64", "--channels", "4",
                   "--repeats", "1", "--batch", "2", "--out", str(out)])
        assert rc == EXIT_OK
        assert len(out.read_text().strip().split("\n")) == 5


def _cfg(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(SMALL.to_json())
    return str(p)


class TestExitCodes:
    def test_unknown_config_key(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"base_width": 4, "depth": 9}))
        rc = main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--steps", "1",
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_bad_argument(self):
        assert main(["train"]) == EXIT_CONFIG
        assert main(["frobnicate"]) == EXIT_CONFIG

    def test_bad_crop(self, workspace, tmp_path):
        rc = main(["train", "--config", _cfg(tmp_path), "--data", str(workspace / "data"), "--steps", "1",
                   "--crop", "20", "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_unknown_ablation_row(self):
        assert main(["ablate", "--rows", "nope", "--budget", "1"]) == EXIT_CONFIG

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("CESST_THREADS", "zero")
        assert main(["gradcheck", "--scope", "ops", "--seeds", "0"]) == EXIT_CONFIG

    def test_missing_data(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nowhere"), "--steps", "1", "--out", str(tmp_path / "o")])
        assert rc == EXIT_DATA

    def test_corrupt_cube(self, workspace, tmp_path):
        data = tmp_path / "d"
        data.mkdir()
        (data / "x.hsic").write_bytes(b"JUNKJUNKJUNK")
        (data / "manifest.json").write_text(json.dumps([{"cube_path": "x.hsic"}]))
        rc = main(["eval", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"), "--data", str(data),
                   "--report", str(tmp_path / "r.json")])
        assert rc == EXIT_DATA

    def test_missing_checkpoint(self, workspace, tmp_path):
        rc = main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(workspace / "data"),
                   "--report", str(tmp_path / "r.json")])
        assert rc == EXIT_DATA

    def test_bad_rgb_shape(self, workspace, tmp_path):
        rgb = tmp_path / "rgb.tnsr"
        save_tensor(rgb, np.zeros((4, 8, 8), np.float32))
        rc = main(["infer", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"), "--rgb", str(rgb),
                   "--out", str(tmp_path / "o.hsic")])
        assert rc == EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, workspace, tmp_path, capsys):
        rc = main(["train", "--config", _cfg(tmp_path), "--data", str(workspace / "data"), "--steps", "3",
                   "--crop", "16", "--lr", "1e30", "--lr-min", "0", "--out", str(tmp_path / "o")])
        assert rc == EXIT_NUMERIC
        assert "numerical failure" in capsys.readouterr().err
        assert (tmp_path / "o" / "nonfinite_snapshot.ckpt").exists()

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "cesst", "synth-data", "--count", "1", "--size", "16",
                               "--out", str(tmp_path / "d")], capture_output=True, text=True,
                              env={"CESST_THREADS": "1", "PATH": ""}, timeout=120)
        assert proc.returncode == EXIT_OK, proc.stderr
        assert json.loads(proc.stdout)["count"] == 1
        proc = subprocess.run([sys.executable, "-m", "cesst", "eval", "--ckpt", "x", "--data", str(tmp_path / "zz"),
                               "--report", str(tmp_path / "r.json")], capture_output=True, text=True, timeout=120)
        assert proc.returncode == EXIT_DATA
