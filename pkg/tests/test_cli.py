"""CLI contracts: exit codes, artifact formats, determinism."""

import json
import os
import subprocess
import sys
from importlib import resources

import pytest

from elakit.cli import main

BUNDLED_ELA = str(resources.files("elakit") / "data" / "resnet18-ela-b.json")


def run_cli(args, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "elakit.cli", *args],
        capture_output=True, text=True, env=env,
    )


class TestAudit:
    def test_bundled_resnet18_ela_b(self, tmp_path):
        out = tmp_path / "report.csv"
        jout = tmp_path / "report.json"
        code = main(["audit", "--config", BUNDLED_ELA, "--out", str(out),
                     "--json-out", str(jout)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[-2].split(",")[:3] == ["TOTAL", "ela-b", "34560"]
        data = json.loads(jout.read_text())
        assert data["delta_params"] == 34560
        assert data["reconciliation"]["within_2x"]

    def test_empty_placement(self, tmp_path):
        cfg = tmp_path / "empty.json"
        cfg.write_text(json.dumps({"network": "none", "module": "se", "sites": []}))
        out = tmp_path / "r.csv"
        assert main(["audit", "--config", str(cfg), "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[-2] == "TOTAL,se,0,0"

    def test_malformed_json_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 2
        assert "line" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["audit", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "r.csv")]) == 2

    def test_invalid_placement_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({
            "module": "ela-s",
            "sites": [{"name": "a", "channels": 10, "height": 4, "width": 4}],
        }))
        assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 2


class TestGradcheck:
    def test_passes_for_ela_b(self, capsys):
        code = main(["gradcheck", "--module", "ela-b", "--shape", "2,16,5,7",
                     "--seed", "1"])
        assert code == 0
        assert "PASS" in capsys.readouterr().out

    def test_corrupted_backward_exits_1(self):
        result = run_cli(
            ["gradcheck", "--module", "se", "--shape", "1,8,3,3", "--seed", "1"],
            env_extra={"ELAKIT_CORRUPT_BACKWARD": "1"},
        )
        assert result.returncode == 1
        assert "FAIL" in result.stdout

    def test_precondition_error_before_compute(self, capsys):
        # ela-s needs C divisible by 8
        code = main(["gradcheck", "--module", "ela-s", "--shape", "1,10,3,3"])
        assert code == 2
        assert "divisible" in capsys.readouterr().err

    def test_unknown_module_usage_error(self):
        result = run_cli(["gradcheck", "--module", "bogus"])
        assert result.returncode == 2


class TestBench:
    def test_csv_schema(self, tmp_path):
        out = tmp_path / "bench.csv"
        code = main(["bench", "--module", "se", "--shape", "1,16,4,4",
                     "--reps", "10", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "module,pass,reps,median_s,p10_s,p90_s"
        assert len(lines) == 3
        assert lines[1].startswith("se,forward,10,")
        assert lines[2].startswith("se,backward,10,")

    def test_reps_floor(self, tmp_path):
        assert main(["bench", "--module", "se", "--reps", "5",
                     "--out", str(tmp_path / "b.csv")]) == 2

    def test_two_modules_side_by_side(self, tmp_path):
        for module in ("ela-b", "se"):
            out = tmp_path / f"{module}.csv"
            assert main(["bench", "--module", module, "--shape", "1,16,6,6",
                         "--reps", "10", "--precision", "f32", "--out", str(out)]) == 0
            assert len(out.read_text().strip().splitlines()) == 3


class TestTrainAndCam:
    def test_zero_steps_header_only(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train-toy", "--attention", "none", "--steps", "0",
                     "--seed", "1", "--out", str(out)]) == 0
        assert (out / "loss.csv").read_bytes() == b"step,loss,accuracy\r\n"

    def test_short_train_then_gradcam(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train-toy", "--attention", "eca", "--steps", "5",
                     "--seed", "2", "--out", str(out)]) == 0
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert len(lines) == 6
        assert json.loads((out / "final.json").read_text())["steps"] == 5

        cam = tmp_path / "cam"
        assert main(["gradcam", "--model", str(out / "model.elak"),
                     "--samples", "3", "--seed", "3", "--out", str(cam)]) == 0
        pgms = sorted(cam.glob("*.pgm"))
        assert len(pgms) == 3
        for p in pgms:
            blob = p.read_bytes()
            assert blob.startswith(b"P5\n32 32\n255\n")
            assert len(blob.split(b"255\n", 1)[1]) == 32 * 32

    def test_gradcam_missing_model_exits_2(self, tmp_path):
        assert main(["gradcam", "--model", str(tmp_path / "nope.elak"),
                     "--out", str(tmp_path / "cam")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_3(self, tmp_path):
        import numpy as np

        with np.errstate(all="ignore"):
            code = main(["train-toy", "--attention", "none", "--steps", "40",
                         "--seed", "15", "--lr", "1e9", "--out", str(tmp_path / "run")])
        assert code == 3


class TestDeterminism:
    def test_audit_bit_reproducible(self, tmp_path):
        outs = []
        for i in range(2):
            out = tmp_path / f"r{i}.csv"
            jout = tmp_path / f"r{i}.json"
            assert main(["audit", "--config", BUNDLED_ELA, "--out", str(out),
                         "--json-out", str(jout)]) == 0
            outs.append(out.read_bytes() + jout.read_bytes())
        assert outs[0] == outs[1]

    def test_train_and_cam_bit_reproducible(self, tmp_path):
        blobs = []
        for i in range(2):
            out = tmp_path / f"run{i}"
            assert main(["train-toy", "--attention", "ela-t", "--steps", "8",
                         "--seed", "5", "--out", str(out)]) == 0
            cam = tmp_path / f"cam{i}"
            assert main(["gradcam", "--model", str(out / "model.elak"),
                         "--samples", "2", "--seed", "6", "--out", str(cam)]) == 0
            blob = (out / "loss.csv").read_bytes() + (out / "model.elak").read_bytes()
            for p in sorted(cam.glob("*.pgm")):
                blob += p.read_bytes()
            blobs.append(blob)
        assert blobs[0] == blobs[1]
