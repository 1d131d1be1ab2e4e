import json

import numpy as np
import pytest

from twoview.cli import main
from twoview.images import load_gray


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def fast_config(tmp_path, **overrides):
    cfg = {
        "configuration": "AP_PLUS_LAT",
        "max_iters": 150,
        "lambda2_schedule": {"kind": "linear_ramp", "value": 1.0, "start_iter": 0, "end_iter": 75},
    }
    cfg.update(overrides)
    return write_json(tmp_path / "config.json", cfg)


IDENTITY_POSE = {"rotvec": [0.0, 0.0, 0.0], "translation": [0.0, 0.0, 400.0]}


class TestSynth:
    def test_writes_expected_files(self, tmp_path):
        out = tmp_path / "case"
        rc = main(["synth", "--out", str(out), "--seed", "3", "--size", "64"])
        assert rc == 0
        for name in ("I_ap.png", "I_lat.png", "gt_pose.json", "init_pose.json", "camera.json"):
            assert (out / name).exists()
        img = load_gray(out / "I_lat.png")
        assert img.width == 64 and img.height == 64
        # DSA polarity: background bright, vessels dark
        assert np.median(img.pixels) == 65535

    def test_deterministic_outputs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "--out", str(out), "--seed", "9", "--size", "64"]) == 0
        assert (a / "I_ap.png").read_bytes() == (b / "I_ap.png").read_bytes()
        assert (a / "init_pose.json").read_text() == (b / "init_pose.json").read_text()

    def test_invisible_ground_truth_exits_two(self, tmp_path):
        gt = write_json(
            tmp_path / "gt.json", {"rotvec": [0, 0, 0], "translation": [0, 0, -400.0]}
        )
        rc = main(["synth", "--out", str(tmp_path / "o"), "--gt-pose", gt, "--size", "64"])
        assert rc == 2


class TestEval:
    def test_identical_poses_zero_error(self, tmp_path, capsys):
        est = write_json(tmp_path / "est.json", IDENTITY_POSE)
        gt = write_json(tmp_path / "gt.json", IDENTITY_POSE)
        rc = main(["eval", "--est", est, "--gt", gt])
        assert rc == 0
        err = json.loads(capsys.readouterr().out)
        assert err["rotation_deg"] == 0.0
        assert err["translation_mm"] == 0.0
        assert err["add_mm"] == 0.0

    def test_missing_file_exits_one(self, tmp_path):
        est = write_json(tmp_path / "est.json", IDENTITY_POSE)
        rc = main(["eval", "--est", est, "--gt", str(tmp_path / "missing.json")])
        assert rc == 1


class TestRegister:
    def synth_case(self, tmp_path, seed=1, size=64, cone=5.0, box=5.0):
        out = tmp_path / "case"
        rc = main([
            "synth", "--out", str(out), "--seed", str(seed), "--size", str(size),
            "--perturb-cone-deg", str(cone), "--perturb-box-mm", str(box),
        ])
        assert rc == 0
        return out

    def test_end_to_end_converges(self, tmp_path, capsys):
        case = self.synth_case(tmp_path)
        out = tmp_path / "reg"
        rc = main([
            "register",
            "--ap", str(case / "I_ap.png"), "--lat", str(case / "I_lat.png"),
            "--camera", str(case / "camera.json"), "--init", str(case / "init_pose.json"),
            "--config", fast_config(tmp_path), "--out", str(out),
            "--segment", "none", "--loss-csv",
        ])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["converged"] and not report["diverged"]
        assert (out / "loss_trace.csv").exists()

        est = write_json(tmp_path / "est.json", report["final_pose_lat"])
        rc = main(["eval", "--est", est, "--gt", str(case / "gt_pose.json")])
        assert rc == 0
        err = json.loads(capsys.readouterr().out)
        assert err["rotation_deg"] < 0.5
        assert err["add_mm"] < 1.0

    def test_dump_frames(self, tmp_path):
        case = self.synth_case(tmp_path)
        out = tmp_path / "reg"
        rc = main([
            "register",
            "--ap", str(case / "I_ap.png"), "--lat", str(case / "I_lat.png"),
            "--camera", str(case / "camera.json"), "--init", str(case / "init_pose.json"),
            "--config", fast_config(tmp_path, max_iters=25), "--segment", "none",
            "--out", str(out), "--dump-frames", "--frame-stride", "10",
        ])
        assert rc == 0
        frames = sorted((out / "frames").glob("*.png"))
        renders = [f for f in frames if f.name.endswith("_render.png")]
        residuals = [f for f in frames if f.name.endswith("_residual.png")]
        assert len(renders) >= 2
        assert len(renders) == len(residuals)

    def test_mismatched_image_sizes_exit_one(self, tmp_path, capsys):
        case64 = self.synth_case(tmp_path, size=64)
        case32 = self.synth_case(tmp_path / "other", size=32)
        rc = main([
            "register",
            "--ap", str(case32 / "I_ap.png"), "--lat", str(case64 / "I_lat.png"),
            "--camera", str(case64 / "camera.json"),
            "--config", fast_config(tmp_path), "--out", str(tmp_path / "reg"),
        ])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestSweep:
    def test_writes_csv_and_summary(self, tmp_path):
        out = tmp_path / "sweep"
        rc = main([
            "sweep", "--out", str(out), "--size", "64",
            "--seeds", "2", "--configurations", "LAT_ONLY",
            "--perturb-cone-deg", "2", "--perturb-box-mm", "2",
            "--config", fast_config(tmp_path, max_iters=40),
        ])
        assert rc == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "configuration,seed,rotation_deg,translation_mm,add_mm,converged,iterations"
        assert len(lines) == 3
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seeds"] == [0, 1]
        assert "LAT_ONLY" in summary["medians"]

    def test_unknown_configuration_exits_one(self, tmp_path):
        rc = main([
            "sweep", "--out", str(tmp_path / "s"), "--size", "64",
            "--seeds", "1", "--configurations", "SIDEWAYS",
        ])
        assert rc == 1


def test_help_runs():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
