import json

import numpy as np
import pytest

from odtsmlm import __version__
from odtsmlm.cli import EXIT_IO, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, main
from odtsmlm.domain import FluorophoreSet, ScatteringVolume, make_grid
from odtsmlm.fileio import read_fluorophores, read_frames, sha256_file, write_fluorophores, write_volume

TINY = """
[run]
seed = 3

[grid]
counts = [12, 12, 8]

[camera]
camera_counts = [12, 12]
focal_plane_z_um = 0.4

[phantom]
margin_um = 0.1
[[phantom.solids]]
kind = "ellipsoid"
center_um = [0.6, 0.6, 0.4]
semi_axes_um = [0.35, 0.35, 0.25]
delta_ri = 0.05

[molecules]
count = 4

[optimizer]
outer_iterations = 2
fista_steps = 2
position_steps = 1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.toml").write_text(TINY)
    assert main(["simulate", "--config", str(d / "tiny.toml"), "--out", str(d / "sim"),
                 "--threads", "1"]) == EXIT_OK
    assert main(["reconstruct", "--config", str(d / "tiny.toml"), "--frames",
                 str(d / "sim" / "frames.bin"), "--out", str(d / "rec"), "--threads", "1"]) == EXIT_OK
    return d


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


class TestSimulate:
    def test_outputs_and_manifest(self, work):
        sim = work / "sim"
        for name in ("phantom.vol", "fluorophores.csv", "frames.bin", "manifest.json",
                     "progress.jsonl"):
            assert (sim / name).is_file()
        m = _manifest(sim)
        assert m["command"] == "simulate" and m["version"] == __version__
        assert m["seed"] == 3 and m["config"]["molecules"]["count"] == 4
        for name, digest in m["outputs"].items():
            assert sha256_file(sim / name) == digest
        stack = read_frames(sim / "frames.bin")
        assert len(stack) == 4 and stack.backgrounds is not None
        assert stack.frames.dtype.kind == "i"
        assert not (work / "sim.partial").exists()

    def test_same_seed_same_hashes(self, work, tmp_path):
        assert main(["simulate", "--config", str(work / "tiny.toml"), "--out",
                     str(tmp_path / "again"), "--threads", "1"]) == EXIT_OK
        assert _manifest(tmp_path / "again")["outputs"] == _manifest(work / "sim")["outputs"]

    def test_seed_flag_changes_data(self, work, tmp_path):
        assert main(["simulate", "--config", str(work / "tiny.toml"), "--out",
                     str(tmp_path / "s9"), "--seed", "9"]) == EXIT_OK
        m = _manifest(tmp_path / "s9")
        assert m["seed"] == 9
        assert m["outputs"]["frames.bin"] != _manifest(work / "sim")["outputs"]["frames.bin"]

    def test_zero_frames_is_validation_error(self, work, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(TINY.replace("count = 4", "count = 0"))
        out = tmp_path / "nothing"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == EXIT_VALIDATION
        assert not out.exists() and not (tmp_path / "nothing.partial").exists()

    def test_unknown_key_reported(self, tmp_path, capsys):
        cfg = tmp_path / "typo.toml"
        cfg.write_text("[optics]\nwavelenght_um = 0.6\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
        assert "optics.wavelenght_um: unknown key" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "absent.toml"), "--out",
                     str(tmp_path / "o")]) == EXIT_IO

    def test_f64_frames(self, work, tmp_path):
        assert main(["simulate", "--config", str(work / "tiny.toml"), "--out", str(tmp_path / "f"),
                     "--frames-dtype", "f64"]) == EXIT_OK
        a = read_frames(tmp_path / "f" / "frames.bin")
        b = read_frames(work / "sim" / "frames.bin")
        np.testing.assert_array_equal(a.frames, b.frames)


class TestReconstruct:
    def test_outputs(self, work):
        rec = work / "rec"
        for name in ("volume.vol", "fluorophores.csv", "objective.csv", "kept_frames.txt",
                     "checkpoint/volume.vol", "checkpoint/fluorophores.csv",
                     "checkpoint/state.json", "manifest.json"):
            assert (rec / name).is_file(), name
        m = _manifest(rec)
        assert m["status"] == "ok"
        assert m["inputs"]["frames"]["sha256"] == sha256_file(work / "sim" / "frames.bin")
        state = json.loads((rec / "checkpoint" / "state.json").read_text())
        assert state["outer"] == 2
        rows = (rec / "objective.csv").read_text().splitlines()
        assert rows[0] == "outer,block,objective"
        vals = [float(r.split(",")[2]) for r in rows[1:]]
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(vals, vals[1:]))
        events = [json.loads(l)["event"] for l in (rec / "progress.jsonl").read_text().splitlines()]
        assert events[0] == "initialized" and events.count("outer") == 2

    def test_rerun_reproduces_hashes(self, work, tmp_path):
        assert main(["rerun", str(work / "rec" / "manifest.json"), "--out",
                     str(tmp_path / "rr"), "--threads", "1"]) == EXIT_OK
        assert _manifest(tmp_path / "rr")["outputs"] == _manifest(work / "rec")["outputs"]

    def test_rerun_refuses_changed_input(self, work, tmp_path):
        frames = tmp_path / "frames.bin"
        frames.write_bytes((work / "sim" / "frames.bin").read_bytes())
        assert main(["reconstruct", "--config", str(work / "tiny.toml"), "--frames", str(frames),
                     "--out", str(tmp_path / "r1")]) == EXIT_OK
        frames.write_bytes(frames.read_bytes()[:-1] + b"\x01")
        assert main(["rerun", str(tmp_path / "r1" / "manifest.json"), "--out",
                     str(tmp_path / "r2")]) == EXIT_VALIDATION

    def test_frozen_truth_positions(self, work, tmp_path):
        truth = read_fluorophores(work / "sim" / "fluorophores.csv")
        assert main(["reconstruct", "--config", str(work / "tiny.toml"), "--frames",
                     str(work / "sim" / "frames.bin"), "--positions",
                     str(work / "sim" / "fluorophores.csv"), "--frozen-positions",
                     "--out", str(tmp_path / "fz")]) == EXIT_OK
        out = read_fluorophores(tmp_path / "fz" / "fluorophores.csv")
        assert out.positions.tobytes() == truth.positions.tobytes()
        assert out.amplitudes.tobytes() == truth.amplitudes.tobytes()

    def test_frozen_needs_positions(self, work, tmp_path):
        assert main(["reconstruct", "--config", str(work / "tiny.toml"), "--frames",
                     str(work / "sim" / "frames.bin"), "--frozen-positions",
                     "--out", str(tmp_path / "x")]) == EXIT_VALIDATION

    def test_missing_frames(self, work, tmp_path):
        assert main(["reconstruct", "--config", str(work / "tiny.toml"), "--frames",
                     str(tmp_path / "none.bin"), "--out", str(tmp_path / "x")]) == EXIT_IO
        assert not (tmp_path / "x").exists()

    def test_corrupt_frames(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes((work / "sim" / "frames.bin").read_bytes()[:-5])
        assert main(["reconstruct", "--config", str(work / "tiny.toml"), "--frames", str(bad),
                     "--out", str(tmp_path / "x")]) == EXIT_IO
        assert "byte offset" in capsys.readouterr().err

    def test_camera_mismatch(self, work, tmp_path):
        cfg = tmp_path / "other.toml"
        cfg.write_text(TINY.replace("camera_counts = [12, 12]", "camera_counts = [10, 12]"))
        assert main(["reconstruct", "--config", str(cfg), "--frames",
                     str(work / "sim" / "frames.bin"), "--out", str(tmp_path / "x")]) == EXIT_VALIDATION

    def test_solver_failure_exit_code(self, work, tmp_path, monkeypatch):
        from odtsmlm import optimize

        def boom(prob, state, cfg):
            raise RuntimeError("synthetic")

        monkeypatch.setitem(optimize._BLOCK_FUNCS, "volume", boom)
        out = tmp_path / "sf"
        assert main(["reconstruct", "--config", str(work / "tiny.toml"), "--frames",
                     str(work / "sim" / "frames.bin"), "--out", str(out)]) == EXIT_SOLVER
        m = _manifest(out)
        assert m["status"] == "solver_failure" and m["failures"]


class TestEvaluate:
    def test_truth_against_itself(self, work, tmp_path):
        out = tmp_path / "ev.json"
        assert main(["evaluate", "--config", str(work / "tiny.toml"), "--truth",
                     str(work / "sim"), "--recon", str(work / "sim"), "--out", str(out)]) == EXIT_OK
        res = json.loads(out.read_text())
        assert res["ssim"] == pytest.approx(1.0, abs=1e-12)
        assert res["rmse_3d_um"] == 0.0 and res["n_matched"] == 4

    def test_reconstruction(self, work, tmp_path):
        out = tmp_path / "ev.json"
        assert main(["evaluate", "--config", str(work / "tiny.toml"), "--truth",
                     str(work / "sim"), "--recon", str(work / "rec"), "--out", str(out)]) == EXIT_OK
        res = json.loads(out.read_text())
        assert -1 <= res["ssim"] <= 1 and res["rmse_3d_um"] >= 0

    def test_grid_mismatch(self, work, tmp_path):
        other = tmp_path / "other"
        other.mkdir()
        g = make_grid((6, 6, 4), (0.1, 0.1, 0.1))
        write_volume(other / "volume.vol", ScatteringVolume(g, np.zeros(g.shape)))
        write_fluorophores(other / "fluorophores.csv", FluorophoreSet([[0.1, 0.1, 0.1]], [1.0]))
        assert main(["evaluate", "--truth", str(work / "sim"), "--recon", str(other),
                     "--out", str(tmp_path / "e.json")]) == EXIT_VALIDATION


class TestBench:
    def test_single_arm_and_invalid_arm(self, work, tmp_path):
        cfg = tmp_path / "b.toml"
        cfg.write_text(TINY + '\n[bench]\narms = ["joint"]\n')
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
        report = json.loads((tmp_path / "b" / "report.json").read_text())
        assert list(report["arms"]) == ["joint"]
        bad = tmp_path / "bad.toml"
        bad.write_text(TINY + '\n[bench]\narms = ["oracle"]\n')
        assert main(["bench", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
