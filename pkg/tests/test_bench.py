import json
import shutil

import numpy as np
import pytest
from PIL import Image

from odtsmlm import config as cfgmod
from odtsmlm.bench import (ARM_BLOCKS, projections, reconstruct, run_experiment, simulate,
                           to_uint8, working_stack)
from odtsmlm.cli import EXIT_OK, main
from odtsmlm.localize import Initialization
from odtsmlm.metrics import ssim_volume
from odtsmlm.sensor import FrameStack

TINY = {
    "run": {"seed": 5},
    "grid": {"counts": [12, 12, 8]},
    "camera": {"camera_counts": [12, 12], "focal_plane_z_um": 0.4},
    "phantom": {"margin_um": 0.1, "solids": [
        {"kind": "ellipsoid", "center_um": [0.6, 0.6, 0.4], "semi_axes_um": [0.35, 0.35, 0.25],
         "delta_ri": 0.05}]},
    "molecules": {"count": 5},
    "optimizer": {"outer_iterations": 2, "fista_steps": 2, "position_steps": 1},
}


@pytest.fixture(scope="module")
def cfg():
    return cfgmod.resolve(TINY)


@pytest.fixture(scope="module")
def report_dir(cfg, tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    events = []
    rep = run_experiment(cfg, d, events.append)
    return d, rep, events


def test_simulation_is_deterministic(cfg):
    a, _ = simulate(cfg)
    b, _ = simulate(cfg)
    assert a.stack.frames.tobytes() == b.stack.frames.tobytes()
    assert a.fluorophores.positions.tobytes() == b.fluorophores.positions.tobytes()
    assert len(a.stack) == 5 and a.volume.grid.shape == (12, 12, 8)


def test_desk_default_shapes():
    cfg = cfgmod.defaults()
    assert tuple(cfg["grid"]["counts"]) == (32, 32, 16)
    assert cfg["molecules"]["count"] == 50


def test_known_and_estimated_backgrounds(cfg):
    data, _ = simulate(cfg)
    assert working_stack(data.stack, cfg) is data.stack
    est_cfg = cfgmod.resolve({**TINY, "background": {"model": "estimated"}})
    est = working_stack(data.stack, est_cfg)
    assert est.backgrounds.shape == data.stack.frames.shape
    assert not np.array_equal(est.backgrounds, data.stack.backgrounds)
    bare = FrameStack(data.stack.config, data.stack.frames)
    assert working_stack(bare, cfg).backgrounds is not None


def test_report_contents(report_dir):
    d, rep, events = report_dir
    assert rep.completed
    assert set(rep.arms) == {"init-only", "joint", "true-pos-amp"}
    for name, arm in rep.arms.items():
        assert arm.status == "ok" and -1 <= arm.ssim <= 1
        assert arm.objective_trace == sorted(arm.objective_trace, reverse=True)
        assert (d / "renders" / f"{name}_xy.png").is_file()
        assert (d / f"{name}_volume.vol").is_file()
    js = json.loads((d / "report.json").read_text())
    assert js["render_scale"]["mapping"] == "linear"
    assert js["seed"] == 5 and "runtime" not in js
    assert [e["event"] for e in events][:2] == ["simulated", "initialized"]


def test_arm_semantics(report_dir, cfg):
    _, rep, _ = report_dir
    data, _ = simulate(cfg)
    tp = rep.arms["true-pos-amp"].state
    assert tp.positions.tobytes() == data.fluorophores.positions.tobytes()
    io = rep.arms["init-only"].state
    jn = rep.arms["joint"].state
    assert not np.array_equal(io.positions, jn.positions)
    assert ARM_BLOCKS["joint"] is None


def test_reports_reproducible(report_dir, cfg, tmp_path):
    _, rep, _ = report_dir
    again = run_experiment(cfg, tmp_path)
    assert again.to_json() == rep.to_json()
    assert (tmp_path / "report.json").read_bytes() == (report_dir[0] / "report.json").read_bytes()


def test_evaluate_reproduces_report(report_dir, tmp_path):
    d, rep, _ = report_dir
    truth, recon = tmp_path / "truth", tmp_path / "recon"
    truth.mkdir(), recon.mkdir()
    shutil.copy(d / "truth_volume.vol", truth / "phantom.vol")
    shutil.copy(d / "truth_fluorophores.csv", truth / "fluorophores.csv")
    shutil.copy(d / "joint_volume.vol", recon / "volume.vol")
    shutil.copy(d / "joint_fluorophores.csv", recon / "fluorophores.csv")
    shutil.copy(d / "kept_frames.txt", recon / "kept_frames.txt")
    out = tmp_path / "ev.json"
    # the tiny protocol keeps the default metric settings, so no --config is needed
    assert main(["evaluate", "--truth", str(truth), "--recon", str(recon), "--out", str(out)]) \
        == EXIT_OK
    res = json.loads(out.read_text())
    assert res["ssim"] == pytest.approx(rep.arms["joint"].ssim, abs=1e-15)
    assert res["rmse_3d_um"] == pytest.approx(rep.arms["joint"].rmse_3d, abs=1e-15)


def test_failed_arm_recorded(cfg, monkeypatch):
    import odtsmlm.bench as bench

    real = bench.reconstruct

    def flaky(stack, model, c, init, blocks=None, *a, **k):
        if blocks is None:
            raise RuntimeError("joint arm exploded")
        return real(stack, model, c, init, blocks, *a, **k)

    monkeypatch.setattr(bench, "reconstruct", flaky)
    rep = run_experiment(cfg)
    assert not rep.completed
    assert rep.arms["joint"].status == "failed" and "exploded" in rep.arms["joint"].error
    assert rep.arms["init-only"].status == "ok" and rep.arms["true-pos-amp"].status == "ok"


def test_noise_free_truth_init_is_stationary(cfg):
    c = cfgmod.resolve({**TINY, "optimizer": {**TINY["optimizer"], "tau": 0.0}})
    data, model = simulate(c)
    clean = FrameStack(data.stack.config, data.mean_images + data.stack.backgrounds,
                       data.stack.backgrounds)
    fl = data.fluorophores
    init = Initialization(data.volume.values.copy(), fl.positions.copy(), fl.amplitudes.copy(),
                          np.arange(len(fl)))
    joint = reconstruct(clean, model, c, init)
    frozen = reconstruct(clean, model, c, init, ("volume",))
    obj = [h["objective"] for h in joint.history]
    assert max(abs(o - obj[0]) for o in obj) < 1e-6 * abs(obj[0])
    t = data.volume.values
    rng_ = float(t.max() - t.min())
    assert ssim_volume(t, joint.f, 1.5, rng_) == pytest.approx(ssim_volume(t, frozen.f, 1.5, rng_),
                                                               abs=1e-3)


def test_rendering_helpers():
    v = np.zeros((4, 3, 2))
    v[1, 2, 0] = 5.0
    p = projections(v)
    assert p["xy"].shape == (3, 4) and p["xy"][2, 1] == 5.0
    assert p["xz"].shape == (2, 4) and p["xz"][-1, 1] == 5.0  # z = 0 is the bottom row
    img = to_uint8(np.array([-1.0, 0.0, 2.5, 5.0, 9.0]), 0.0, 5.0)
    np.testing.assert_array_equal(img, [0, 0, 128, 255, 255])


def test_png_scale(report_dir):
    d, rep, _ = report_dir
    im = np.asarray(Image.open(d / "renders" / "truth_xy.png"))
    assert im.dtype == np.uint8 and im.max() == 255
