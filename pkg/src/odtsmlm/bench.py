"""Simulation pipeline and the three-arm comparison experiment.

One dataset (phantom, emitters, noisy biplane frames) is simulated from a
resolved configuration. The same frames and the same initialization feed
three reconstructions:

* ``init-only``: positions and amplitudes frozen at the localizer output,
  only the volume is optimized;
* ``joint``: amplitudes, positions and volume alternate;
* ``true-pos-amp``: positions and amplitudes frozen at the ground truth.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import config as cfgmod
from .domain import FluorophoreSet, ScatteringVolume, generate_phantom, make_rng
from .forward import ForwardModel
from .localize import Initialization, initialize
from .metrics import match_and_rmse, ssim_volume
from .optimize import OptimState, joint_optimize
from .sensor import FrameStack, add_poisson_noise, estimate_background, synthesize_background

log = logging.getLogger(__name__)

ARM_BLOCKS = {
    "init-only": ("volume",),
    "joint": None,  # the configured block sequence
    "true-pos-amp": ("volume",),
}


@dataclass
class Dataset:
    volume: ScatteringVolume
    fluorophores: FluorophoreSet
    stack: FrameStack  # noisy counts with the simulated backgrounds attached
    mean_images: np.ndarray  # noise-free molecule images, (L, M)


def simulate(cfg: dict, model: ForwardModel | None = None) -> tuple[Dataset, ForwardModel]:
    """Phantom, emitters, backgrounds and Poisson frames for ``cfg``.

    Random streams (all derived from ``run.seed``): 1 positions, 2
    amplitudes, 3 shot noise (one sub-stream per frame), 4 backgrounds.
    """
    seed = int(cfg["run"]["seed"])
    model = cfgmod.make_model(cfg) if model is None else model
    mol = cfg["molecules"]
    volume, fl = generate_phantom(model.grid, cfgmod.make_phantom_spec(cfg), int(mol["count"]),
                                  float(mol["min_separation_um"]), float(mol["mean_amplitude"]),
                                  seed, model.constants)
    mean = model.forward(volume.values, fl.positions, fl.amplitudes)
    b = cfg["background"]
    bg = synthesize_background(model.sensor, len(fl), float(b["spatial_scale_um"]),
                               float(b["temporal_scale_frames"]), float(b["level_counts"]), seed,
                               modulation=float(b["modulation"]))
    frames = np.stack([add_poisson_noise(mean[l] + bg[l], make_rng(seed, 3, l))
                       for l in range(len(fl))])
    return Dataset(volume, fl, FrameStack(model.sensor, frames, bg), mean), model


def working_stack(stack: FrameStack, cfg: dict) -> FrameStack:
    """The stack handed to the optimizer, with backgrounds per ``background.model``."""
    b = cfg["background"]
    if b["model"] == "estimated" or stack.backgrounds is None:
        if stack.backgrounds is None and b["model"] == "known":
            log.warning("frames carry no backgrounds; estimating them")
        est = estimate_background(stack, float(b["estimate_sigma_um"]),
                                  int(b["estimate_window_frames"]))
        return FrameStack(stack.config, stack.frames, est, stack.order)
    return stack


def reconstruct(stack: FrameStack, model: ForwardModel, cfg: dict, init: Initialization,
                blocks: tuple[str, ...] | None = None, positions=None, amplitudes=None,
                callback: Callable[[int, OptimState], None] | None = None) -> OptimState:
    """Run the alternating optimizer on the frames kept by ``init``."""
    ocfg = cfgmod.make_optim_config(cfg, blocks)
    p0 = init.positions if positions is None else np.asarray(positions, float)
    a0 = init.amplitudes if amplitudes is None else np.asarray(amplitudes, float)
    return joint_optimize(stack.subset(init.kept), model, ocfg, (init.f, p0, a0), callback)


@dataclass
class ArmResult:
    name: str
    status: str = "ok"
    ssim: float | None = None
    rmse_3d: float | None = None
    n_matched: int = 0
    objective_trace: list = field(default_factory=list)
    error: str | None = None
    state: OptimState | None = None

    def to_dict(self) -> dict:
        return {"status": self.status, "ssim": self.ssim, "rmse_3d_um": self.rmse_3d,
                "n_matched": self.n_matched, "objective_trace": self.objective_trace,
                "error": self.error}


@dataclass
class ExperimentReport:
    seed: int
    config: dict
    arms: dict[str, ArmResult]
    init_metrics: dict
    render_scale: dict
    runtime: float = 0.0  # seconds; kept out of the JSON so reports hash identically

    @property
    def completed(self) -> bool:
        return all(a.status == "ok" for a in self.arms.values())

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config": self.config,
                "arms": {k: v.to_dict() for k, v in self.arms.items()},
                "init": self.init_metrics, "render_scale": self.render_scale}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _metrics(cfg: dict, truth: Dataset, f, positions, kept) -> tuple[float, float | None, int]:
    me = cfg["metrics"]
    t = truth.volume.values
    s = ssim_volume(t, f, float(me["ssim_window_sigma"]), float(t.max() - t.min()))
    m = match_and_rmse(positions, truth.fluorophores.positions[kept], float(me["match_radius_um"]))
    return s, m.rmse_3d, m.n_matched


# --------------------------------------------------------------------------
# Rendering


def projections(values: np.ndarray) -> dict[str, np.ndarray]:
    """XY (max over z) and XZ (max over y) projections as ``(rows, cols)`` images.

    Rows run along y (XY) or along z with z increasing upward (XZ).
    """
    v = np.asarray(values, float)
    return {"xy": v.max(axis=2).T, "xz": v.max(axis=1).T[::-1]}


def to_uint8(img: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    span = vmax - vmin if vmax > vmin else 1.0
    return np.round(np.clip((img - vmin) / span, 0, 1) * 255).astype(np.uint8)


def write_renders(out_dir, name: str, values: np.ndarray, vmin: float, vmax: float) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for view, img in projections(values).items():
        p = out_dir / f"{name}_{view}.png"
        Image.fromarray(to_uint8(img, vmin, vmax), mode="L").save(p, format="PNG")
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Experiment


def run_experiment(cfg: dict, out_dir=None,
                   progress: Callable[[dict], None] | None = None) -> ExperimentReport:
    """Simulate once, run every configured arm, evaluate and (optionally) write outputs.

    An arm that raises is recorded as failed; the others still run.
    """
    t_start = time.perf_counter()
    emit = progress or (lambda rec: None)
    seed = int(cfg["run"]["seed"])
    data, model = simulate(cfg)
    emit({"event": "simulated", "frames": len(data.stack)})
    stack = working_stack(data.stack, cfg)
    init = initialize(stack, model, cfgmod.make_init_strategy(cfg))
    kept = init.kept
    s0, r0, n0 = _metrics(cfg, data, init.f, init.positions, kept)
    init_metrics = {"ssim": s0, "rmse_3d_um": r0, "n_matched": n0, "kept_frames": len(kept)}
    emit({"event": "initialized", **init_metrics})

    arms: dict[str, ArmResult] = {}
    for name in cfg["bench"]["arms"]:
        res = ArmResult(name)
        emit({"event": "arm_start", "arm": name})

        def cb(outer, state, _name=name):
            emit({"event": "outer", "arm": _name, "outer": outer,
                  "objective": state.history[-1]["objective"]})

        try:
            pos = amp = None
            if name == "true-pos-amp":
                pos = data.fluorophores.positions[kept]
                amp = data.fluorophores.amplitudes[kept]
            st = reconstruct(stack, model, cfg, init, ARM_BLOCKS[name], pos, amp, cb)
            res.state = st
            res.objective_trace = [h["objective"] for h in st.history]
            res.ssim, res.rmse_3d, res.n_matched = _metrics(cfg, data, st.f, st.positions, kept)
            failures = [h for h in st.history if "error" in h]
            if failures:
                res.status = "failed"
                res.error = failures[0]["error"]
        except Exception as exc:  # one arm failing must not sink the report
            log.exception("arm %s failed", name)
            res.status, res.error = "failed", repr(exc)
        arms[name] = res
        emit({"event": "arm_done", "arm": name, "status": res.status, "ssim": res.ssim,
              "rmse_3d_um": res.rmse_3d})

    t = data.volume.values
    scale = {"vmin": 0.0, "vmax": float(t.max()) if t.max() > 0 else 1.0, "mapping": "linear"}
    report = ExperimentReport(seed, cfg, arms, init_metrics, scale,
                              runtime=time.perf_counter() - t_start)
    if out_dir is not None:
        write_report(report, data, init, out_dir)
    return report


def write_report(report: ExperimentReport, data: Dataset, init: Initialization, out_dir) -> None:
    from .fileio import write_fluorophores, write_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    vmin, vmax = report.render_scale["vmin"], report.render_scale["vmax"]
    renders = out / "renders"
    write_renders(renders, "truth", data.volume.values, vmin, vmax)
    write_renders(renders, "init", init.f, vmin, vmax)
    write_volume(out / "truth_volume.vol", data.volume)
    write_fluorophores(out / "truth_fluorophores.csv", data.fluorophores)
    np.savetxt(out / "kept_frames.txt", init.kept, fmt="%d")
    for name, arm in report.arms.items():
        if arm.state is None:
            continue
        write_renders(renders, name, arm.state.f, vmin, vmax)
        write_volume(out / f"{name}_volume.vol", ScatteringVolume(data.volume.grid, arm.state.f))
        write_fluorophores(out / f"{name}_fluorophores.csv",
                           FluorophoreSet(arm.state.positions, arm.state.amplitudes))
