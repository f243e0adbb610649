"""Run configuration: sectioned TOML with units in key names.

Every key has a type and a default; unknown sections or keys are errors, and
all problems found in one file are reported together. The resolved
configuration is a plain nested dict (JSON-serializable) so manifests can
carry it and commands can be re-run from it.
"""

from __future__ import annotations

import copy
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .domain import Ellipsoid, Grid3, OpticalConstants, PhantomSpec, Shell, solid_from_dict
from .localize import InitStrategy
from .optimize import BLOCKS, OptimConfig
from .sensor import BiplaneConfig

ARMS = ("init-only", "joint", "true-pos-amp")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per offending key."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


_NUM = (int, float)
_OPT = object()  # marks keys whose default is "absent"

# section -> key -> (accepted python types, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
    },
    "grid": {
        "counts": (list, [32, 32, 16]),
        "spacing_um": (list, [0.1, 0.1, 0.1]),
        "origin_um": (list, [0.0, 0.0, 0.0]),
    },
    "optics": {
        "wavelength_um": (_NUM, 0.647),
        "background_ri": (_NUM, 1.333),
    },
    "camera": {
        "numerical_aperture": (_NUM, 1.2),
        "plane_offsets_um": (list, [-0.3, 0.3]),
        "pixel_pitch_um": (_NUM, 0.1),
        "camera_counts": (list, [32, 32]),
        "focal_plane_z_um": (_NUM, 0.8),
        "camera_center_um": (list, _OPT),
        "intensity_scale": (_NUM, _OPT),
    },
    "phantom": {
        "labeling": (str, "structure"),
        "margin_um": (_NUM, 0.15),
        "solids": (list, [
            {"kind": "ellipsoid", "center_um": [1.0, 1.1, 0.8], "semi_axes_um": [0.6, 0.5, 0.4],
             "delta_ri": 0.05},
            {"kind": "shell", "center_um": [2.2, 2.1, 0.8], "outer_radius_um": 0.6,
             "inner_radius_um": 0.35, "delta_ri": 0.05},
        ]),
    },
    "molecules": {
        "count": (int, 50),
        "min_separation_um": (_NUM, 0.02),
        "mean_amplitude": (_NUM, 1000.0),
    },
    "background": {
        "level_counts": (_NUM, 100.0),
        "spatial_scale_um": (_NUM, 2.0),
        "temporal_scale_frames": (_NUM, 50.0),
        "modulation": (_NUM, 0.3),
        "model": (str, "known"),
        "estimate_sigma_um": (_NUM, 0.3),
        "estimate_window_frames": (int, 11),
    },
    "solver": {
        "method": (str, "bicgstab"),
        "tolerance": (_NUM, 1e-6),
        "max_iterations": (int, 200),
        "kernel": (str, "sampled"),
        "pad_factor": (int, 2),
        "smoothing_um2": (_NUM, 1e-4),
        "batch_size": (int, 16),
    },
    "init": {
        "volume": (str, "widefield"),
        "widefield_peak": (_NUM, 0.5),
        "detection_sigma_um": (_NUM, 0.1),
        "detection_snr": (_NUM, 5.0),
        "window_radius_um": (_NUM, 0.6),
        "z_samples": (int, 41),
    },
    "optimizer": {
        "tau": (_NUM, 0.2),
        "outer_iterations": (int, 5),
        "amplitude_steps": (int, 3),
        "position_steps": (int, 5),
        "fista_steps": (int, 10),
        "tv_iterations": (int, 30),
        "position_step_um": (_NUM, 0.05),
        "max_position_move_um": (_NUM, 0.2),
        "relaxation": (_NUM, 1.3),
        "tolerance": (_NUM, 1e-5),
        "beta": (_NUM, 1e-8),
        "volume_step": (_NUM, 1.0),
        "amplitude_floor": (_NUM, 1e-3),
        "blocks": (list, list(BLOCKS)),
        "checkpoint_every": (int, 1),
    },
    "metrics": {
        "ssim_window_sigma": (_NUM, 1.5),
        "match_radius_um": (_NUM, 0.5),
    },
    "bench": {
        "arms": (list, list(ARMS)),
    },
}

_SOLID_KEYS = {
    "ellipsoid": {"kind", "center_um", "semi_axes_um", "delta_ri"},
    "shell": {"kind", "center_um", "outer_radius_um", "inner_radius_um", "delta_ri"},
}


def _type_name(types) -> str:
    if types is _NUM:
        return "number"
    return {int: "integer", str: "string", list: "array"}.get(types, str(types))


def _type_ok(value, types) -> bool:
    if isinstance(value, bool):
        return False
    if types is float:
        types = _NUM
    return isinstance(value, types)


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items() if v[1] is not _OPT}
            for sec, keys in SCHEMA.items()}


def _check_numbers(problems, key, values, n=None, kind=_NUM, positive=False):
    if not isinstance(values, list) or (n is not None and len(values) != n):
        problems.append(f"{key}: expected an array of {n} values")
        return
    for v in values:
        if isinstance(v, bool) or not isinstance(v, kind):
            problems.append(f"{key}: entries must be {_type_name(kind)}s, got {v!r}")
            return
        if positive and not v > 0:
            problems.append(f"{key}: entries must be > 0, got {v!r}")
            return


def _check_solid(problems, idx, solid):
    key = f"phantom.solids[{idx}]"
    if not isinstance(solid, dict):
        problems.append(f"{key}: expected a table")
        return
    kind = solid.get("kind")
    if kind not in _SOLID_KEYS:
        problems.append(f"{key}.kind: must be one of {sorted(_SOLID_KEYS)}, got {kind!r}")
        return
    need = _SOLID_KEYS[kind]
    for k in sorted(set(solid) - need):
        problems.append(f"{key}.{k}: unknown key for a {kind}")
    for k in sorted(need - set(solid)):
        problems.append(f"{key}.{k}: missing")
    if "center_um" in solid:
        _check_numbers(problems, f"{key}.center_um", solid["center_um"], 3)
    if "semi_axes_um" in solid:
        _check_numbers(problems, f"{key}.semi_axes_um", solid["semi_axes_um"], 3, positive=True)
    for k in ("outer_radius_um", "inner_radius_um", "delta_ri"):
        if k in solid and (isinstance(solid[k], bool) or not isinstance(solid[k], _NUM)):
            problems.append(f"{key}.{k}: expected a number")
    radii = [solid.get(k) for k in ("inner_radius_um", "outer_radius_um")]
    if kind == "shell" and all(isinstance(r, _NUM) and not isinstance(r, bool) for r in radii):
        if not 0 <= radii[0] < radii[1]:
            problems.append(f"{key}: need 0 <= inner_radius_um < outer_radius_um")
    if "delta_ri" in solid and isinstance(solid["delta_ri"], _NUM) and solid["delta_ri"] < 0:
        problems.append(f"{key}.delta_ri: must be >= 0 (the potential is nonnegative)")


def _semantic_checks(cfg: dict, problems: list[str]) -> None:
    g = cfg["grid"]
    _check_numbers(problems, "grid.counts", g["counts"], 3, int, positive=True)
    _check_numbers(problems, "grid.spacing_um", g["spacing_um"], 3, positive=True)
    _check_numbers(problems, "grid.origin_um", g["origin_um"], 3)
    o = cfg["optics"]
    if not o["wavelength_um"] > 0:
        problems.append("optics.wavelength_um: must be > 0")
    if not o["background_ri"] > 1:
        problems.append("optics.background_ri: must be > 1")
    c = cfg["camera"]
    _check_numbers(problems, "camera.plane_offsets_um", c["plane_offsets_um"], 2)
    _check_numbers(problems, "camera.camera_counts", c["camera_counts"], 2, int, positive=True)
    if "camera_center_um" in c:
        _check_numbers(problems, "camera.camera_center_um", c["camera_center_um"], 2)
    if not 0 < c["numerical_aperture"] < o["background_ri"]:
        problems.append("camera.numerical_aperture: must lie in (0, background_ri)")
    if not c["pixel_pitch_um"] > 0:
        problems.append("camera.pixel_pitch_um: must be > 0")
    if "intensity_scale" in c and not c["intensity_scale"] > 0:
        problems.append("camera.intensity_scale: must be > 0")
    p = cfg["phantom"]
    if p["labeling"] not in ("structure", "uniform"):
        problems.append("phantom.labeling: must be 'structure' or 'uniform'")
    if p["margin_um"] < 0:
        problems.append("phantom.margin_um: must be >= 0")
    for i, s in enumerate(p["solids"]):
        _check_solid(problems, i, s)
    m = cfg["molecules"]
    if m["count"] < 1:
        problems.append("molecules.count: must be >= 1")
    if m["min_separation_um"] < 0:
        problems.append("molecules.min_separation_um: must be >= 0")
    if not m["mean_amplitude"] > 0:
        problems.append("molecules.mean_amplitude: must be > 0")
    b = cfg["background"]
    if b["level_counts"] < 0:
        problems.append("background.level_counts: must be >= 0")
    for k in ("spatial_scale_um", "temporal_scale_frames", "estimate_sigma_um"):
        if not b[k] > 0:
            problems.append(f"background.{k}: must be > 0")
    if b["estimate_window_frames"] < 1:
        problems.append("background.estimate_window_frames: must be >= 1")
    if b["model"] not in ("known", "estimated"):
        problems.append("background.model: must be 'known' or 'estimated'")
    s = cfg["solver"]
    if s["method"] not in ("bicgstab", "born"):
        problems.append("solver.method: must be 'bicgstab' or 'born'")
    if s["kernel"] not in ("sampled", "spectral"):
        problems.append("solver.kernel: must be 'sampled' or 'spectral'")
    if not s["tolerance"] > 0:
        problems.append("solver.tolerance: must be > 0")
    for k in ("max_iterations", "batch_size"):
        if s[k] < 1:
            problems.append(f"solver.{k}: must be >= 1")
    if s["pad_factor"] < 2:
        problems.append("solver.pad_factor: must be >= 2 (aperiodic convolution)")
    if not s["smoothing_um2"] > 0:
        problems.append("solver.smoothing_um2: must be > 0")
    i = cfg["init"]
    if i["volume"] not in ("widefield", "zero"):
        problems.append("init.volume: must be 'widefield' or 'zero'")
    if i["widefield_peak"] < 0:
        problems.append("init.widefield_peak: must be >= 0")
    if i["z_samples"] < 3:
        problems.append("init.z_samples: must be >= 3")
    op = cfg["optimizer"]
    if op["tau"] < 0:
        problems.append("optimizer.tau: must be >= 0")
    for k in ("outer_iterations", "amplitude_steps", "position_steps", "fista_steps",
              "tv_iterations"):
        if op[k] < 0:
            problems.append(f"optimizer.{k}: must be >= 0")
    for k in ("position_step_um", "max_position_move_um", "volume_step", "beta",
              "amplitude_floor", "relaxation"):
        if not op[k] > 0:
            problems.append(f"optimizer.{k}: must be > 0")
    if op["checkpoint_every"] < 1:
        problems.append("optimizer.checkpoint_every: must be >= 1")
    bad = [x for x in op["blocks"] if x not in BLOCKS]
    if bad:
        problems.append(f"optimizer.blocks: unknown block(s) {bad}; choose from {list(BLOCKS)}")
    me = cfg["metrics"]
    if not me["ssim_window_sigma"] > 0:
        problems.append("metrics.ssim_window_sigma: must be > 0")
    if not me["match_radius_um"] > 0:
        problems.append("metrics.match_radius_um: must be > 0")
    arms = cfg["bench"]["arms"]
    bad = [a for a in arms if a not in ARMS]
    if bad:
        problems.append(f"bench.arms: unknown arm(s) {bad}; choose from {list(ARMS)}")
    elif not arms or len(set(arms)) != len(arms):
        problems.append("bench.arms: need at least one arm, without repeats")


def resolve(raw: dict) -> dict:
    """Merge ``raw`` over the defaults and validate; raises :class:`ConfigError`."""
    problems: list[str] = []
    cfg = defaults()
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a table"])
    for sec, body in raw.items():
        if sec not in SCHEMA:
            problems.append(f"[{sec}]: unknown section")
            continue
        if not isinstance(body, dict):
            problems.append(f"[{sec}]: expected a table")
            continue
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                problems.append(f"{sec}.{key}: unknown key")
                continue
            types = SCHEMA[sec][key][0]
            if not _type_ok(value, types):
                problems.append(f"{sec}.{key}: expected {_type_name(types)}, got {value!r}")
                continue
            cfg[sec][key] = copy.deepcopy(value)
    if not problems:
        _semantic_checks(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path, overrides: dict | None = None) -> dict:
    """Read and resolve a TOML file (``None`` means all defaults)."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
    if overrides:
        for sec, body in overrides.items():
            raw.setdefault(sec, {}).update(body)
    return resolve(raw)


# --------------------------------------------------------------------------
# Builders from a resolved configuration


def make_grid(cfg: dict) -> Grid3:
    g = cfg["grid"]
    return Grid3(tuple(g["counts"]), tuple(g["spacing_um"]), tuple(g["origin_um"]))


def make_constants(cfg: dict) -> OpticalConstants:
    o = cfg["optics"]
    return OpticalConstants(wavelength=float(o["wavelength_um"]),
                            background_ri=float(o["background_ri"]))


def make_camera(cfg: dict) -> BiplaneConfig:
    c = cfg["camera"]
    center = c.get("camera_center_um")
    scale = c.get("intensity_scale")
    return BiplaneConfig(
        numerical_aperture=float(c["numerical_aperture"]),
        plane_offsets=tuple(c["plane_offsets_um"]),
        pixel_pitch=float(c["pixel_pitch_um"]),
        camera_counts=tuple(c["camera_counts"]),
        focal_plane_z=float(c["focal_plane_z_um"]),
        camera_center=None if center is None else tuple(center),
        intensity_scale=None if scale is None else float(scale),
    )


def make_phantom_spec(cfg: dict) -> PhantomSpec:
    p = cfg["phantom"]
    solids: tuple[Ellipsoid | Shell, ...] = tuple(solid_from_dict(s) for s in p["solids"])
    return PhantomSpec(solids=solids, labeling=p["labeling"], margin=float(p["margin_um"]))


def make_model(cfg: dict):
    from .forward import ForwardModel

    s = cfg["solver"]
    return ForwardModel.build(
        make_grid(cfg), make_constants(cfg), make_camera(cfg), eps=float(s["smoothing_um2"]),
        tol=float(s["tolerance"]), max_iter=int(s["max_iterations"]),
        pad_factor=int(s["pad_factor"]), kernel_method=s["kernel"], solver=s["method"],
        batch_size=int(s["batch_size"]))


def make_optim_config(cfg: dict, blocks: tuple[str, ...] | None = None) -> OptimConfig:
    o = cfg["optimizer"]
    return OptimConfig(
        tau=float(o["tau"]),
        outer_iterations=int(o["outer_iterations"]),
        amplitude_steps=int(o["amplitude_steps"]),
        position_steps=int(o["position_steps"]),
        fista_steps=int(o["fista_steps"]),
        tv_iterations=int(o["tv_iterations"]),
        position_step=float(o["position_step_um"]),
        max_position_move=float(o["max_position_move_um"]),
        relaxation=float(o["relaxation"]),
        tolerance=float(o["tolerance"]),
        beta=float(o["beta"]),
        volume_step=float(o["volume_step"]),
        amplitude_floor=float(o["amplitude_floor"]),
        blocks=tuple(o["blocks"]) if blocks is None else tuple(blocks),
    )


def make_init_strategy(cfg: dict, positions=None) -> InitStrategy:
    i = cfg["init"]
    return InitStrategy(
        widefield_peak=float(i["widefield_peak"]),
        volume=i["volume"],
        positions=positions,
        detection_sigma=float(i["detection_sigma_um"]),
        detection_snr=float(i["detection_snr"]),
        window_radius=float(i["window_radius_um"]),
        z_samples=int(i["z_samples"]),
    )
