"""Command-line interface: ``simulate``, ``reconstruct``, ``evaluate``, ``bench``, ``rerun``.

Exit codes: 0 success, 2 validation error, 3 I/O or format error, 4 solver
failure. Logs go to stderr as ``key=value`` records; progress goes to
``progress.jsonl`` in the output directory; every command writes
``manifest.json`` listing its outputs with SHA-256 hashes.

Outputs are staged in ``<out>.partial`` and moved into ``<out>`` only when
the command finishes, so a failed run leaves no half-written files behind.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import waves
from .bench import run_experiment, simulate, reconstruct, working_stack
from .domain import FluorophoreSet, ScatteringVolume
from .fileio import (FormatError, read_fluorophores, read_frames, read_volume, sha256_file,
                     write_fluorophores, write_frames, write_volume)
from .forward import SolverError
from .localize import initialize
from .metrics import match_and_rmse, ssim_volume

log = logging.getLogger("odtsmlm")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_SOLVER = 0, 2, 3, 4


class ValidationError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Logging and output plumbing


class KeyValueFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        ts = _dt.datetime.fromtimestamp(record.created, _dt.timezone.utc)
        msg = record.getMessage().replace('"', "'")
        line = (f'ts={ts.strftime("%Y-%m-%dT%H:%M:%S.%fZ")} level={record.levelname} '
                f'module={record.name} msg="{msg}"')
        extra = getattr(record, "kv", None)
        if extra:
            line += "".join(f" {k}={json.dumps(v)}" for k, v in extra.items())
        if record.exc_info:
            line += " exc=" + json.dumps(self.formatException(record.exc_info))
        return line


def setup_logging(level: str = "INFO") -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_odtsmlm", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    handler._odtsmlm = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


class Progress:
    """Append-only JSON-lines sidecar."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")
        self._t0 = time.perf_counter()

    def __call__(self, record: dict) -> None:
        rec = {"elapsed_s": round(time.perf_counter() - self._t0, 3), **record}
        self._fh.write(json.dumps(rec, default=float) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@contextlib.contextmanager
def staged(out: Path):
    """Yield a staging directory; on success move its files into ``out``."""
    stage = out.with_name(out.name + ".partial")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(stage.rglob("*")):
        if p.is_file():
            dest = out / p.relative_to(stage)
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(p, dest)
    shutil.rmtree(stage, ignore_errors=True)


def _hash_outputs(stage: Path, skip=("manifest.json", "progress.jsonl")) -> dict:
    return {str(p.relative_to(stage)): sha256_file(p) for p in sorted(stage.rglob("*"))
            if p.is_file() and p.name not in skip}


def write_manifest(stage: Path, command: str, cfg: dict, inputs: dict, options: dict,
                   started: float, status: str = "ok", extra: dict | None = None) -> dict:
    now = time.time()
    manifest = {
        "command": command,
        "tool": "odtsmlm",
        "version": __version__,
        "status": status,
        "seed": cfg["run"]["seed"] if cfg else None,
        "config": cfg,
        "inputs": inputs,
        "options": options,
        "outputs": _hash_outputs(stage),
        "started_utc": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "finished_utc": _dt.datetime.fromtimestamp(now, _dt.timezone.utc).isoformat(),
        "runtime_s": round(now - started, 3),
    }
    if extra:
        manifest.update(extra)
    (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float) + "\n",
                                         encoding="utf-8")
    return manifest


def _input_record(path) -> dict:
    p = Path(path)
    return {"path": str(p.resolve()), "sha256": sha256_file(p)}


def _load_config(args) -> dict:
    over = {"run": {"seed": args.seed}} if getattr(args, "seed", None) is not None else None
    cfg = args.resolved_config if getattr(args, "resolved_config", None) else None
    if cfg is not None:
        cfg = cfgmod.resolve(cfg)
        if over:
            cfg["run"]["seed"] = args.seed
        return cfg
    if args.config is not None and not Path(args.config).is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    return cfgmod.load(args.config, over)


def _apply_threads(args) -> None:
    n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ValidationError("--threads must be >= 1")
    waves.FFT_WORKERS = n


# --------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    _apply_threads(args)
    out = Path(args.out)
    started = time.time()
    with staged(out) as stage:
        prog = Progress(stage / "progress.jsonl")
        try:
            data, _ = simulate(cfg)
            prog({"event": "simulated", "frames": len(data.stack)})
            write_volume(stage / "phantom.vol", data.volume)
            write_fluorophores(stage / "fluorophores.csv", data.fluorophores)
            write_frames(stage / "frames.bin", data.stack, dtype=args.frames_dtype)
        finally:
            prog.close()
        write_manifest(stage, "simulate", cfg, {}, {"frames_dtype": args.frames_dtype}, started)
    log.info("simulated %d frames into %s", len(data.stack), out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    _apply_threads(args)
    stack = read_frames(args.frames)
    model = cfgmod.make_model(cfg)
    if stack.config != model.sensor:
        raise ValidationError("the frame file's camera configuration differs from [camera]")
    given = read_fluorophores(args.positions) if args.positions else None
    if given is not None and len(given) != len(stack):
        raise ValidationError(f"{args.positions}: {len(given)} rows for {len(stack)} frames")
    if given is not None and not np.all(model.grid.contains(given.positions)):
        raise ValidationError(f"{args.positions}: positions outside the grid")
    if args.frozen_positions and given is None:
        raise ValidationError("--frozen-positions needs --positions")
    inputs = {"frames": _input_record(args.frames)}
    if args.positions:
        inputs["positions"] = _input_record(args.positions)
    out = Path(args.out)
    started = time.time()
    blocks = ("volume",) if args.frozen_positions else None
    with staged(out) as stage:
        prog = Progress(stage / "progress.jsonl")
        ckpt = stage / "checkpoint"
        ckpt.mkdir()
        every = int(cfg["optimizer"]["checkpoint_every"])

        def callback(outer, state):
            prog({"event": "outer", "outer": outer, "objective": state.history[-1]["objective"]})
            if outer % every:
                return
            write_volume(ckpt / "volume.vol", ScatteringVolume(model.grid, state.f))
            write_fluorophores(ckpt / "fluorophores.csv",
                               FluorophoreSet(state.positions, state.amplitudes))
            diag = {"outer": outer, "history": state.history,
                    "diagnostics": {k: v for k, v in state.diagnostics.items()
                                    if k != "position_scale"}}
            (ckpt / "state.json").write_text(json.dumps(diag, default=float, sort_keys=True)
                                             + "\n")

        try:
            work = working_stack(stack, cfg)
            init = initialize(work, model, cfgmod.make_init_strategy(cfg, given))
            prog({"event": "initialized", "kept_frames": len(init.kept)})
            state = reconstruct(work, model, cfg, init, blocks, callback=callback)
        finally:
            prog.close()
        write_volume(stage / "volume.vol", ScatteringVolume(model.grid, state.f))
        write_fluorophores(stage / "fluorophores.csv",
                           FluorophoreSet(state.positions, state.amplitudes))
        np.savetxt(stage / "kept_frames.txt", init.kept, fmt="%d")
        with open(stage / "objective.csv", "w", encoding="utf-8") as fh:
            fh.write("outer,block,objective\n")
            for h in state.history:
                fh.write(f"{h['outer']},{h['block']},{h['objective']!r}\n")
        failures = [h for h in state.history if "error" in h]
        status = "solver_failure" if failures else "ok"
        write_manifest(stage, "reconstruct", cfg, inputs,
                       {"frozen_positions": bool(args.frozen_positions)}, started, status,
                       {"failures": failures} if failures else None)
    if failures:
        log.error("reconstruction finished with %d failed block(s)", len(failures))
        return EXIT_SOLVER
    log.info("reconstruction written to %s", out)
    return EXIT_OK


def _read_dir(d: Path, volume_names: tuple[str, ...]):
    for name in volume_names:
        if (d / name).is_file():
            vol = read_volume(d / name)
            break
    else:
        raise FileNotFoundError(f"{d}: no volume file ({' or '.join(volume_names)})")
    csv = d / "fluorophores.csv"
    if not csv.is_file():
        raise FileNotFoundError(f"{csv}: missing")
    return vol, read_fluorophores(csv)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    truth_dir, recon_dir = Path(args.truth), Path(args.recon)
    tv, tf = _read_dir(truth_dir, ("phantom.vol", "volume.vol"))
    rv, rf = _read_dir(recon_dir, ("volume.vol", "phantom.vol"))
    if not isinstance(tv, ScatteringVolume) or not isinstance(rv, ScatteringVolume):
        raise ValidationError("evaluate needs real-valued potential volumes")
    if tv.grid != rv.grid:
        raise ValidationError(f"grid mismatch: truth {tv.grid} vs reconstruction {rv.grid}")
    kept_file = recon_dir / "kept_frames.txt"
    truth_pos = tf.positions
    if kept_file.is_file():
        kept = np.atleast_1d(np.loadtxt(kept_file, dtype=int))
        truth_pos = truth_pos[kept]
    me = cfg["metrics"]
    t = tv.values
    s = ssim_volume(t, rv.values, float(me["ssim_window_sigma"]), float(t.max() - t.min()))
    m = match_and_rmse(rf.positions, truth_pos, float(me["match_radius_um"]))
    result = {"ssim": s, "rmse_3d_um": m.rmse_3d, "n_matched": m.n_matched,
              "unmatched_estimates": m.unmatched_estimates,
              "unmatched_truth": m.unmatched_truth, "metrics": me}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".partial")
    tmp.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, out)
    log.info("evaluation written to %s", out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    _apply_threads(args)
    out = Path(args.out)
    started = time.time()
    with staged(out) as stage:
        prog = Progress(stage / "progress.jsonl")
        try:
            report = run_experiment(cfg, stage, prog)
        finally:
            prog.close()
        status = "ok" if report.completed else "arm_failure"
        write_manifest(stage, "bench", cfg, {}, {}, started, status,
                       {"arm_runtime_total_s": round(report.runtime, 3)})
    for name, arm in report.arms.items():
        log.info("arm %s: status=%s ssim=%s rmse_3d_um=%s", name, arm.status, arm.ssim,
                 arm.rmse_3d)
    return EXIT_OK if report.completed else EXIT_SOLVER


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "bench": cmd_bench}


def cmd_rerun(args) -> int:
    """Re-execute the command recorded in a manifest with the same config and inputs."""
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    command = manifest.get("command")
    if command not in COMMANDS or command == "evaluate":
        raise ValidationError(f"manifest command {command!r} cannot be re-run")
    for key, rec in manifest.get("inputs", {}).items():
        if not Path(rec["path"]).is_file():
            raise FileNotFoundError(f"input {key} missing: {rec['path']}")
        if sha256_file(rec["path"]) != rec["sha256"]:
            raise ValidationError(f"input {key} changed since the manifest was written")
    ns = argparse.Namespace(config=None, resolved_config=manifest["config"], seed=None,
                            out=args.out, threads=args.threads)
    opts = manifest.get("options", {})
    inputs = manifest.get("inputs", {})
    if command == "simulate":
        ns.frames_dtype = opts.get("frames_dtype", "u32")
    if command == "reconstruct":
        ns.frames = inputs["frames"]["path"]
        ns.positions = inputs.get("positions", {}).get("path")
        ns.frozen_positions = opts.get("frozen_positions", False)
    return COMMANDS[command](ns)


# --------------------------------------------------------------------------
# Entry point


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML configuration file")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--threads", type=int, default=None,
                   help="FFT worker threads (default: logical cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odtsmlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a phantom and its biplane frames")
    _common(p, "output directory")
    p.add_argument("--frames-dtype", choices=("u32", "f64"), default="u32")

    p = sub.add_parser("reconstruct", help="jointly reconstruct volume and emitters")
    _common(p, "output directory")
    p.add_argument("--frames", type=Path, required=True, help="frame-stack file")
    p.add_argument("--positions", type=Path, default=None,
                   help="fluorophore CSV replacing the built-in localizer")
    p.add_argument("--frozen-positions", action="store_true",
                   help="keep the supplied positions and amplitudes fixed")

    p = sub.add_parser("evaluate", help="SSIM and matched RMSE of a reconstruction")
    _common(p, "output JSON file")
    p.add_argument("--truth", type=Path, required=True, help="simulate output directory")
    p.add_argument("--recon", type=Path, required=True, help="reconstruct output directory")

    p = sub.add_parser("bench", help="three-arm comparison experiment")
    _common(p, "output directory")

    p = sub.add_parser("rerun", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    handler = cmd_rerun if args.command == "rerun" else COMMANDS[args.command]
    try:
        return handler(args)
    except cfgmod.ConfigError as exc:
        for problem in exc.problems:
            log.error("config: %s", problem)
        return EXIT_VALIDATION
    except FormatError as exc:
        log.error("format error: %s", exc)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except (SolverError, SolverFailure) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
