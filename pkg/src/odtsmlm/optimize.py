"""Alternating minimization of the KL data term plus TV over (f, positions, amplitudes).

Each block keeps the iterate feasible (f >= 0, positions in the closed grid
box, amplitudes > 0) and never increases the objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .forward import (ForwardModel, gradient3, gradient3_adjoint, kl_per_frame,
                      total_variation)
from .sensor import FrameStack, intensity

log = logging.getLogger(__name__)

BLOCKS = ("amplitudes", "positions", "volume")
FISTA_VARIANT = "momentum-relaxed FISTA, monotone with adaptive restart, backtracking step"


@dataclass(frozen=True)
class KLParams:
    beta: float = 1e-8
    backgrounds: np.ndarray | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


@dataclass(frozen=True)
class OptimConfig:
    tau: float = 1.0
    outer_iterations: int = 20
    amplitude_steps: int = 3
    position_steps: int = 5
    fista_steps: int = 10
    tv_iterations: int = 30
    position_step: float = 0.05  # um, length of the first trial move
    max_position_move: float = 0.2  # um, cap on a single trial move
    relaxation: float = 1.3
    tolerance: float = 1e-5
    beta: float = 1e-8
    volume_step: float = 1.0  # largest potential change of the first trial step
    amplitude_floor: float = 1e-3
    blocks: tuple[str, ...] = BLOCKS
    #: optional boolean array; voxels outside it are held fixed by the volume block
    volume_mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        for name in ("outer_iterations", "amplitude_steps", "position_steps", "fista_steps",
                     "tv_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        unknown = set(self.blocks) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown blocks {sorted(unknown)}")


@dataclass
class OptimState:
    f: np.ndarray
    positions: np.ndarray
    amplitudes: np.ndarray
    history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def copy(self) -> "OptimState":
        return OptimState(self.f.copy(), self.positions.copy(), self.amplitudes.copy(),
                          list(self.history), dict(self.diagnostics))


# ------------------------------------------------------------------------
# TV proximal map with nonnegativity


def _project_unit_ball(p: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.sum(p * p, axis=0))
    return p / np.maximum(n, 1.0)


def tv_primal_dual_values(v, lam, x, p):
    """Primal value at ``x`` and dual value at ``p`` for the constrained TV prox."""
    primal = 0.5 * np.sum((x - v) ** 2) + lam * total_variation(x)
    w = v - lam * gradient3_adjoint(p)
    cw = np.maximum(w, 0)
    dual = 0.5 * np.sum(v * v) - 0.5 * np.sum(w * w) + 0.5 * np.sum((cw - w) ** 2)
    return float(primal), float(dual)


def tv_prox(v: np.ndarray, lam: float, n_iter: int = 30, p0: np.ndarray | None = None,
            gap_tol: float | None = None) -> tuple[np.ndarray, np.ndarray, dict]:
    """``argmin_{x >= 0} 0.5 ||x - v||^2 + lam TV(x)`` by fast dual projected gradient.

    Returns the primal solution, the dual field (reusable as ``p0``) and a
    small info dict with the iteration count and, if requested, the gap.
    """
    v = np.asarray(v, float)
    if lam <= 0:
        return np.maximum(v, 0), np.zeros((3,) + v.shape), {"iterations": 0, "gap": 0.0}
    step = 1.0 / (12.0 * lam)
    p = np.zeros((3,) + v.shape) if p0 is None else np.array(p0, float)
    q = p.copy()
    t = 1.0
    info = {"iterations": 0}
    for k in range(n_iter):
        x = np.maximum(v - lam * gradient3_adjoint(q), 0)
        p_new = _project_unit_ball(q + step * gradient3(x))
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        q = p_new + ((t - 1) / t_new) * (p_new - p)
        p, t = p_new, t_new
        info["iterations"] = k + 1
        if gap_tol is not None and (k + 1) % 25 == 0:
            x = np.maximum(v - lam * gradient3_adjoint(p), 0)
            pr, du = tv_primal_dual_values(v, lam, x, p)
            if pr - du <= gap_tol * abs(pr):
                break
    x = np.maximum(v - lam * gradient3_adjoint(p), 0)
    if gap_tol is not None:
        pr, du = tv_primal_dual_values(v, lam, x, p)
        info["gap"] = pr - du
        info["primal"] = pr
    return x, p, info


# ------------------------------------------------------------------------
# Problem with per-frame caching


@dataclass
class _Eval:
    u: np.ndarray  # (L, Nx, Ny, Nz) total fields, unit amplitude
    w: np.ndarray  # (L, 2, My, Mx) camera fields
    H: np.ndarray  # (L, M) base images


class Problem:
    """Frames, backgrounds and the model, with fields cached at the current (f, positions)."""

    def __init__(self, model: ForwardModel, frames: np.ndarray, backgrounds: np.ndarray | None,
                 beta: float):
        self.model = model
        self.y = np.asarray(frames, float)
        self.b = np.zeros_like(self.y) if backgrounds is None else np.asarray(backgrounds, float)
        self.beta = float(beta)
        self.f: np.ndarray | None = None
        self.pos: np.ndarray | None = None
        self.cur: _Eval | None = None
        self.tv_dual: np.ndarray | None = None

    @classmethod
    def from_stack(cls, stack: FrameStack, model: ForwardModel, beta: float) -> "Problem":
        return cls(model, stack.frames, stack.backgrounds, beta)

    def evaluate(self, f, pos, x0=None) -> _Eval:
        u, _ = self.model.total_fields(f, pos, x0)
        w = self.model.camera_fields(u)
        return _Eval(u, w, intensity(w))

    def set_point(self, f, pos, warm: bool = True) -> None:
        x0 = self.cur.u if (warm and self.cur is not None) else None
        self.f = np.array(f, float)
        self.pos = np.array(pos, float)
        self.cur = self.evaluate(self.f, self.pos, x0)

    def ensure(self, f, pos) -> None:
        if (self.cur is None or self.f.shape != np.shape(f) or not np.array_equal(self.f, f)
                or not np.array_equal(self.pos, pos)):
            same_f = self.f is not None and np.array_equal(self.f, f)
            if same_f and self.pos is not None and self.pos.shape == np.shape(pos):
                changed = np.flatnonzero(np.any(self.pos != pos, axis=1))
                ev = self.evaluate(self.f, np.asarray(pos)[changed], self.cur.u[changed])
                self.commit_frames(changed, np.asarray(pos)[changed], ev)
            else:
                self.set_point(f, pos)

    def commit_frames(self, idx, pos, ev: _Eval) -> None:
        self.pos[idx] = pos
        self.cur.u[idx] = ev.u
        self.cur.w[idx] = ev.w
        self.cur.H[idx] = ev.H

    def data_terms(self, a, H=None, idx=None) -> np.ndarray:
        H = self.cur.H if H is None else H
        y, b = (self.y, self.b) if idx is None else (self.y[idx], self.b[idx])
        a = np.asarray(a, float)
        return kl_per_frame(a[:, None] ** 2 * H + b, y, self.beta)

    def objective(self, a, tau: float, f=None) -> float:
        f = self.f if f is None else f
        return float(np.sum(self.data_terms(a))) + tau * total_variation(f)

    def adjoint_fields(self, a, ev: _Eval | None = None, f=None) -> np.ndarray:
        """Adjoint-state fields for every frame at the cached (or given) point."""
        ev = self.cur if ev is None else ev
        f = self.f if f is None else f
        a = np.asarray(a, float)
        z = a[:, None] ** 2 * ev.H + self.b
        r = 1.0 - self.y / (z + self.beta)
        src = 2 * a[:, None, None, None] ** 2 * r.reshape(ev.w.shape) * ev.w
        v, _ = self.model.adjoint_fields(f, self.model.camera_adjoint(src))
        return v

    def position_gradient(self, v: np.ndarray, pos=None, idx=None) -> np.ndarray:
        pos = self.pos if pos is None else pos
        du = self.model.incident_gradient(pos)  # (3, L, ...)
        return np.real(np.sum(np.conj(v)[None] * du, axis=(-3, -2, -1))).T

    def volume_gradient(self, v: np.ndarray, ev: _Eval | None = None) -> np.ndarray:
        ev = self.cur if ev is None else ev
        grad = np.zeros(self.model.grid.shape)
        bs = self.model.batch_size
        for s in range(0, len(v), bs):
            gv = self.model.kernel.apply_adjoint(v[s:s + bs])
            grad += np.sum(np.real(np.conj(gv) * ev.u[s:s + bs]), axis=0)
        return grad


# ------------------------------------------------------------------------
# Blocks


def _amplitude_derivs(a, H, y, b, beta):
    z = a * a * H + b
    zb = z + beta
    r = 1.0 - y / zb
    phi = float(np.sum(z) - np.sum(y * np.log(zb)))
    d1 = float(np.sum(2 * a * H * r))
    d2 = float(np.sum(2 * H * r + 4 * a * a * H * H * y / zb**2))
    return phi, d1, d2


def newton_amplitude(H, y, b, beta, a0, steps=3, floor=1e-3) -> tuple[float, bool]:
    """Safeguarded 1-D Newton on ``phi(a) = KL(a^2 H + b; y)``.

    The sign of ``phi'`` is monotone in ``a > 0``, which gives a bracket;
    steps leaving it or increasing ``phi`` fall back to bisection.
    Returns the new amplitude and whether the molecule is visible.
    """
    if not np.any(H > 0):
        return float(a0), False
    a = max(float(a0), floor)
    lo, hi = floor, None
    phi, d1, d2 = _amplitude_derivs(a, H, y, b, beta)
    for _ in range(steps):
        if d1 == 0:
            break
        if d1 > 0:
            hi = a
        else:
            lo = a
        cand = a - d1 / d2 if d2 > 0 else np.nan
        upper = hi if hi is not None else np.inf
        if not (lo < cand < upper):
            cand = 0.5 * (lo + hi) if hi is not None else 2 * a
        c_phi, c_d1, c_d2 = _amplitude_derivs(cand, H, y, b, beta)
        tries = 0
        while c_phi > phi and tries < 60:
            cand = 0.5 * (cand + a)
            c_phi, c_d1, c_d2 = _amplitude_derivs(cand, H, y, b, beta)
            tries += 1
        if c_phi > phi:
            break
        a, phi, d1, d2 = cand, c_phi, c_d1, c_d2
        if a <= floor and d1 > 0:
            break
    return a, True


def _amplitude_block(prob: Problem, state: OptimState, cfg: OptimConfig) -> None:
    invisible = []
    new = state.amplitudes.copy()
    for l in range(len(new)):
        new[l], seen = newton_amplitude(prob.cur.H[l], prob.y[l], prob.b[l], prob.beta,
                                        new[l], cfg.amplitude_steps, cfg.amplitude_floor)
        if not seen:
            invisible.append(l)
    state.amplitudes = new
    state.diagnostics["invisible_frames"] = invisible


def _position_block(prob: Problem, state: OptimState, cfg: OptimConfig) -> None:
    grid = prob.model.grid
    a = state.amplitudes
    n = len(a)
    scale = state.diagnostics.get("position_scale")
    scale = np.full(n, np.nan) if scale is None else np.asarray(scale, float)
    prev_p = prev_g = None
    stalled = set()
    for it in range(cfg.position_steps):
        d0 = prob.data_terms(a)
        v = prob.adjoint_fields(a)
        g = prob.position_gradient(v)
        gn = np.linalg.norm(g, axis=1)
        step = np.where(np.isfinite(scale), scale, cfg.position_step) / np.where(gn > 0, gn, 1)
        if prev_p is not None:
            s = prob.pos - prev_p
            dg = g - prev_g
            sy = np.sum(s * dg, axis=1)
            bb = np.sum(s * s, axis=1) / np.where(sy > 0, sy, 1)
            step = np.where((sy > 0) & (bb > 0), bb, 2 * step)
        step = np.minimum(step, cfg.max_position_move / np.where(gn > 0, gn, 1))
        prev_p, prev_g = prob.pos.copy(), g
        pending = np.flatnonzero((gn > 0) & ~np.isin(np.arange(n), list(stalled)))
        for _ in range(30):
            if pending.size == 0:
                break
            trial = grid.clamp(prob.pos[pending] - step[pending, None] * g[pending])
            move = np.linalg.norm(trial - prob.pos[pending], axis=1)
            tiny = move < 1e-9
            if tiny.any():
                stalled.update(pending[tiny].tolist())
                pending, trial = pending[~tiny], trial[~tiny]
                if pending.size == 0:
                    break
            ev = prob.evaluate(prob.f, trial, prob.cur.u[pending])
            d1 = prob.data_terms(a[pending], ev.H, pending)
            decrease = np.sum(g[pending] * (prob.pos[pending] - trial), axis=1)
            ok = d1 <= d0[pending] - 1e-4 * decrease
            if ok.any():
                acc = pending[ok]
                scale[acc] = np.linalg.norm(trial[ok] - prob.pos[acc], axis=1)
                prob.commit_frames(acc, trial[ok], _Eval(ev.u[ok], ev.w[ok], ev.H[ok]))
            step[pending[~ok]] *= 0.5
            pending = pending[~ok]
        stalled.update(pending.tolist())
    state.positions = prob.pos.copy()
    state.diagnostics["position_scale"] = scale.tolist()
    state.diagnostics["stalled_positions"] = sorted(stalled)


def _volume_block(prob: Problem, state: OptimState, cfg: OptimConfig) -> None:
    a = state.amplitudes
    tau = cfg.tau
    x = prob.f.copy()
    ex = prob.cur
    phi_x = prob.objective(a, tau)
    y, ey, y_is_x = x, ex, True
    t = 1.0
    s = state.diagnostics.get("volume_step_size")
    s = None if s is None else 2.0 * s
    restarts = backtracks = 0
    status = "budget"
    dual = prob.tv_dual
    for k in range(cfg.fista_steps):
        if not y_is_x:
            ey = prob.evaluate(y, prob.pos, ex.u)
        dy = float(np.sum(prob.data_terms(a, ey.H)))
        v = prob.adjoint_fields(a, ey, y)
        grad = prob.volume_gradient(v, ey)
        if cfg.volume_mask is not None:
            grad = np.where(cfg.volume_mask, grad, 0.0)
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0:
            status = "stationary"
            break
        if s is None:
            s = cfg.volume_step / gmax
        for _ in range(40):
            z, dual, _ = tv_prox(y - s * grad, s * tau, cfg.tv_iterations, dual)
            if cfg.volume_mask is not None:
                z = np.where(cfg.volume_mask, z, y)
            ez = prob.evaluate(z, prob.pos, ey.u)
            dz = float(np.sum(prob.data_terms(a, ez.H)))
            diff = z - y
            bound = dy + float(np.sum(grad * diff)) + float(np.sum(diff * diff)) / (2 * s)
            if dz <= bound + 1e-12 * abs(dy):
                break
            s *= 0.5
            backtracks += 1
        else:
            status = "step underflow"
            break
        phi_z = dz + tau * total_variation(z)
        if phi_z <= phi_x:
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            mom = cfg.relaxation * (t - 1) / t_new
            y = np.maximum(z + mom * (z - x), 0) if mom > 0 else z
            x, ex, phi_x, t = z, ez, phi_z, t_new
            y_is_x = mom == 0
            if y_is_x:
                ey = ez
        elif y_is_x:
            status = "no descent"
            break
        else:
            restarts += 1
            t = 1.0
            y, ey, y_is_x = x, ex, True
    prob.tv_dual = dual
    prob.f, prob.cur = x, ex
    state.f = x.copy()
    state.diagnostics["volume_step_size"] = s
    state.diagnostics["fista"] = {"variant": FISTA_VARIANT, "restarts": restarts,
                                  "backtracks": backtracks, "status": status}


_BLOCK_FUNCS = {"amplitudes": _amplitude_block, "positions": _position_block,
                "volume": _volume_block}


def _check_inside(model: ForwardModel, positions) -> None:
    if not np.all(model.grid.contains(positions)):
        raise ValueError("molecule positions must lie inside the grid domain")


def _prepare(state: OptimState, stack: FrameStack, model: ForwardModel, beta: float) -> Problem:
    _check_inside(model, state.positions)
    prob = Problem.from_stack(stack, model, beta)
    prob.set_point(state.f, state.positions)
    return prob


def objective(state: OptimState, stack: FrameStack, model: ForwardModel,
              config: OptimConfig) -> float:
    """Sum of per-frame KL terms plus ``tau * TV(f)`` with fresh forward solves."""
    prob = _prepare(state, stack, model, config.beta)
    return prob.objective(state.amplitudes, config.tau)


def update_amplitudes(state: OptimState, stack: FrameStack, model: ForwardModel,
                      params: KLParams | OptimConfig, steps: int | None = None) -> np.ndarray:
    beta = params.beta
    cfg = params if isinstance(params, OptimConfig) else OptimConfig(beta=beta)
    if steps is not None:
        cfg = replace(cfg, amplitude_steps=steps)
    if isinstance(params, KLParams) and params.backgrounds is not None:
        stack = FrameStack(stack.config, stack.frames, params.backgrounds, stack.order)
    st = state.copy()
    _amplitude_block(_prepare(st, stack, model, beta), st, cfg)
    return st.amplitudes


def update_positions(state: OptimState, stack: FrameStack, model: ForwardModel,
                     config: OptimConfig) -> np.ndarray:
    st = state.copy()
    _position_block(_prepare(st, stack, model, config.beta), st, config)
    return st.positions


def update_volume(state: OptimState, stack: FrameStack, model: ForwardModel,
                  config: OptimConfig) -> np.ndarray:
    st = state.copy()
    _volume_block(_prepare(st, stack, model, config.beta), st, config)
    return st.f


def feasible(state: OptimState, model: ForwardModel) -> bool:
    return bool(np.all(state.f >= 0) and np.all(model.grid.contains(state.positions))
                and np.all(state.amplitudes > 0))


def joint_optimize(stack: FrameStack, model: ForwardModel, config: OptimConfig,
                   init: tuple, callback: Callable[[int, OptimState], None] | None = None
                   ) -> OptimState:
    """Alternate the configured blocks (amplitudes, positions, volume by default).

    The objective is recorded after every block. A failing block is logged
    in the history and skipped.
    """
    f0, p0, a0 = init
    state = OptimState(np.maximum(np.asarray(f0, float), 0), np.array(p0, float),
                       np.array(a0, float))
    if np.any(state.amplitudes <= 0):
        raise ValueError("initial amplitudes must be > 0")
    prob = _prepare(state, stack, model, config.beta)
    phi = prob.objective(state.amplitudes, config.tau)
    state.history.append({"outer": 0, "block": "init", "objective": phi})
    state.diagnostics["fista_variant"] = FISTA_VARIANT
    # The data term equals the (nonnegative) Poisson deviance up to this
    # constant; relative progress is measured against the deviance, floored
    # at one count so that an exact fit does not demand zero change.
    y = prob.y
    offset = float(np.sum(y * np.log(y + config.beta) - y))
    for outer in range(1, config.outer_iterations + 1):
        phi_start = phi
        for block in config.blocks:
            try:
                _BLOCK_FUNCS[block](prob, state, config)
            except Exception as exc:  # resilience: record and keep going
                log.exception("block %s failed at outer iteration %d", block, outer)
                state.history.append({"outer": outer, "block": block, "objective": phi,
                                      "error": repr(exc)})
                prob.set_point(state.f, state.positions, warm=False)
                continue
            phi = prob.objective(state.amplitudes, config.tau)
            state.history.append({"outer": outer, "block": block, "objective": phi,
                                  "feasible": feasible(state, model)})
            log.info("outer=%d block=%s objective=%.10g", outer, block, phi)
        if callback is not None:
            callback(outer, state)
        if abs(phi_start - phi) <= config.tolerance * max(abs(phi_start + offset), 1.0):
            break
    state.diagnostics["solver_stats"] = dict(model.stats)
    return state
