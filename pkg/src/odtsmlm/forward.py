"""Full image-formation model and the terms of the joint objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .domain import Grid3, OpticalConstants, ScatteringVolume
from .sensor import BiplaneConfig, Propagator, intensity
from .waves import (GreenKernel, SolveReport, build_green_kernel, solve_batch, spherical_wave,
                    spherical_wave_position_gradient)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A Lippmann-Schwinger solve did not converge."""

    def __init__(self, msg: str, reports: list[SolveReport]):
        super().__init__(msg)
        self.reports = reports


@dataclass
class ForwardModel:
    grid: Grid3
    constants: OpticalConstants
    sensor: BiplaneConfig
    kernel: GreenKernel
    propagator: Propagator
    eps: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 200
    solver: str = "bicgstab"
    batch_size: int = 16
    strict: bool = False  # raise SolverError on non-convergence
    stats: dict = field(default_factory=lambda: {"forward_solves": 0, "adjoint_solves": 0})

    @classmethod
    def build(cls, grid: Grid3, constants: OpticalConstants = OpticalConstants(),
              sensor: BiplaneConfig | None = None, *, eps: float = 1e-4, tol: float = 1e-8,
              max_iter: int = 200, pad_factor: int = 2, kernel_method: str = "sampled",
              solver: str = "bicgstab", batch_size: int = 16) -> "ForwardModel":
        if sensor is None:
            sensor = BiplaneConfig(camera_counts=grid.shape[:2], pixel_pitch=grid.spacing[0],
                                   focal_plane_z=float(grid.lower[2] + grid.extent[2] / 2))
        kernel = build_green_kernel(grid, constants, pad_factor, kernel_method)
        prop = Propagator(grid, sensor, constants)
        return cls(grid, constants, sensor, kernel, prop, eps, tol, max_iter, solver, batch_size)

    # -- fields -----------------------------------------------------------

    def incident(self, positions) -> np.ndarray:
        """Unit-amplitude smoothed spherical waves, ``(B, Nx, Ny, Nz)``."""
        return spherical_wave(self.grid, np.atleast_2d(positions), 1.0, self.eps, self.constants)

    def incident_gradient(self, positions) -> np.ndarray:
        """``(3, B, Nx, Ny, Nz)`` position derivatives of :meth:`incident`."""
        return spherical_wave_position_gradient(self.grid, np.atleast_2d(positions), 1.0,
                                                self.eps, self.constants)

    def _solve(self, f, rhs, x0, adjoint):
        out = np.empty_like(rhs)
        reports: list[SolveReport] = []
        for s in range(0, len(rhs), self.batch_size):
            sl = slice(s, s + self.batch_size)
            guess = None if x0 is None else x0[sl]
            u, reps = solve_batch(f, rhs[sl], self.kernel, adjoint=adjoint, tol=self.tol,
                                  max_iter=self.max_iter, x0=guess, method=self.solver)
            out[sl] = u
            reports.extend(reps)
        key = "adjoint_solves" if adjoint else "forward_solves"
        self.stats[key] += len(rhs)
        if self.strict and not all(r.converged for r in reports):
            raise SolverError("Lippmann-Schwinger solve did not converge", reports)
        return out, reports

    def total_fields(self, f, positions, x0=None) -> tuple[np.ndarray, list[SolveReport]]:
        fv = f.values if isinstance(f, ScatteringVolume) else np.asarray(f, float)
        return self._solve(fv, self.incident(positions), x0, adjoint=False)

    def adjoint_fields(self, f, rhs, x0=None) -> tuple[np.ndarray, list[SolveReport]]:
        fv = f.values if isinstance(f, ScatteringVolume) else np.asarray(f, float)
        return self._solve(fv, np.asarray(rhs, complex), x0, adjoint=True)

    def camera_fields(self, u_t: np.ndarray) -> np.ndarray:
        return self.propagator.apply(np.asarray(u_t)[..., -1])

    def camera_adjoint(self, w: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`camera_fields`, a volume that is nonzero on the top slice only."""
        top = self.propagator.adjoint(w)
        out = np.zeros(top.shape + (self.grid.shape[2],), dtype=complex)
        out[..., -1] = top
        return out

    def free_space_camera_fields(self, positions) -> np.ndarray:
        """Camera fields without scattering; only the exit plane is evaluated."""
        pos = np.atleast_2d(positions)
        ax, ay, az = self.grid.axes()
        pts = np.stack(np.meshgrid(ax, ay, [az[-1]], indexing="ij"), axis=-1)[:, :, 0, :]
        u = spherical_wave(pts, pos[:, None, None, :], 1.0, self.eps, self.constants)
        return self.propagator.apply(u)

    def forward(self, f, positions, amplitudes) -> np.ndarray:
        """Noise- and background-free mean intensities ``(B, M)``."""
        u, _ = self.total_fields(f, positions)
        a = np.atleast_1d(np.asarray(amplitudes, float))
        return a[:, None] ** 2 * intensity(self.camera_fields(u))

    def frame(self, f, positions, amplitudes) -> np.ndarray:
        """Mean image ``(M,)`` of several simultaneously active (incoherent) emitters."""
        return np.sum(self.forward(f, positions, amplitudes), axis=0)


def forward(model: ForwardModel, f, p, a) -> np.ndarray:
    """Mean intensities for one molecule (``p`` a 3-vector) or a batch."""
    out = model.forward(f, p, a)
    return out[0] if np.ndim(p) == 1 else out


# ------------------------------------------------------------------------
# Data term


def kl_divergence(z, y, beta: float = 1e-8) -> float:
    """Generalized KL data term ``sum(z) - sum(y log(z + beta))``."""
    z = np.asarray(z, float)
    y = np.asarray(y, float)
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if np.any(z + beta <= 0):
        raise ValueError("z + beta must be positive")
    return float(np.sum(z) - np.sum(y * np.log(z + beta)))


def kl_per_frame(z, y, beta: float) -> np.ndarray:
    z = np.asarray(z, float)
    return np.sum(z, axis=-1) - np.sum(np.asarray(y, float) * np.log(z + beta), axis=-1)


def kl_gradient(z, y, beta: float = 1e-8) -> np.ndarray:
    return 1.0 - np.asarray(y, float) / (np.asarray(z, float) + beta)


# ------------------------------------------------------------------------
# Total variation (voxel-index forward differences, replicate boundary)


def gradient3(f: np.ndarray) -> np.ndarray:
    g = np.zeros((3,) + f.shape)
    g[0, :-1] = f[1:] - f[:-1]
    g[1, :, :-1] = f[:, 1:] - f[:, :-1]
    g[2, :, :, :-1] = f[:, :, 1:] - f[:, :, :-1]
    return g


def gradient3_adjoint(p: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gradient3` (minus the divergence)."""
    out = np.zeros(p.shape[1:])
    out[:-1] -= p[0, :-1]
    out[1:] += p[0, :-1]
    out[:, :-1] -= p[1, :, :-1]
    out[:, 1:] += p[1, :, :-1]
    out[:, :, :-1] -= p[2, :, :, :-1]
    out[:, :, 1:] += p[2, :, :, :-1]
    return out


def total_variation(f) -> float:
    fv = f.values if isinstance(f, ScatteringVolume) else np.asarray(f, float)
    g = gradient3(fv)
    return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))
