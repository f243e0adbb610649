"""Incident spherical waves, the Helmholtz Green kernel and Lippmann-Schwinger solves.

The volume integral ``G{v}(x) = int_Omega g(x - z) v(z) dz`` is discretized as
an aperiodic convolution of voxel samples with a kernel that already carries
the voxel volume, evaluated with zero-padded FFTs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .domain import Grid3, OpticalConstants, ScatteringVolume

log = logging.getLogger(__name__)

#: worker count passed to scipy.fft; the CLI sets it from ``--threads``.
FFT_WORKERS: int | None = None

_AX3 = (-3, -2, -1)


class SingularEvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ComplexField:
    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != self.grid.shape:
            raise ValueError(f"field shape {vals.shape} != grid shape {self.grid.shape}")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool


# --------------------------------------------------------------------------
# Spherical waves


def _offsets(target, p):
    """Return (dx, dy, dz) broadcastable offsets ``x - p`` for a grid or point array."""
    p = np.asarray(p, dtype=float)
    if isinstance(target, Grid3):
        ax, ay, az = target.axes()
        lead = p.shape[:-1]
        pe = p.reshape(lead + (1, 1, 1, 3))
        return (
            ax[:, None, None] - pe[..., 0],
            ay[None, :, None] - pe[..., 1],
            az[None, None, :] - pe[..., 2],
        )
    pts = np.asarray(target, dtype=float)
    d = pts - p
    return d[..., 0], d[..., 1], d[..., 2]


def spherical_wave(target, p, a: float = 1.0, eps: float = 0.0, constants=OpticalConstants()):
    """``a exp(j k_b r) / (4 pi r)`` with the smoothed distance ``r = sqrt(|x-p|^2 + eps)``.

    ``target`` is a Grid3 (result has the grid shape, prefixed by any batch
    dimensions of ``p``) or an array of points ``(..., 3)``.
    """
    if eps < 0:
        raise ValueError("smoothing eps must be >= 0")
    dx, dy, dz = _offsets(target, p)
    r2 = dx * dx + dy * dy + dz * dz + eps
    if eps == 0 and np.any(r2 == 0):
        raise SingularEvaluationError("spherical wave evaluated at its source with eps=0")
    r = np.sqrt(r2)
    k = constants.wavenumber
    out = np.exp(1j * k * r) / (4 * np.pi * r)
    a = np.asarray(a, dtype=float)
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (out.ndim - a.ndim))
    return a * out


def spherical_wave_position_gradient(target, p, a: float = 1.0, eps: float = 1e-4,
                                     constants=OpticalConstants()):
    """Derivatives of the smoothed spherical wave with respect to the source position.

    Returns an array with a leading axis of length 3 (d/dp_x, d/dp_y, d/dp_z).
    """
    if not eps > 0:
        raise ValueError("position gradient needs eps > 0")
    dx, dy, dz = _offsets(target, p)
    r2 = dx * dx + dy * dy + dz * dz + eps
    r = np.sqrt(r2)
    k = constants.wavenumber
    # d/dp u = -(du/dr) (x - p) / r,  du/dr = e^{jkr} (jkr - 1) / (4 pi r^2)
    common = -np.exp(1j * k * r) * (1j * k * r - 1) / (4 * np.pi * r2 * r)
    a = np.asarray(a, dtype=float)
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (common.ndim - a.ndim))
    common = a * common
    return np.stack([common * dx, common * dy, common * dz])


# --------------------------------------------------------------------------
# Green kernel


def _ball_self_term(k: float, radius: float) -> complex:
    """Integral of exp(jkr)/(4 pi r) over a ball of the given radius."""
    return (np.exp(1j * k * radius) * (1 - 1j * k * radius) - 1) / k**2


def truncated_green_spectrum(s: np.ndarray, k: float, L: float) -> np.ndarray:
    """Fourier transform of exp(jkr)/(4 pi r) truncated to r < L, at radial frequency s."""
    s = np.asarray(s, dtype=float)
    near = np.abs(s - k) < 1e-7 * k
    ss = np.where(near, 2 * k, s)
    safe = np.where(ss > 0, ss, 1.0)
    sinc_l = np.where(ss > 0, np.sin(ss * L) / safe, L)
    out = (1 - np.exp(1j * k * L) * (np.cos(ss * L) - 1j * k * sinc_l)) / (ss**2 - k**2)
    at_k = ((np.exp(2j * k * L) - 1) / (2j * k) - L) / (2j * k)
    return np.where(near, at_k, out)


@dataclass(frozen=True, eq=False)
class GreenKernel:
    grid: Grid3
    padded_shape: tuple[int, int, int]
    spectrum: np.ndarray
    truncation_radius: float
    method: str

    def _convolve(self, v: np.ndarray, spec: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.grid.shape
        px, py, pz = self.padded_shape
        w = FFT_WORKERS
        # pruned transforms: only the nonzero slab is transformed on each pass
        a = sfft.fft(v, n=pz, axis=-1, workers=w)
        a = sfft.fft(a, n=py, axis=-2, workers=w)
        a = sfft.fft(a, n=px, axis=-3, workers=w, overwrite_x=True)
        a *= spec
        a = sfft.ifft(a, axis=-3, workers=w, overwrite_x=True)[..., :nx, :, :]
        a = sfft.ifft(a, axis=-2, workers=w)[..., :ny, :]
        return sfft.ifft(a, axis=-1, workers=w)[..., :nz]

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Volume convolution with g over the grid (batch dims allowed in front)."""
        return self._convolve(np.asarray(v, dtype=complex), self.spectrum)

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        return self._convolve(np.asarray(v, dtype=complex), np.conj(self.spectrum))


def build_green_kernel(grid: Grid3, constants: OpticalConstants, pad_factor: int = 2,
                       method: str = "sampled") -> GreenKernel:
    """Kernel for the aperiodic volume convolution with the Helmholtz Green function.

    ``method="sampled"`` uses point samples of g times the voxel volume and
    integrates the singular voxel over the equal-volume ball.
    ``method="spectral"`` samples the spectrum of the Green function truncated
    beyond the domain diagonal on a 4x oversampled grid and keeps the
    resulting band-limited kernel on the offsets the domain can reach.
    """
    if pad_factor < 2:
        raise ValueError("pad_factor must be >= 2 for an aperiodic convolution")
    n = np.asarray(grid.shape)
    d = np.asarray(grid.spacing)
    k = constants.wavenumber
    diag = float(np.linalg.norm(n * d))
    padded = tuple(int(pad_factor * c) for c in n)

    if method == "sampled":
        idx = [np.arange(-(c - 1), c) for c in n]
        mx, my, mz = np.meshgrid(*idx, indexing="ij")
        r = np.sqrt((mx * d[0]) ** 2 + (my * d[1]) ** 2 + (mz * d[2]) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            kern = np.exp(1j * k * r) / (4 * np.pi * r) * grid.voxel_volume
        ball = (3 * grid.voxel_volume / (4 * np.pi)) ** (1 / 3)
        kern[tuple(c - 1 for c in n)] = _ball_self_term(k, ball)
    elif method == "spectral":
        over = tuple(4 * c for c in n)
        freqs = [2 * np.pi * sfft.fftfreq(q, dd) for q, dd in zip(over, d)]
        kx, ky, kz = np.meshgrid(*freqs, indexing="ij", sparse=True)
        s = np.sqrt(kx**2 + ky**2 + kz**2)
        full = sfft.ifftn(truncated_green_spectrum(s, k, diag), workers=FFT_WORKERS)
        kern = full[np.ix_(*[np.arange(-(c - 1), c) % q for c, q in zip(n, over)])]
    else:
        raise ValueError(f"unknown kernel method {method!r}")

    placed = np.zeros(padded, dtype=complex)
    sel = np.ix_(*[np.arange(-(c - 1), c) % p for c, p in zip(n, padded)])
    placed[sel] = kern
    spectrum = sfft.fftn(placed, workers=FFT_WORKERS)
    return GreenKernel(grid, padded, spectrum, diag, method)


# --------------------------------------------------------------------------
# Lippmann-Schwinger solves


def _vdot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(np.conj(a) * b, axis=_AX3)


def _norm3(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a.real**2 + a.imag**2, axis=_AX3))


def ls_operator(f: np.ndarray, kernel: GreenKernel, adjoint: bool = False) -> Callable:
    """Matvec for ``A = I - G diag(f)`` or its adjoint ``I - diag(f) G^H``."""
    if adjoint:
        return lambda v: v - f * kernel.apply_adjoint(v)
    return lambda v: v - kernel.apply(f * v)


def _bicgstab(matvec, b, x0, tol, max_iter):
    """BiCGSTAB over a batch of independent systems (leading axis of ``b``)."""
    nb = b.shape[0]
    bnorm = _norm3(b)
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=complex, copy=True)
        r = b - matvec(x)
    res = _norm3(r) / bnorm
    best_x, best_res = x.copy(), res.copy()
    iters = np.zeros(nb, int)
    r0 = r.copy()
    rho = np.ones(nb, complex)
    alpha = np.ones(nb, complex)
    omega = np.ones(nb, complex)
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    active = res > tol

    def col(z):
        return z[:, None, None, None]

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        ri, r0i = r[idx], r0[idx]
        rho_new = _vdot3(r0i, ri)
        # restart the shadow residual on breakdown
        brk = np.abs(rho_new) < 1e-30 * bnorm[idx] ** 2
        if brk.any():
            r0i[brk] = ri[brk]
            r0[idx[brk]] = ri[brk]
            rho_new = _vdot3(r0i, ri)
            p[idx[brk]] = 0
            v[idx[brk]] = 0
            rho[idx[brk]] = alpha[idx[brk]] = omega[idx[brk]] = 1
        beta = (rho_new / rho[idx]) * (alpha[idx] / omega[idx])
        pi = ri + col(beta) * (p[idx] - col(omega[idx]) * v[idx])
        vi = matvec(pi)
        den = _vdot3(r0i, vi)
        den = np.where(den == 0, 1e-300, den)
        al = rho_new / den
        si = ri - col(al) * vi
        snorm = _norm3(si) / bnorm[idx]
        done = snorm <= tol
        xi = x[idx]
        if done.any():
            xi[done] += col(al[done]) * pi[done]
        go = ~done
        if go.any():
            ti = matvec(si[go])
            tt = np.sum(ti.real**2 + ti.imag**2, axis=_AX3)
            om = np.where(tt > 0, _vdot3(ti, si[go]) / np.where(tt > 0, tt, 1), 0.0)
            xi[go] += col(al[go]) * pi[go] + col(om) * si[go]
            ri_new = si[go] - col(om) * ti
            sub = idx[go]
            r[sub] = ri_new
            omega[sub] = np.where(om == 0, 1.0, om)
            res[sub] = _norm3(ri_new) / bnorm[sub]
        res[idx[done]] = snorm[done]
        r[idx[done]] = si[done]
        x[idx] = xi
        p[idx] = pi
        v[idx] = vi
        rho[idx] = rho_new
        alpha[idx] = al
        better = res[idx] < best_res[idx]
        if better.any():
            best_x[idx[better]] = xi[better]
            best_res[idx[better]] = res[idx[better]]
        active = res > tol
    return best_x, best_res, iters


def _born(matvec, b, x0, tol, max_iter):
    """Fixed-point (Born series) iteration ``x <- b + (I - A) x``."""
    bnorm = _norm3(b)
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    x = b.copy() if x0 is None else np.array(x0, dtype=complex, copy=True)
    iters = np.zeros(b.shape[0], int)
    res = _norm3(b - matvec(x)) / bnorm
    for _ in range(max_iter):
        idx = np.flatnonzero(res > tol)
        if idx.size == 0:
            break
        xi = x[idx]
        ax = matvec(xi)
        x[idx] = b[idx] + xi - ax
        iters[idx] += 1
        res[idx] = _norm3(b[idx] - matvec(x[idx])) / bnorm[idx]
        if not np.all(np.isfinite(res)):
            break
    return x, res, iters


def solve_batch(f: np.ndarray, rhs: np.ndarray, kernel: GreenKernel, *, adjoint: bool = False,
                tol: float = 1e-8, max_iter: int = 200, x0: np.ndarray | None = None,
                method: str = "bicgstab") -> tuple[np.ndarray, list[SolveReport]]:
    """Solve ``(I - G diag f) u = rhs`` (or the adjoint system) for a batch of right-hand sides.

    ``rhs`` has shape ``(B, Nx, Ny, Nz)``.
    """
    f = np.asarray(f, dtype=float)
    rhs = np.asarray(rhs, dtype=complex)
    if f.shape != kernel.grid.shape or rhs.shape[-3:] != kernel.grid.shape:
        raise ValueError("potential, field and kernel grids are incompatible")
    if not tol > 0:
        raise ValueError("tol must be > 0")
    squeeze = rhs.ndim == 3
    if squeeze:
        rhs = rhs[None]
        x0 = None if x0 is None else np.asarray(x0)[None]
    if not np.any(f):
        out = rhs.copy()
        reports = [SolveReport(0, 0.0, True) for _ in range(len(rhs))]
        return (out[0] if squeeze else out), reports
    matvec = ls_operator(f, kernel, adjoint)
    if method == "bicgstab":
        x, res, iters = _bicgstab(matvec, rhs, x0, tol, max_iter)
    elif method == "born":
        x, res, iters = _born(matvec, rhs, x0, tol, max_iter)
    else:
        raise ValueError(f"unknown solver {method!r}")
    reports = [SolveReport(int(i), float(r), bool(r <= tol)) for i, r in zip(iters, res)]
    bad = [i for i, rep in enumerate(reports) if not rep.converged]
    if bad:
        log.warning("ls solve: %d of %d systems did not reach tol=%g (worst %.3g)",
                    len(bad), len(reports), tol, max(reports[i].residual for i in bad))
    return (x[0] if squeeze else x), reports


def _unpack(f, field, kernel):
    fv = f.values if isinstance(f, ScatteringVolume) else np.asarray(f, dtype=float)
    if isinstance(f, ScatteringVolume) and f.grid != kernel.grid:
        raise ValueError("potential grid differs from kernel grid")
    uv = field.values if isinstance(field, ComplexField) else np.asarray(field, dtype=complex)
    if isinstance(field, ComplexField) and field.grid != kernel.grid:
        raise ValueError("field grid differs from kernel grid")
    return fv, uv


def solve_lippmann_schwinger(f, u_in, kernel: GreenKernel, tol: float = 1e-8, max_iter: int = 200,
                             x0=None, method: str = "bicgstab") -> tuple[ComplexField, SolveReport]:
    """Total field ``u_t = u_in + G{f u_t}`` for one incident field."""
    fv, uv = _unpack(f, u_in, kernel)
    u, reps = solve_batch(fv, uv, kernel, tol=tol, max_iter=max_iter, x0=x0, method=method)
    return ComplexField(kernel.grid, u), reps[0]


def solve_adjoint(f, residual_field, kernel: GreenKernel, tol: float = 1e-8, max_iter: int = 200,
                  x0=None, method: str = "bicgstab") -> tuple[ComplexField, SolveReport]:
    """Solve ``(I - diag(f) G^H) v = residual_field``."""
    fv, rv = _unpack(f, residual_field, kernel)
    v, reps = solve_batch(fv, rv, kernel, adjoint=True, tol=tol, max_iter=max_iter, x0=x0,
                          method=method)
    return ComplexField(kernel.grid, v), reps[0]
