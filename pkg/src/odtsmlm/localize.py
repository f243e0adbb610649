"""Initial estimates: a small built-in biplane localizer and the widefield volume."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .domain import FluorophoreSet
from .forward import ForwardModel
from .sensor import FrameStack, intensity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InitStrategy:
    widefield_peak: float = 2.0  # peak potential of the initial volume (rad^2/um^2)
    volume: str = "widefield"  # or "zero"
    positions: FluorophoreSet | None = None  # bypasses the localizer when given
    detection_sigma: float = 0.1  # um
    detection_snr: float = 5.0
    window_radius: float = 0.6  # um
    z_samples: int = 41


@dataclass
class Initialization:
    f: np.ndarray
    positions: np.ndarray
    amplitudes: np.ndarray
    kept: np.ndarray  # indices of frames that stay in the optimization

    def __iter__(self):
        return iter((self.f, self.positions, self.amplitudes))


def _sharpness(img: np.ndarray) -> np.ndarray:
    c = np.clip(img, 0, None)
    s = c.sum(axis=(-2, -1))
    return (c * c).sum(axis=(-2, -1)) / np.where(s > 0, s * s, 1)


def _ratio(imgs: np.ndarray) -> np.ndarray:
    """Biplane sharpness contrast of ``(..., 2, h, w)`` images."""
    q = _sharpness(imgs)
    q0, q1 = q[..., 0], q[..., 1]
    return (q0 - q1) / np.where(q0 + q1 > 0, q0 + q1, 1)


def _parabola_offset(m1, c0, p1) -> float:
    den = m1 - 2 * c0 + p1
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (m1 - p1) / den, -0.5, 0.5))


def localize(stack: FrameStack, model: ForwardModel, strategy: InitStrategy = InitStrategy()
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame single-emitter estimates from a free-space biplane model.

    Transverse: matched-filter peak on the summed planes with a parabolic
    subpixel fit. Axial: the biplane sharpness contrast is compared with a
    free-space calibration curve computed at the transverse estimate; when
    the curve crosses the measured value more than once the crossing whose
    free-space template fits best wins. Amplitude: least-squares fit of that
    template.

    Returns positions ``(L, 3)``, amplitudes ``(L,)`` and a boolean mask of
    detected frames.
    """
    cfg = stack.config
    grid = model.grid
    bg = stack.backgrounds if stack.backgrounds is not None else np.zeros_like(stack.frames, float)
    imgs = (stack.frames - bg).reshape((len(stack), 2) + cfg.plane_shape)
    xs, ys = cfg.pixel_centers(grid)
    sig = strategy.detection_sigma / cfg.pixel_pitch
    rad = max(1, int(round(strategy.window_radius / cfg.pixel_pitch)))
    zlo = grid.lower[2] + 0.5 * grid.spacing[2]
    zhi = grid.upper[2] - 0.5 * grid.spacing[2]
    zs = np.linspace(zlo, zhi, strategy.z_samples)

    n = len(stack)
    pos = np.zeros((n, 3))
    amp = np.ones(n)
    found = np.zeros(n, bool)
    for l in range(n):
        summed = ndimage.gaussian_filter(imgs[l].sum(axis=0), sig, mode="nearest")
        iy, ix = np.unravel_index(np.argmax(summed), summed.shape)
        noise = np.sqrt(max(float(np.mean(bg[l])), 1.0))
        if summed[iy, ix] < strategy.detection_snr * noise:
            log.warning("frame %d: no emitter detected, dropped", l)
            continue
        found[l] = True
        my, mx = summed.shape
        dx = _parabola_offset(summed[iy, ix - 1], summed[iy, ix], summed[iy, ix + 1]) \
            if 0 < ix < mx - 1 else 0.0
        dy = _parabola_offset(summed[iy - 1, ix], summed[iy, ix], summed[iy + 1, ix]) \
            if 0 < iy < my - 1 else 0.0
        x = xs[ix] + dx * cfg.pixel_pitch
        y = ys[iy] + dy * cfg.pixel_pitch
        win = (slice(None), slice(max(iy - rad, 0), iy + rad + 1),
               slice(max(ix - rad, 0), ix + rad + 1))
        rho = _ratio(imgs[l][win])

        cand_pos = np.column_stack([np.full_like(zs, x), np.full_like(zs, y), zs])
        tmpl = intensity(model.free_space_camera_fields(cand_pos)).reshape(
            (len(zs), 2) + cfg.plane_shape)
        curve = _ratio(tmpl[(slice(None),) + win])
        diff = curve - rho
        cands = []
        for j in np.flatnonzero(np.sign(diff[:-1]) != np.sign(diff[1:])):
            t = diff[j] / (diff[j] - diff[j + 1])
            cands.append(zs[j] + t * (zs[j + 1] - zs[j]))
        if not cands:
            cands = [zs[int(np.argmin(np.abs(diff)))]]
        best = None
        for z in cands:
            h = intensity(model.free_space_camera_fields([x, y, z]))[0]
            a2 = max(float(h @ (imgs[l].ravel())) / float(h @ h), 1e-12)
            res = float(np.sum((imgs[l].ravel() - a2 * h) ** 2))
            if best is None or res < best[0]:
                best = (res, z, a2)
        _, z, a2 = best
        pos[l] = grid.clamp([x, y, z])
        amp[l] = np.sqrt(a2)
    return pos, amp, found


def widefield_volume(stack: FrameStack, model: ForwardModel, peak: float) -> np.ndarray:
    """Background-subtracted mean frame, resampled onto the grid, replicated along z."""
    cfg = stack.config
    grid = model.grid
    bg = stack.backgrounds if stack.backgrounds is not None else 0.0
    mean = np.mean(stack.frames - bg, axis=0).reshape((2,) + cfg.plane_shape).mean(axis=0)
    xs, ys = cfg.pixel_centers(grid)
    gx, gy, _ = grid.axes()
    cx = (gx - xs[0]) / cfg.pixel_pitch
    cy = (gy - ys[0]) / cfg.pixel_pitch
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    img = ndimage.map_coordinates(mean, [yy, xx], order=1, mode="nearest").T  # (Nx, Ny)
    img = np.clip(img, 0, None)
    top = img.max()
    img = img * (peak / top) if top > 0 else img
    return np.repeat(img[:, :, None], grid.shape[2], axis=2)


def initialize(stack: FrameStack, model: ForwardModel,
               strategy: InitStrategy = InitStrategy()) -> Initialization:
    if strategy.positions is not None:
        given = strategy.positions
        if len(given) != len(stack):
            raise ValueError("supplied positions must have one entry per frame")
        pos = np.array(given.positions)
        amp = np.array(given.amplitudes)
        kept = np.arange(len(stack))
    else:
        pos, amp, found = localize(stack, model, strategy)
        kept = np.flatnonzero(found)
    if strategy.volume == "widefield":
        f0 = widefield_volume(stack.subset(kept), model, strategy.widefield_peak)
    elif strategy.volume == "zero":
        f0 = np.zeros(model.grid.shape)
    else:
        raise ValueError(f"unknown volume init {strategy.volume!r}")
    return Initialization(f0, pos[kept], amp[kept], kept)
