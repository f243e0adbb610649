"""Biplane camera model: pupil-limited angular-spectrum propagation, intensities,
shot noise, and slowly varying fluorescent backgrounds.

Measurement vectors are laid out as ``(plane, y, x)`` flattened in C order:
plane 0 before plane 1, rows of constant y, x fastest.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import ndimage, special

from .domain import Grid3, OpticalConstants, make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BiplaneConfig:
    numerical_aperture: float = 1.2
    plane_offsets: tuple[float, float] = (-0.3, 0.3)
    pixel_pitch: float = 0.1
    camera_counts: tuple[int, int] = (32, 32)  # (Mx, My)
    focal_plane_z: float = 0.8
    camera_center: tuple[float, float] | None = None  # defaults to the grid's transverse center
    intensity_scale: float | None = None  # counts per |field|^2; None means pixel area (pitch^2)

    def __post_init__(self):
        offs = tuple(float(o) for o in self.plane_offsets)
        if len(offs) != 2 or offs[0] == offs[1]:
            raise ValueError("biplane needs exactly two distinct plane offsets")
        counts = tuple(int(c) for c in self.camera_counts)
        if len(counts) != 2 or min(counts) < 1:
            raise ValueError("camera_counts must be two positive integers")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be > 0")
        if not self.numerical_aperture > 0:
            raise ValueError("numerical aperture must be > 0")
        if self.intensity_scale is not None and not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be > 0")
        object.__setattr__(self, "plane_offsets", offs)
        object.__setattr__(self, "camera_counts", counts)

    @property
    def plane_shape(self) -> tuple[int, int]:
        """Image shape ``(My, Mx)``."""
        return self.camera_counts[1], self.camera_counts[0]

    @property
    def gain(self) -> float:
        """Field multiplier applied by the camera model."""
        scale = self.pixel_pitch**2 if self.intensity_scale is None else self.intensity_scale
        return float(np.sqrt(scale))

    @property
    def n_measurements(self) -> int:
        return 2 * self.camera_counts[0] * self.camera_counts[1]

    def validate(self, constants: OpticalConstants) -> None:
        if not self.numerical_aperture < constants.background_ri:
            raise ValueError("numerical aperture must be below the background index")

    def pixel_centers(self, grid: Grid3) -> tuple[np.ndarray, np.ndarray]:
        if self.camera_center is None:
            cx, cy = (grid.lower[:2] + grid.upper[:2]) / 2
        else:
            cx, cy = self.camera_center
        mx, my = self.camera_counts
        xs = cx + (np.arange(mx) - (mx - 1) / 2) * self.pixel_pitch
        ys = cy + (np.arange(my) - (my - 1) / 2) * self.pixel_pitch
        return xs, ys

    def to_dict(self) -> dict:
        return {
            "numerical_aperture": self.numerical_aperture,
            "plane_offsets_um": list(self.plane_offsets),
            "pixel_pitch_um": self.pixel_pitch,
            "camera_counts": list(self.camera_counts),
            "focal_plane_z_um": self.focal_plane_z,
            "camera_center_um": None if self.camera_center is None else list(self.camera_center),
            "intensity_scale": self.intensity_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiplaneConfig":
        center = d.get("camera_center_um")
        return cls(
            numerical_aperture=float(d["numerical_aperture"]),
            plane_offsets=tuple(d["plane_offsets_um"]),
            pixel_pitch=float(d["pixel_pitch_um"]),
            camera_counts=tuple(d["camera_counts"]),
            focal_plane_z=float(d["focal_plane_z_um"]),
            camera_center=None if center is None else tuple(center),
            intensity_scale=d.get("intensity_scale"),
        )


class Propagator:
    """Linear map from the exit-plane field to the two camera-plane fields.

    The exit field (top z-slice of the grid) is zero-padded, filtered by the
    circular pupil ``|k_perp| <= NA k0``, propagated in the background medium
    to ``focal_plane_z + offset`` and evaluated at the camera pixel centers by
    an explicit inverse DFT.
    """

    def __init__(self, grid: Grid3, config: BiplaneConfig, constants: OpticalConstants,
                 pad_factor: int = 2):
        config.validate(constants)
        self.grid = grid
        self.config = config
        self.constants = constants
        nx, ny, _ = grid.shape
        dx, dy, _ = grid.spacing
        self.padded = (pad_factor * nx, pad_factor * ny)
        kx = 2 * np.pi * sfft.fftfreq(self.padded[0], dx)
        ky = 2 * np.pi * sfft.fftfreq(self.padded[1], dy)
        kperp2 = kx[:, None] ** 2 + ky[None, :] ** 2
        k_cut = config.numerical_aperture * constants.vacuum_wavenumber
        self.pupil = (kperp2 <= k_cut**2).astype(float)
        kz = np.sqrt(np.maximum(constants.wavenumber**2 - kperp2, 0.0))
        self.z_exit = float(grid.axis(2)[-1])
        self.distances = tuple(config.focal_plane_z + o - self.z_exit for o in config.plane_offsets)
        self.transfer = np.stack([self.pupil * np.exp(1j * kz * d) for d in self.distances])
        xs, ys = config.pixel_centers(grid)
        x0, y0 = grid.axis(0)[0], grid.axis(1)[0]
        self.ex = config.gain * np.exp(1j * np.outer(xs - x0, kx)) / self.padded[0]  # (Mx, Px)
        self.ey = np.exp(1j * np.outer(ys - y0, ky)) / self.padded[1]  # (My, Py)
        self.warnings: list[str] = []
        nyquist = np.pi / k_cut
        if config.pixel_pitch > nyquist:
            msg = (f"camera pitch {config.pixel_pitch:g} um is coarser than the Nyquist "
                   f"pitch {nyquist:.4g} um of the pupil band limit")
            self.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)

    def apply(self, u_exit: np.ndarray) -> np.ndarray:
        """``(..., Nx, Ny)`` exit fields to ``(..., 2, My, Mx)`` camera fields."""
        u = np.asarray(u_exit, dtype=complex)
        spec = sfft.fft2(u, s=self.padded, axes=(-2, -1))
        v = spec[..., None, :, :] * self.transfer  # (..., 2, Px, Py)
        w = self.ex @ v @ self.ey.T  # (..., 2, Mx, My)
        return np.swapaxes(w, -1, -2)

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`apply`: ``(..., 2, My, Mx)`` to ``(..., Nx, Ny)``."""
        wt = np.swapaxes(np.asarray(w, dtype=complex), -1, -2)
        v = self.ex.conj().T @ wt @ self.ey.conj()
        spec = np.sum(np.conj(self.transfer) * v, axis=-3)
        px, py = self.padded
        u = sfft.ifft2(spec, axes=(-2, -1)) * (px * py)
        nx, ny, _ = self.grid.shape
        return u[..., :nx, :ny]


def apply_propagation(u_exit, config: BiplaneConfig, constants: OpticalConstants, grid: Grid3):
    return Propagator(grid, config, constants).apply(u_exit)


def field_to_exit_plane(u_t) -> np.ndarray:
    """Top z-slice of a volume field (batch dims allowed)."""
    vals = getattr(u_t, "values", u_t)
    return np.asarray(vals)[..., -1]


def intensity(u_cam: np.ndarray) -> np.ndarray:
    """Squared modulus of ``(..., 2, My, Mx)`` camera fields as ``(..., M)`` measurements."""
    u = np.asarray(u_cam)
    out = u.real**2 + u.imag**2
    return out.reshape(out.shape[:-3] + (-1,))


def add_poisson_noise(mean, rng_seed) -> np.ndarray:
    """Independent Poisson draws; ``rng_seed`` is an int or a numpy Generator."""
    mean = np.asarray(mean, dtype=float)
    if np.any(mean < 0) or not np.all(np.isfinite(mean)):
        raise ValueError("Poisson means must be finite and >= 0")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed, 3)
    return rng.poisson(mean).astype(np.int64)


@dataclass
class Frame:
    values: np.ndarray
    background: np.ndarray | None
    molecule_count: int = 1


@dataclass
class FrameStack:
    config: BiplaneConfig
    frames: np.ndarray  # (L, M)
    backgrounds: np.ndarray | None = None  # (L, M)
    order: np.ndarray = field(default=None)

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))
        if self.frames.shape[0] < 1:
            raise ValueError("a frame stack needs at least one frame")
        if self.frames.shape[1] != self.config.n_measurements:
            raise ValueError(
                f"frames have {self.frames.shape[1]} values, config expects {self.config.n_measurements}"
            )
        if self.backgrounds is not None:
            self.backgrounds = np.asarray(self.backgrounds, dtype=float).reshape(self.frames.shape)
        if self.order is None:
            self.order = np.arange(len(self.frames))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        bg = None if self.backgrounds is None else self.backgrounds[i]
        return Frame(self.frames[i], bg)

    def subset(self, idx) -> "FrameStack":
        bg = None if self.backgrounds is None else self.backgrounds[idx]
        return FrameStack(self.config, self.frames[idx], bg, self.order[idx])

    def images(self) -> np.ndarray:
        """Frames as ``(L, 2, My, Mx)`` images."""
        return self.frames.reshape((len(self),) + (2,) + self.config.plane_shape)


def synthesize_background(config: BiplaneConfig, n_frames: int, spatial_scale: float,
                          temporal_scale: float, level: float, rng_seed: int,
                          modulation: float = 0.3) -> np.ndarray:
    """Backgrounds that vary slowly in space and time, shape ``(L, M)``.

    White-noise keyframes every ``temporal_scale`` frames are blurred with a
    Gaussian of ``spatial_scale`` um, scaled to ``level * (1 + modulation * n)``
    and linearly interpolated between keyframes.
    """
    if not (spatial_scale > 0 and temporal_scale > 0):
        raise ValueError("background scales must be > 0")
    if level < 0:
        raise ValueError("background level must be >= 0")
    if level == 0:
        return np.zeros((n_frames, config.n_measurements))
    rng = make_rng(rng_seed, 4)
    n_keys = int(np.ceil(max(n_frames - 1, 0) / temporal_scale)) + 1
    sigma = spatial_scale / config.pixel_pitch
    keys = rng.standard_normal((n_keys, 2) + config.plane_shape)
    keys = ndimage.gaussian_filter(keys, sigma=(0, 0, sigma, sigma), mode="reflect")
    keys -= keys.mean(axis=(-2, -1), keepdims=True)
    keys /= keys.std(axis=(1, 2, 3), keepdims=True) + 1e-300
    keys = np.clip(level * (1 + modulation * keys), 0, None)
    t = np.arange(n_frames) / temporal_scale
    i0 = np.minimum(np.floor(t).astype(int), n_keys - 1)
    i1 = np.minimum(i0 + 1, n_keys - 1)
    w = (t - i0)[:, None, None, None]
    out = (1 - w) * keys[i0] + w * keys[i1]
    return out.reshape(n_frames, -1)


def expected_normal_minimum(n: int) -> float:
    """Blom approximation of E[min] of n standard normal draws (a negative number)."""
    if n <= 1:
        return 0.0
    return float(special.ndtri((1 - 0.375) / (n + 0.25)))


def estimate_background(stack: FrameStack, spatial_sigma: float = 1.0,
                        temporal_window: int = 51, noise_correction: bool = True) -> np.ndarray:
    """Per-frame background estimates, shape ``(L, M)``.

    Temporal running minimum over ``temporal_window`` frames, corrected for the
    downward bias of a Poisson minimum (``min ~ b + e sqrt(b)`` with ``e`` the
    expected minimum of that many standard normals, solved for ``b``), then
    Gaussian smoothing in each plane. ``noise_correction=False`` skips the
    bias correction (for noise-free input).
    """
    n = len(stack)
    window = int(temporal_window)
    if window > n:
        log.warning("background window %d > %d frames, clamped", window, n)
        window = n
    window = max(window, 1)
    imgs = stack.images().astype(float)
    low = ndimage.minimum_filter1d(imgs, size=window, axis=0, mode="nearest")
    # invert low = b + e sqrt(b) (e < 0) for the background b
    e = expected_normal_minimum(window) if noise_correction else 0.0
    low = (0.5 * (np.sqrt(e * e + 4 * np.clip(low, 0, None)) - e)) ** 2
    sigma = spatial_sigma / stack.config.pixel_pitch
    low = ndimage.gaussian_filter(low, sigma=(0, 0, sigma, sigma), mode="nearest")
    return np.clip(low, 0, None).reshape(n, -1)
