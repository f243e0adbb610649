"""Grids, optical constants, sampled volumes, fluorophore sets and phantoms.

All lengths are in micrometers. Volumes are stored as numpy arrays indexed
``[ix, iy, iz]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class PlacementError(RuntimeError):
    """Raised when molecules cannot be placed under the separation constraint."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional sub-stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def _triple(values, kind, name) -> tuple:
    vals = tuple(kind(v) for v in np.broadcast_to(np.asarray(values), (3,)))
    if len(vals) != 3:
        raise ValueError(f"{name} must have 3 components")
    return vals


@dataclass(frozen=True)
class Grid3:
    counts: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        counts = _triple(self.counts, int, "counts")
        spacing = _triple(self.spacing, float, "spacing")
        origin = _triple(self.origin, float, "origin")
        if any(c < 1 for c in counts):
            raise ValueError(f"grid counts must be >= 1, got {counts}")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"grid spacing must be > 0, got {spacing}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.counts) * np.asarray(self.spacing)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.extent

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, i: int) -> np.ndarray:
        """Voxel-center coordinates along axis ``i``."""
        return self.origin[i] + (np.arange(self.counts[i]) + 0.5) * self.spacing[i]

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.axis(0), self.axis(1), self.axis(2)

    def centers(self) -> np.ndarray:
        """All voxel centers as an ``(N, 3)`` array in ``[ix, iy, iz]`` C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, points, strict: bool = False) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if strict:
            return np.all((pts > self.lower) & (pts < self.upper), axis=-1)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=-1)

    def clamp(self, points) -> np.ndarray:
        """Project points onto the closed box."""
        return np.clip(np.asarray(points, dtype=float), self.lower, self.upper)


def make_grid(counts, spacing, origin=(0.0, 0.0, 0.0)) -> Grid3:
    return Grid3(counts, spacing, origin)


@dataclass(frozen=True)
class OpticalConstants:
    wavelength: float = 0.647
    background_ri: float = 1.333

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not self.background_ri > 1:
            raise ValueError("background refractive index must be > 1")

    @property
    def wavenumber(self) -> float:
        """Background wavenumber k_b = 2*pi*eta_b/lambda (rad/um)."""
        return 2 * np.pi * self.background_ri / self.wavelength

    @property
    def vacuum_wavenumber(self) -> float:
        return 2 * np.pi / self.wavelength


@dataclass(frozen=True)
class ScatteringVolume:
    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def to_ri(self, constants: OpticalConstants) -> np.ndarray:
        return potential_to_ri(self.values, constants)


def ri_to_potential(ri, constants: OpticalConstants, grid: Grid3 | None = None):
    """Scattering potential k_b^2 (eta^2/eta_b^2 - 1).

    Returns a ScatteringVolume when ``grid`` is given, else a bare array.
    """
    eta = np.asarray(ri, dtype=float)
    if np.any(eta < constants.background_ri):
        raise ValueError("refractive index below background gives a negative potential")
    f = constants.wavenumber**2 * (eta**2 / constants.background_ri**2 - 1.0)
    if grid is not None:
        return ScatteringVolume(grid, f)
    return f


def potential_to_ri(f, constants: OpticalConstants) -> np.ndarray:
    f = np.asarray(f.values if isinstance(f, ScatteringVolume) else f, dtype=float)
    kb2 = constants.wavenumber**2
    if np.any(f < -kb2):
        raise ValueError("potential below -k_b^2 has no real refractive index")
    return constants.background_ri * np.sqrt(f / kb2 + 1.0)


@dataclass(frozen=True)
class Fluorophore:
    position: np.ndarray
    amplitude: float


@dataclass(frozen=True)
class FluorophoreSet:
    """Ordered emitters; ``positions`` is ``(L, 3)`` and ``amplitudes`` is ``(L,)``."""

    positions: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        amp = np.array(self.amplitudes, dtype=float).reshape(-1)
        if len(pos) != len(amp):
            raise ValueError("positions and amplitudes differ in length")
        pos.flags.writeable = False
        amp.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "amplitudes", amp)

    def __len__(self) -> int:
        return len(self.amplitudes)

    def __iter__(self) -> Iterator[Fluorophore]:
        for p, a in zip(self.positions, self.amplitudes):
            yield Fluorophore(p, float(a))

    def __getitem__(self, idx) -> "FluorophoreSet | Fluorophore":
        if isinstance(idx, (int, np.integer)):
            return Fluorophore(self.positions[idx], float(self.amplitudes[idx]))
        return FluorophoreSet(self.positions[idx], self.amplitudes[idx])


# --------------------------------------------------------------------------
# Phantoms


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    delta_ri: float

    def inside(self, pts: np.ndarray) -> np.ndarray:
        d = (np.asarray(pts) - np.asarray(self.center)) / np.asarray(self.semi_axes)
        return np.sum(d * d, axis=-1) <= 1.0


@dataclass(frozen=True)
class Shell:
    center: tuple[float, float, float]
    outer_radius: float
    inner_radius: float
    delta_ri: float

    def inside(self, pts: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.asarray(pts) - np.asarray(self.center), axis=-1)
        return (r <= self.outer_radius) & (r >= self.inner_radius)


def solid_from_dict(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "ellipsoid":
        return Ellipsoid(tuple(spec["center_um"]), tuple(spec["semi_axes_um"]), float(spec["delta_ri"]))
    if kind == "shell":
        return Shell(
            tuple(spec["center_um"]),
            float(spec["outer_radius_um"]),
            float(spec["inner_radius_um"]),
            float(spec["delta_ri"]),
        )
    raise ValueError(f"unknown solid kind {kind!r}")


def rasterize(grid: Grid3, solids: Sequence, constants: OpticalConstants) -> np.ndarray:
    """RI map from solids by voxel-center membership; overlaps take the max contrast."""
    centers = grid.centers()
    delta = np.zeros(len(centers))
    for s in solids:
        delta = np.where(s.inside(centers), np.maximum(delta, s.delta_ri), delta)
    return constants.background_ri + delta.reshape(grid.shape)


@dataclass(frozen=True)
class PhantomSpec:
    solids: tuple = field(default_factory=tuple)
    labeling: str = "structure"  # "structure": emitters inside solids, "uniform": anywhere
    margin: float = 0.15  # keep emitters this far (um) from every face


def generate_phantom(
    grid: Grid3,
    contrast_spec: PhantomSpec,
    n_molecules: int,
    min_separation: float,
    mean_amplitude: float,
    rng_seed: int,
    constants: OpticalConstants = OpticalConstants(),
    max_attempts: int | None = None,
) -> tuple[ScatteringVolume, FluorophoreSet]:
    """Rasterized RI phantom plus randomly placed, well-separated emitters.

    Positions come from rejection sampling: uniform in the (margin-shrunk)
    box, kept if they satisfy the labeling rule and the minimum separation.
    Amplitudes are Poisson(mean_amplitude) draws with zeros redrawn.
    """
    if min_separation < 0:
        raise ValueError("min_separation must be >= 0")
    if not mean_amplitude > 0:
        raise ValueError("mean_amplitude must be > 0")
    if n_molecules < 1:
        raise ValueError("n_molecules must be >= 1")

    ri = rasterize(grid, contrast_spec.solids, constants)
    volume = ri_to_potential(ri, constants, grid)

    rng = make_rng(rng_seed, 1)
    lo = grid.lower + contrast_spec.margin
    hi = grid.upper - contrast_spec.margin
    if np.any(hi <= lo):
        raise ValueError("margin leaves no room inside the grid")
    use_solids = contrast_spec.labeling == "structure" and len(contrast_spec.solids) > 0
    if contrast_spec.labeling not in ("structure", "uniform"):
        raise ValueError(f"unknown labeling {contrast_spec.labeling!r}")

    budget = max_attempts if max_attempts is not None else 2000 * n_molecules + 10000
    placed = np.empty((n_molecules, 3))
    count = attempts = 0
    min_sep2 = min_separation**2
    while count < n_molecules:
        if attempts >= budget:
            raise PlacementError(
                f"placed {count}/{n_molecules} molecules after {attempts} attempts"
            )
        batch = rng.uniform(lo, hi, size=(256, 3))
        attempts += len(batch)
        if use_solids:
            ok = np.zeros(len(batch), bool)
            for s in contrast_spec.solids:
                ok |= s.inside(batch)
            batch = batch[ok]
        for p in batch:
            if count and min_sep2 > 0:
                d2 = np.sum((placed[:count] - p) ** 2, axis=1)
                if d2.min() < min_sep2:
                    continue
            placed[count] = p
            count += 1
            if count == n_molecules:
                break

    arng = make_rng(rng_seed, 2)
    amps = arng.poisson(mean_amplitude, n_molecules).astype(float)
    while np.any(amps == 0):
        zero = amps == 0
        amps[zero] = arng.poisson(mean_amplitude, int(zero.sum()))
    return volume, FluorophoreSet(placed, amps)
