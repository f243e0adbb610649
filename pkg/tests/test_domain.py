import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odtsmlm.domain import (Ellipsoid, FluorophoreSet, Grid3, OpticalConstants, PhantomSpec,
                            PlacementError, ScatteringVolume, Shell, generate_phantom, make_grid,
                            make_rng, potential_to_ri, rasterize, ri_to_potential, solid_from_dict)


class TestGrid:
    def test_paper_scale_extent(self):
        g = make_grid((72, 72, 32), (0.1, 0.1, 0.1))
        np.testing.assert_allclose(g.extent, [7.2, 7.2, 3.2], rtol=1e-12)

    def test_single_voxel_center(self):
        g = make_grid((1, 1, 1), (1, 1, 1))
        np.testing.assert_array_equal(g.centers(), [[0.5, 0.5, 0.5]])

    def test_centers_hand_enumeration(self):
        g = make_grid((4, 2, 2), (0.5, 0.5, 0.5), origin=(1.0, -1.0, 0.0))
        expected = []
        for i in range(4):
            for j in range(2):
                for k in range(2):
                    expected.append((1.0 + (i + 0.5) * 0.5, -1.0 + (j + 0.5) * 0.5, (k + 0.5) * 0.5))
        assert g.centers().shape == (16, 3)
        # centers are listed in C order of (i, j, k)
        np.testing.assert_allclose(g.centers(), expected)

    @pytest.mark.parametrize("counts,spacing", [((0, 1, 1), (1, 1, 1)), ((2, 2, 2), (1, 0, 1)),
                                                ((2, 2, 2), (1, 1, -0.1))])
    def test_invalid(self, counts, spacing):
        with pytest.raises(ValueError):
            make_grid(counts, spacing)

    def test_contains_and_clamp(self):
        g = make_grid((10, 10, 10), (0.1, 0.1, 0.1))
        pts = np.array([[0.5, 0.5, 0.5], [1.0, 0.0, 0.3], [1.2, -0.1, 0.5]])
        np.testing.assert_array_equal(g.contains(pts), [True, True, False])
        np.testing.assert_array_equal(g.contains(pts, strict=True), [True, False, False])
        np.testing.assert_allclose(g.clamp(pts[2]), [1.0, 0.0, 0.5])

    def test_voxel_volume(self):
        assert make_grid((2, 3, 4), (0.1, 0.2, 0.5)).voxel_volume == pytest.approx(0.01)


class TestOpticalConstants:
    def test_wavenumber_is_derived(self):
        c = OpticalConstants(0.647, 1.333)
        assert c.wavenumber == 2 * math.pi * 1.333 / 0.647
        assert c.vacuum_wavenumber == 2 * math.pi / 0.647

    @pytest.mark.parametrize("lam,eta", [(0.0, 1.333), (0.5, 1.0), (-1.0, 1.5)])
    def test_invalid(self, lam, eta):
        with pytest.raises(ValueError):
            OpticalConstants(lam, eta)


class TestPotential:
    def test_zero_contrast(self, constants):
        f = ri_to_potential(np.full((3, 3, 3), constants.background_ri), constants)
        assert np.all(f == 0)

    def test_scalar_oracle(self):
        c = OpticalConstants(0.647, 1.333)
        kb = 2 * math.pi * 1.333 / 0.647
        expected = kb * kb * (1.383**2 / 1.333**2 - 1)
        assert float(ri_to_potential(1.383, c)) == pytest.approx(expected, rel=1e-14)

    def test_negative_contrast_rejected(self, constants):
        with pytest.raises(ValueError):
            ri_to_potential([1.333, 1.3], constants)

    def test_volume_wrapper(self, small_grid, constants):
        eta = np.full(small_grid.shape, 1.35)
        vol = ri_to_potential(eta, constants, small_grid)
        assert isinstance(vol, ScatteringVolume)
        np.testing.assert_allclose(vol.to_ri(constants), eta, rtol=1e-14)
        with pytest.raises(ValueError):
            vol.values[0, 0, 0] = 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 0.5), min_size=1, max_size=20),
           st.floats(0.3, 1.5), st.floats(1.01, 1.8))
    def test_round_trip(self, contrast, lam, eta_b):
        c = OpticalConstants(lam, eta_b)
        eta = eta_b + np.asarray(contrast)
        back = potential_to_ri(ri_to_potential(eta, c), c)
        np.testing.assert_allclose(back, eta, rtol=1e-12)


class TestSolids:
    def test_shell_membership(self):
        s = Shell((0, 0, 0), 1.0, 0.5, 0.05)
        pts = np.array([[0, 0, 0], [0.75, 0, 0], [0, 1.1, 0]])
        np.testing.assert_array_equal(s.inside(pts), [False, True, False])

    def test_from_dict(self):
        e = solid_from_dict({"kind": "ellipsoid", "center_um": [1, 2, 3], "semi_axes_um": [1, 1, 1],
                             "delta_ri": 0.02})
        assert e == Ellipsoid((1, 2, 3), (1, 1, 1), 0.02)
        with pytest.raises(ValueError):
            solid_from_dict({"kind": "cube"})

    def test_overlap_takes_max(self, constants):
        g = make_grid((4, 4, 4), (0.25, 0.25, 0.25))
        solids = [Ellipsoid((0.5, 0.5, 0.5), (2, 2, 2), 0.02), Ellipsoid((0.5, 0.5, 0.5), (2, 2, 2), 0.05)]
        np.testing.assert_allclose(rasterize(g, solids, constants), constants.background_ri + 0.05)


SPEC = PhantomSpec((Ellipsoid((1.6, 1.6, 0.8), (1.0, 1.0, 0.6), 0.05),))


class TestGeneratePhantom:
    def test_single_molecule(self):
        g = make_grid((32, 32, 16), (0.1, 0.1, 0.1))
        vol, fl = generate_phantom(g, SPEC, 1, 0.02, 1000.0, 7)
        assert len(fl) == 1 and fl.amplitudes[0] > 0
        assert vol.values.max() > 0

    def test_separation_brute_force(self):
        g = make_grid((72, 72, 32), (0.1, 0.1, 0.1))
        _, fl = generate_phantom(g, PhantomSpec(labeling="uniform"), 50, 0.5, 1000.0, 3)
        for i, j in itertools.combinations(range(50), 2):
            assert np.linalg.norm(fl.positions[i] - fl.positions[j]) >= 0.5

    def test_paper_scale_set(self):
        g = make_grid((72, 72, 32), (0.1, 0.1, 0.1))
        _, fl = generate_phantom(g, PhantomSpec(labeling="uniform"), 1000, 0.02, 1000.0, 11)
        pos = fl.positions
        d2 = np.sum((pos[:, None] - pos[None]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        assert d2.min() >= 0.02**2
        assert np.all(g.contains(pos, strict=True))
        assert np.all(fl.amplitudes > 0)

    def test_structure_labeling(self):
        g = make_grid((32, 32, 16), (0.1, 0.1, 0.1))
        _, fl = generate_phantom(g, SPEC, 40, 0.02, 1000.0, 5)
        assert np.all(SPEC.solids[0].inside(fl.positions))

    def test_deterministic(self):
        g = make_grid((32, 32, 16), (0.1, 0.1, 0.1))
        v1, f1 = generate_phantom(g, SPEC, 20, 0.05, 1000.0, 42)
        v2, f2 = generate_phantom(g, SPEC, 20, 0.05, 1000.0, 42)
        assert v1.values.tobytes() == v2.values.tobytes()
        assert f1.positions.tobytes() == f2.positions.tobytes()
        assert f1.amplitudes.tobytes() == f2.amplitudes.tobytes()

    def test_placement_failure(self):
        g = make_grid((8, 8, 8), (0.1, 0.1, 0.1))
        with pytest.raises(PlacementError):
            generate_phantom(g, PhantomSpec(labeling="uniform", margin=0.0), 50, 0.5, 1000.0, 0,
                             max_attempts=5000)

    @pytest.mark.parametrize("kw", [{"min_separation": -1.0}, {"mean_amplitude": 0.0},
                                    {"n_molecules": 0}])
    def test_invalid_arguments(self, kw):
        g = make_grid((8, 8, 8), (0.1, 0.1, 0.1))
        args = {"n_molecules": 2, "min_separation": 0.0, "mean_amplitude": 10.0, **kw}
        with pytest.raises(ValueError):
            generate_phantom(g, PhantomSpec(labeling="uniform"), args["n_molecules"],
                             args["min_separation"], args["mean_amplitude"], 0)

    def test_amplitude_clt(self):
        g = make_grid((72, 72, 32), (0.1, 0.1, 0.1))
        # amplitude stream is independent of placement, so a cheap uniform
        # placement with no separation gives 1e5 Poisson draws quickly
        _, fl = generate_phantom(g, PhantomSpec(labeling="uniform"), 100_000, 0.0, 1000.0, 9)
        n = len(fl)
        assert abs(fl.amplitudes.mean() - 1000.0) < 3 * math.sqrt(1000.0 / n)

    def test_zero_draws_resampled(self):
        g = make_grid((8, 8, 8), (0.1, 0.1, 0.1))
        _, fl = generate_phantom(g, PhantomSpec(labeling="uniform"), 200, 0.0, 0.5, 1)
        assert np.all(fl.amplitudes >= 1)


class TestFluorophoreSet:
    def test_shapes_and_access(self):
        fs = FluorophoreSet([[0, 0, 0], [1, 1, 1]], [2.0, 3.0])
        assert len(fs) == 2
        assert fs[1].amplitude == 3.0
        assert len(fs[[0]]) == 1
        assert [f.amplitude for f in fs] == [2.0, 3.0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            FluorophoreSet([[0, 0, 0]], [1.0, 2.0])


def test_rng_streams_are_independent_and_reproducible():
    a = make_rng(5, 3, 0).random(4)
    b = make_rng(5, 3, 0).random(4)
    c = make_rng(5, 3, 1).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_grid3_is_hashable_and_comparable():
    assert Grid3((2, 2, 2), (1, 1, 1)) == make_grid([2, 2, 2], [1.0, 1.0, 1.0])
