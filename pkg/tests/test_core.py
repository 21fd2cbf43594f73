import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ulm3d.core import (AcquisitionGeometry, GridSpec, IQVolumeBlock, NumericalError, ShapeError,
                        matrix_probe, sphere_offsets, wavelength_mm)


def test_wavelength_of_default_probe():
    # 1540 m/s at 6.25 MHz
    assert wavelength_mm(1540.0, 6.25) == pytest.approx(0.2464, abs=1e-12)


@pytest.mark.parametrize("c,f", [(0, 5), (1540, 0), (-1, 3)])
def test_wavelength_rejects_nonpositive(c, f):
    with pytest.raises(ValueError):
        wavelength_mm(c, f)


@given(st.sampled_from([1, 2, 4, 10, 20]), st.sampled_from([1, 2, 4, 10, 20, 3, 5]))
def test_fraction_classification(k, other):
    g = GridSpec.for_fraction(k, 0.2464, (4, 4, 4))
    assert g.is_fraction(k)
    assert g.is_fraction(other) == (other == k)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (0.1, 0.0, 0.1), (2, 2, 2), 0.2)
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (0.1, 0.1, 0.1), (2, 0, 2), 0.2)


def test_grid_index_round_trip():
    g = GridSpec((1.0, -2.0, 3.0), (0.1, 0.2, 0.3), (5, 6, 7), 0.2)
    idx = np.array([[0, 0, 0], [4, 5, 6], [1.25, 2.5, 3.75]])
    np.testing.assert_allclose(g.to_index(g.to_mm(idx)), idx, atol=1e-12)
    np.testing.assert_array_equal(g.voxel_of(g.to_mm([[1.49, 2.51, 0.0]])), [[1, 3, 0]])
    assert g.contains(g.to_mm([4, 5, 6]))
    assert not g.contains(g.to_mm([5, 0, 0]))


def test_refine_covers_same_extent():
    g = GridSpec.for_fraction(2, 0.2464, (8, 8, 8), (0.0, 0.0, 2.0))
    f = g.refine(10)
    assert f.is_fraction(10)
    assert f.dims == (36, 36, 36)
    np.testing.assert_allclose(f.upper, g.upper, atol=1e-9)


def test_grid_dict_round_trip():
    g = GridSpec((1, 2, 3), (0.1, 0.1, 0.2), (3, 4, 5), 0.3)
    assert GridSpec.from_dict(g.to_dict()) == g


def test_geometry_invariants():
    pos = matrix_probe(4, 4, 0.3)
    with pytest.raises(ValueError):
        AcquisitionGeometry(pos, (), 6.25, 7.81)
    with pytest.raises(ValueError):
        AcquisitionGeometry(pos, ((0, 0),), 6.25, 7.81, volume_rate=0)
    with pytest.raises(ValueError):
        AcquisitionGeometry(pos, ((0, 0),), 6.25, 7.81, block_length=1)
    geo = AcquisitionGeometry(pos, ((0, 0), (2, 0)), 6.25, 7.81)
    assert geo.n_elements == 16
    assert geo.wavelength == pytest.approx(0.2464)
    again = AcquisitionGeometry.from_dict(geo.to_dict())
    np.testing.assert_array_equal(again.element_positions, geo.element_positions)
    assert again.plane_wave_angles == geo.plane_wave_angles


def test_matrix_probe_is_centred():
    p = matrix_probe(32, 32, 0.3)
    assert p.shape == (1024, 3)
    np.testing.assert_allclose(p.mean(axis=0), 0, atol=1e-12)


def test_block_shape_checks(half_grid):
    with pytest.raises(ShapeError):
        IQVolumeBlock(half_grid, np.zeros((4, 4, 4, 2), complex))
    b = IQVolumeBlock(half_grid, np.zeros(half_grid.dims, complex))
    assert b.n_frames == 1
    bad = np.zeros(half_grid.dims + (2,), complex)
    bad[0, 0, 0, 1] = np.nan
    with pytest.raises(NumericalError):
        IQVolumeBlock(half_grid, bad).check_finite()


def test_sphere_offsets_radius():
    offs = sphere_offsets(1.0, (1.0, 1.0, 1.0))
    assert len(offs) == 7
    offs = sphere_offsets(2.5, (1.0, 1.0, 1.0))
    assert np.all(np.sqrt((offs ** 2).sum(axis=1)) <= 2.5)
    # brute force count of lattice points in a 2.5 ball
    g = np.stack(np.meshgrid(*[np.arange(-3, 4)] * 3, indexing="ij"), -1).reshape(-1, 3)
    assert len(offs) == int(((g ** 2).sum(1) <= 6.25).sum())
