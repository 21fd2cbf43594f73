import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import Akima1DInterpolator

from ulm3d.core import Detection, GridSpec
from ulm3d.estimators import UlmRenderer
from ulm3d.render import (GCV_GRID, RenderedMap, accumulate_density, accumulate_velocity,
                          gcv_smooth, interpolate_track, makima_interpolate, mip, process_track,
                          process_tracks, render_tracks, signed_mip, smooth_track, track_velocities)
from ulm3d.track import Track

WL = 0.2464
V = WL / 10


def _track(points, first=0):
    return Track(tuple(Detection(tuple(map(float, p)), 50.0, first + k) for k, p in enumerate(points)))


def _grid(dims, origin=(0.0, 0.0, 0.0)):
    return GridSpec.for_fraction(10, WL, dims, origin)


def _line(n, start, step):
    return np.asarray(start, float) + np.arange(n)[:, None] * np.asarray(step, float)


def test_gcv_grid_constant():
    assert len(GCV_GRID) == 25
    assert GCV_GRID[0] == pytest.approx(1e-6) and GCV_GRID[-1] == pytest.approx(1e6)


def test_straight_line_unchanged():
    y = _line(30, (1, 2, 3), (0.01, -0.02, 0.005))
    fit, _ = gcv_smooth(y)
    np.testing.assert_allclose(fit, y, atol=1e-8)
    fit, _ = gcv_smooth(y, s=1e6)
    np.testing.assert_allclose(fit, y, atol=1e-8)


def test_noiseless_parabola():
    t = np.arange(50, dtype=float)
    y = 0.01 * (t - 25) ** 2
    fit, s = gcv_smooth(y)
    assert s == pytest.approx(1e-6)
    assert np.max(np.abs(fit - y)) < 1e-6 * np.ptp(y)


def test_noisy_parabola_rmse():
    t = np.arange(50, dtype=float)
    truth = 8 * ((t - 25) / 25) ** 2
    sigma = 0.2
    err = []
    for seed in range(500):
        y = truth + sigma * np.random.default_rng(seed).standard_normal(50)
        fit, _ = gcv_smooth(y)
        err.append(np.mean((fit - truth) ** 2))
    assert np.sqrt(np.mean(err)) < 0.5 * sigma


def test_short_inputs_pass_through():
    y = np.array([[0.0, 1, 2], [1, 2, 3]])
    fit, s = gcv_smooth(y)
    np.testing.assert_array_equal(fit, y)
    assert s == 0.0


@given(st.integers(0, 2**31 - 1), st.integers(4, 15))
def test_makima_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    x = np.cumsum(rng.uniform(0.2, 2, n))
    y = rng.standard_normal(n)
    xq = np.linspace(x[0], x[-1], 97)
    ref = Akima1DInterpolator(x, y, method="makima")(xq)
    np.testing.assert_allclose(makima_interpolate(x, y, xq), ref, atol=1e-12)


def test_makima_linear_and_constant():
    x = np.arange(6.0)
    xq = np.linspace(0, 5, 41)
    np.testing.assert_allclose(makima_interpolate(x, 3 * x - 1, xq), 3 * xq - 1, atol=1e-12)
    np.testing.assert_allclose(makima_interpolate(x, np.full(6, 2.5), xq), 2.5)
    np.testing.assert_allclose(makima_interpolate([0, 1, 2], [0, 2, 0], [0.5, 1.5]), [1, 1])
    with pytest.raises(ValueError):
        makima_interpolate([0, 0, 1, 2], [0, 1, 2, 3], [0.5])


def test_makima_beats_linear_on_sine():
    x = np.linspace(0, 2 * np.pi, 10)
    xq = np.linspace(0, 2 * np.pi, 91)
    ak = np.max(np.abs(makima_interpolate(x, np.sin(x), xq) - np.sin(xq)))
    lin = np.max(np.abs(np.interp(xq, x, np.sin(x)) - np.sin(xq)))
    assert ak < lin


def test_velocities_uniform_and_stationary():
    st_ = track_velocities(smooth_track(_track(_line(12, (0, 0, 0), (0.05, 0, 0)))), 500)
    assert len(st_.smoothed_positions) == 12
    np.testing.assert_allclose(st_.velocities, [[25, 0, 0]] * 11, atol=1e-6)
    still = track_velocities(smooth_track(_track(np.zeros((12, 3)))), 500)
    np.testing.assert_allclose(still.velocities, 0, atol=1e-12)


def test_straight_track_pipeline_is_unchanged():
    pts = _line(15, (0.1, 0.2, 0.3), (0.01, 0.004, -0.003))
    st_ = process_track(_track(pts), step=V, volume_rate=500)
    params = st_.sample_params
    np.testing.assert_allclose(st_.interpolated_positions, pts[0] + params[:, None] * (pts[1] - pts[0]),
                               rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(st_.interpolated_velocities, [(pts[1] - pts[0]) * 500] * len(params),
                               rtol=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_resampling_step_bound(seed):
    rng = np.random.default_rng(seed)
    pts = np.cumsum(rng.normal(0, 0.05, (12, 3)), axis=0)
    st_ = process_track(_track(pts), step=V)
    gaps = np.linalg.norm(np.diff(st_.interpolated_positions, axis=0), axis=1)
    assert np.all(gaps <= V * (1 + 1e-9))
    assert st_.sample_params[0] == 0 and st_.sample_params[-1] == 11


def test_curved_track_speed_follows_truth():
    # quarter circle traversed at constant angular rate
    r, w, rate = 0.5, 0.05, 500.0
    k = np.arange(30)
    pts = np.stack([r * np.cos(w * k), r * np.sin(w * k), np.zeros(30)], 1)
    st_ = process_track(_track(pts), step=V, volume_rate=rate)
    speed = np.linalg.norm(st_.interpolated_velocities, axis=1)
    inner = (st_.sample_params > 3) & (st_.sample_params < 26)
    truth = 2 * r * np.sin(w / 2) * rate
    np.testing.assert_allclose(speed[inner], truth, rtol=0.05)


def test_single_track_crossing_voxels():
    grid = _grid((40, 5, 5))
    pts = _line(31, ((4 + 0.5) * V, 2 * V, 2 * V), (V, 0, 0))
    m = render_tracks([_track(pts)], grid, volume_rate=None)
    expect = np.zeros(grid.dims, dtype=np.int32)
    expect[4:35, 2, 2] = 1
    np.testing.assert_array_equal(m.density, expect)
    assert m.density.dtype == np.int32


def test_oscillating_track_counted_once():
    grid = _grid((9, 9, 9))
    c = 4 * V
    pts = [(c + (0.3 * V if k % 2 else -0.3 * V), c, c) for k in range(10)]
    m = render_tracks([_track(pts)], grid)
    assert m.density[4, 4, 4] == 1
    assert m.density.max() == 1


@given(st.integers(0, 2**31 - 1))
def test_density_invariants(seed):
    rng = np.random.default_rng(seed)
    grid = _grid((12, 12, 12))
    tracks = [_track(rng.uniform(0.2, 1.2, 3) * V * 8 + np.cumsum(rng.normal(0, V / 2, (10, 3)), 0))
              for _ in range(6)]
    a = render_tracks(tracks, grid, 500)
    b = render_tracks(tracks[::-1], grid, 500)
    np.testing.assert_array_equal(a.density, b.density)
    assert a.density.min() >= 0 and a.density.max() <= len(tracks)
    np.testing.assert_allclose(a.velocity_sum, b.velocity_sum, atol=1e-9)


def test_velocity_mask_and_hull():
    grid = _grid((30, 5, 5))
    y = 2 * V
    slow = _track(_line(12, (3 * V, y, y), (0.5 * V, 0, 0)))
    fast = _track(_line(12, (3 * V, y, y), (V, 0, 0)))
    one = render_tracks([slow], grid, 500)
    assert not one.velocity_mask().any()
    np.testing.assert_array_equal(one.mean_velocity(), 0)
    two = render_tracks([slow, fast], grid, 500)
    mask = two.velocity_mask()
    assert mask.any() and np.all(two.count[mask] == 2)
    vx = two.mean_velocity()[..., 0][mask]
    assert np.all((vx >= 0.5 * V * 500 - 1e-6) & (vx <= V * 500 + 1e-6))


def test_empty_map():
    grid = _grid((4, 4, 4))
    m = render_tracks([], grid, 500)
    assert m.density.sum() == 0 and not m.velocity_mask().any()
    assert m.n_tracks == 0


def test_tube_centerline_velocity():
    rng = np.random.default_rng(8)
    grid = _grid((60, 15, 15))
    c = 7 * V
    rad, vmax, rate = 3 * V, 40.0, 500.0
    tracks = []
    # Fermat spiral: uniform cover of the cross-section, about 3.5 tracks per voxel
    for k in range(100):
        rho, phi = rad * np.sqrt((k + 0.5) / 100), k * np.pi * (3 - np.sqrt(5))
        v = vmax * (1 - rho ** 2 / rad ** 2)
        start = (rng.uniform(0, 5) * V, c + rho * np.cos(phi), c + rho * np.sin(phi))
        n = int(np.ceil(40 * V / (v / rate))) + 2 if v > 0 else 12
        n = min(max(n, 12), 400)
        tracks.append(_track(_line(n, start, (v / rate, 0, 0))))
    m = render_tracks(tracks, grid, rate)
    row = m.mean_velocity()[10:40, 7, 7, 0]
    ok = m.count[10:40, 7, 7] >= 2
    assert ok.sum() > 20
    assert np.mean(row[ok]) == pytest.approx(vmax, abs=2.0)


def test_step_larger_than_voxel_rejected():
    grid = _grid((8, 8, 8))
    st_ = process_track(_track(_line(12, (0, 0, 0), (V, 0, 0))), step=2 * V, volume_rate=500)
    with pytest.raises(ValueError):
        accumulate_density([st_], grid)
    raw = smooth_track(_track(_line(12, (0, 0, 0), (V, 0, 0))))
    with pytest.raises(ValueError):
        accumulate_density([raw], grid)
    no_vel = interpolate_track(smooth_track(_track(_line(12, (0, 0, 0), (V, 0, 0)))), V)
    with pytest.raises(ValueError):
        accumulate_velocity([no_vel], grid)


def test_sample_normalization():
    grid = _grid((20, 5, 5))
    y = 2 * V
    trs = process_tracks([_track(_line(12, (3 * V, y, y), (0.25 * V, 0, 0)))] * 2, V, 500)
    by_tracks = accumulate_velocity(trs, grid, "tracks")
    by_samples = accumulate_velocity(trs, grid, "samples")
    assert by_samples.count.max() > by_tracks.count.max() == 2
    np.testing.assert_allclose(by_tracks.mean_velocity(), by_samples.mean_velocity(), atol=1e-6)
    with pytest.raises(ValueError):
        accumulate_velocity(trs, grid, "voxels")


def test_workers_do_not_change_result():
    rng = np.random.default_rng(9)
    grid = _grid((16, 16, 16))
    tracks = [_track(rng.uniform(4, 12, 3) * V + np.cumsum(rng.normal(0, V / 2, (12, 3)), 0))
              for _ in range(8)]
    a, b = render_tracks(tracks, grid, 500, workers=1), render_tracks(tracks, grid, 500, workers=3)
    np.testing.assert_array_equal(a.density, b.density)
    np.testing.assert_array_equal(a.velocity_sum, b.velocity_sum)


def test_axial_sign_and_projections():
    grid = _grid((5, 5, 30))
    c = 2 * V
    down = [_track(_line(12, (c, c, 3 * V), (0, 0, V))) for _ in range(2)]
    m = render_tracks(down, grid, 500)
    assert m.axial_velocity(sigma=0)[m.velocity_mask()].min() > 0
    v = np.zeros((2, 3))
    v[0, 1], v[1, 1] = 2.0, -3.0
    np.testing.assert_array_equal(signed_mip(v, 0), [0, -3, 0])
    np.testing.assert_array_equal(mip(v, 0), [0, 2, 0])
    rm = RenderedMap(grid, np.zeros(grid.dims, np.int32))
    with pytest.raises(ValueError):
        rm.mean_velocity()


def test_renderer_estimator():
    beam = GridSpec.for_fraction(2, WL, (4, 4, 4))
    est = UlmRenderer(volume_rate=500).fit(grid=beam)
    assert est.grid_.is_fraction(10)
    m = est.transform([_track(_line(12, (0.1, 0.1, 0.1), (V, 0, 0)))])
    assert m.density.sum() > 0
