import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ulm3d.core import GridSpec, IQVolumeBlock, sphere_offsets
from ulm3d.estimators import BubbleLocalizer
from ulm3d.localize import (detect_block, detect_frame, enhance, find_local_maxima, gaussian_fit,
                            hanning_weights, kernel_half_width, noise_floor, sqrt_readjust,
                            temporal_ensemble)

WL = 0.2464
H = WL / 2


def _grid(dims):
    return GridSpec.for_fraction(2, WL, dims)


def _gaussian(dims, centres, amps, sigma=(1.0, 1.0, 1.5)):
    axes = np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij")
    out = np.zeros(dims)
    for c, a in zip(centres, amps):
        out += a * np.exp(-sum((axes[d] - c[d]) ** 2 / (2 * sigma[d] ** 2) for d in range(3)))
    return out


def _brute_maxima(env, radius_vox):
    offs = sphere_offsets(radius_vox, (1.0, 1.0, 1.0))
    out = set()
    for v in np.ndindex(env.shape):
        nb = np.asarray(v) + offs
        ok = np.all((nb >= 0) & (nb < env.shape), axis=1)
        nb = nb[ok]
        if env[v] >= env[nb[:, 0], nb[:, 1], nb[:, 2]].max():
            out.add(v)
    return out


def test_hanning_weights():
    w = hanning_weights(5)
    np.testing.assert_allclose(w, [0, 0.25, 0.5, 0.25, 0], atol=1e-15)
    assert hanning_weights(1).tolist() == [1.0]
    with pytest.raises(ValueError):
        hanning_weights(0)


def test_ensemble_constant_and_identity():
    g = _grid((3, 3, 3))
    const = IQVolumeBlock(g, np.full((3, 3, 3, 10), 2 + 1j, np.complex64))
    out = temporal_ensemble(const, 5)
    assert out.n_frames == 6 and out.frame_offset == 2
    np.testing.assert_allclose(out.frames, 2 + 1j, rtol=1e-6)
    rng = np.random.default_rng(0)
    x = IQVolumeBlock(g, (rng.standard_normal((3, 3, 3, 7)) + 0j).astype(np.complex64))
    np.testing.assert_array_equal(temporal_ensemble(x, 1).frames, x.frames)
    with pytest.raises(ValueError):
        temporal_ensemble(x, 8)


def test_ensemble_variance_reduction():
    rng = np.random.default_rng(1)
    g = _grid((20, 20, 20))
    x = rng.standard_normal((20, 20, 20, 40)) + 1j * rng.standard_normal((20, 20, 20, 40))
    out = temporal_ensemble(IQVolumeBlock(g, x.astype(np.complex64)), 5).frames
    ratio = np.mean(np.abs(out) ** 2) / np.mean(np.abs(x) ** 2)
    assert ratio == pytest.approx(np.sum(hanning_weights(5) ** 2), rel=0.02)


def test_sqrt_readjust():
    np.testing.assert_array_equal(sqrt_readjust(np.array([0.0, 1.0, 4.0])), [0, 1, 2])
    iq = 0.7 * np.exp(1j * 0.3)
    assert sqrt_readjust(np.abs(np.array([iq * np.conj(iq)])))[0] == pytest.approx(0.7)
    with pytest.raises(ValueError):
        sqrt_readjust(np.array([1j]))
    with pytest.raises(ValueError):
        sqrt_readjust(np.array([-1.0]))


def test_enhance_frame_bookkeeping():
    g = _grid((4, 4, 4))
    blk = IQVolumeBlock(g, np.ones((4, 4, 4, 12), np.complex64), frame_offset=100)
    env = enhance(blk, 5)
    # 11 autocorrelation frames, 7 after the 5-frame window, centred 2 frames in
    assert env.n_frames == 7 and env.frame_offset == 102
    assert env.frames.dtype == np.float32
    np.testing.assert_allclose(env.frames, 1.0, rtol=1e-6)


def test_single_peak():
    env = _gaussian((15, 15, 15), [(7, 5, 9)], [1.0])
    np.testing.assert_array_equal(find_local_maxima(env, 2.5), [[7, 5, 9]])


def test_two_peaks_by_separation():
    far = _gaussian((30, 12, 12), [(5, 6, 6), (20, 6, 6)], [1.0, 0.8])
    got = find_local_maxima(far, 5.0)
    np.testing.assert_array_equal(got, [[5, 6, 6], [20, 6, 6]])
    near = _gaussian((30, 12, 12), [(10, 6, 6), (13, 6, 6)], [1.0, 0.8], sigma=(0.6, 0.6, 0.6))
    np.testing.assert_array_equal(find_local_maxima(near, 5.0), [[10, 6, 6]])


@given(st.integers(0, 2**31 - 1), st.sampled_from([1.0, 1.5, 2.5]))
def test_maxima_match_brute_force(seed, radius):
    env = np.random.default_rng(seed).random((7, 6, 5))
    got = {tuple(v) for v in find_local_maxima(env, radius)}
    assert got == _brute_maxima(env, radius)


def test_constant_volume_gives_sparse_lexicographic_set():
    env = np.ones((8, 8, 8))
    r = 2.5
    got = find_local_maxima(env, r)
    # brute greedy in lexicographic order
    kept = []
    for v in np.ndindex(env.shape):
        if all(np.sum((np.subtract(v, k)) ** 2) > r * r for k in kept):
            kept.append(v)
    assert [tuple(v) for v in got] == kept
    d = np.linalg.norm(got[:, None, :] - got[None, :, :], axis=2)
    assert np.all(d[np.triu_indices(len(got), 1)] > r)


def test_threshold_only_restricts_candidates():
    env = _gaussian((20, 10, 10), [(4, 5, 5), (14, 5, 5)], [1.0, 0.1])
    got = find_local_maxima(env, 3.0, threshold=0.5)
    np.testing.assert_array_equal(got, [[4, 5, 5]])


def test_gaussian_fit_exact_on_voxel(half_grid):
    env = _gaussian((16, 16, 16), [(8, 7, 9)], [100.0])
    det = gaussian_fit(env, (8, 7, 9), half_grid)
    err = np.asarray(det.position) - half_grid.to_mm((8, 7, 9))
    assert np.all(np.abs(err) < 1e-9 * WL)


@pytest.mark.parametrize("method", ["kernel", "profile"])
def test_gaussian_fit_subvoxel_offset(half_grid, method):
    env = _gaussian((16, 16, 16), [(8.3, 7, 9)], [100.0])
    det = gaussian_fit(env, (8, 7, 9), half_grid, method=method)
    idx = half_grid.to_index(det.position)
    assert abs(idx[0] - 8.3) < 0.01
    assert np.all(np.abs(idx[1:] - [7, 9]) < 0.01)


def test_gaussian_fit_border_and_rejection():
    g = _grid((16, 16, 16))
    assert kernel_half_width(g).tolist() == [3, 3, 3]
    env = _gaussian((16, 16, 16), [(0, 8, 8)], [100.0])
    det = gaussian_fit(env, (0, 8, 8), g)
    # clipped kernel still fits
    assert det is not None
    assert gaussian_fit(np.ones((16, 16, 16)), (8, 8, 8), g) is None
    with pytest.raises(ValueError):
        gaussian_fit(_gaussian((16, 16, 16), [(8, 8, 8)], [1.0]), (8, 8, 8), g, method="lm")


def test_noise_floor():
    assert noise_floor(np.array([0, 1.0, 2.0])) == 1.0
    assert noise_floor(np.array([0, 0, 0, 3.0])) == 3.0
    assert noise_floor(np.zeros(4)) == 0.0


def test_noise_only_frame_is_empty():
    rng = np.random.default_rng(3)
    env = np.abs(rng.standard_normal((16, 16, 16)) + 1j * rng.standard_normal((16, 16, 16)))
    assert detect_frame(env, _grid((16, 16, 16))) == []
    assert detect_frame(np.zeros((8, 8, 8)), _grid((8, 8, 8))) == []


def test_ten_bubbles_at_50db():
    rng = np.random.default_rng(4)
    dims = (40, 40, 40)
    g = _grid(dims)
    pts = [np.array([5 + 7.5 * (k % 4), 6 + 9 * ((k // 4) % 4), 8 + 12 * (k // 8)]) + rng.uniform(-0.5, 0.5, 3)
           for k in range(10)]
    env = _gaussian(dims, pts, [10 ** 2.5] * 10) + 1.0
    dets = detect_frame(env, g, gate_db=40)
    assert len(dets) == 10
    truth = np.array([g.to_mm(p) for p in pts])
    for d in dets:
        assert np.min(np.linalg.norm(truth - np.asarray(d.position), axis=1)) < WL / 10
        assert d.intensity >= 40


def test_cap_keeps_brightest():
    rng = np.random.default_rng(5)
    n = (15, 15, 14)
    # pitch 8 keeps every patch outside its neighbours' 5-voxel dilation sphere
    centres = [np.array(v) * 8 + 3 for v in np.ndindex(n)][:3000]
    amps = 10 ** rng.uniform(2.5, 4.0, len(centres))
    dims = (120, 120, 112)
    env = np.ones(dims)
    for c, a in zip(centres, amps):
        sl = tuple(slice(ci - 2, ci + 3) for ci in c)
        env[sl] += _gaussian((5, 5, 5), [(2, 2, 2)], [a], sigma=(0.8, 0.8, 0.8))
    dets = detect_frame(env, _grid(dims), gate_db=40, cap=2048)
    assert len(dets) == 2048
    got = sorted(round(d.intensity, 9) for d in dets)
    want = np.sort(20 * np.log10(np.asarray(amps) + 1.0))[-2048:]
    np.testing.assert_allclose(got, want, rtol=1e-9)


def _scene(seed):
    rng = np.random.default_rng(seed)
    dims = (24, 24, 24)
    pts = [rng.uniform(6, 18, 3) for _ in range(3)]
    env = _gaussian(dims, pts, rng.uniform(300, 1000, 3)) + 1 + 0.01 * rng.random(dims)
    return env


@given(st.integers(0, 2**31 - 1), st.tuples(*[st.integers(-3, 3)] * 3))
def test_translation_equivariance(seed, shift):
    env = _scene(seed)
    g = _grid(env.shape)
    moved = np.roll(env, shift, axis=(0, 1, 2))
    a = detect_frame(env, g)
    b = detect_frame(moved, g)
    inner = [d for d in a if np.all((g.to_index(d.position) > 8) & (g.to_index(d.position) < 15))]
    for d in inner:
        expect = np.asarray(d.position) + np.asarray(shift) * H
        assert min(np.linalg.norm(np.asarray(e.position) - expect) for e in b) < 1e-9


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_scaling_does_not_move_detections(seed, scale):
    env = _scene(seed)
    g = _grid(env.shape)
    a = detect_frame(env, g)
    b = detect_frame(env * scale, g)
    assert len(a) == len(b)
    for d, e in zip(a, b):
        np.testing.assert_allclose(d.position, e.position, atol=1e-9)


def test_block_detection_independent_of_workers():
    frames = np.stack([_scene(s) for s in range(4)], axis=3).astype(np.float32)
    blk = IQVolumeBlock(_grid(frames.shape[:3]), frames, block_index=2, frame_offset=10)
    one = detect_block(blk, workers=1)
    many = detect_block(blk, workers=3)
    assert one == many and one
    assert {d.frame for d in one} <= set(range(10, 14))
    assert all(d.block == 2 for d in one)


def test_localizer_estimator():
    g = _grid((16, 16, 16))
    rng = np.random.default_rng(7)
    x = 0.001 * (rng.standard_normal((16, 16, 16, 12)) + 1j * rng.standard_normal((16, 16, 16, 12)))
    x += _gaussian((16, 16, 16), [(8, 8, 8)], [1.0])[..., None]
    est = BubbleLocalizer(gate_db=20).fit()
    dets = est.transform([IQVolumeBlock(g, x.astype(np.complex64))])
    # 12 IQ frames, 11 autocorrelation frames, 7 after the 5-frame window
    assert est.n_detections_ == len(dets) == 7
    for d in dets:
        np.testing.assert_allclose(g.to_index(d.position), [8, 8, 8], atol=0.05)
    with pytest.raises(ValueError):
        BubbleLocalizer(method="lm").fit()
