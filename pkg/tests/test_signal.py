import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from melada.signal import (
    DEFAULT_BANDS,
    BandSpec,
    differential_entropy,
    extract_frames,
    features_from_raw,
    lds_smooth,
    make_sequences,
    stft_band_energy,
    tapered_energy,
)
from oracles import dft_band_energy, kalman_rts_reference

FS = 200
T = np.arange(FS) / FS


def test_default_bands():
    assert [(b.lo_hz, b.hi_hz) for b in DEFAULT_BANDS] == [(1, 3), (4, 7), (8, 13), (14, 30), (31, 50)]


def test_band_spec_validation():
    with pytest.raises(ValueError):
        BandSpec("bad", 0.0, 3.0)
    with pytest.raises(ValueError):
        BandSpec("bad", 5.0, 3.0)


def test_zero_window_has_zero_energy():
    e = stft_band_energy(np.zeros((3, FS)), FS)
    assert e.shape == (3, 5)
    assert np.all(e == 0)


def test_alpha_sinusoid_matches_direct_dft():
    x = np.sin(2 * np.pi * 10 * T)
    e = stft_band_energy(x[None, :], FS)[0]
    ref = [dft_band_energy(x, FS, b.lo_hz, b.hi_hz) for b in DEFAULT_BANDS]
    np.testing.assert_allclose(e, ref, rtol=1e-9, atol=1e-12)
    others = np.delete(e, 2)
    assert np.all(others < 1e-6 * e[2])
    assert e[2] / e.sum() > 0.999999


def test_two_tones_land_in_delta_and_gamma():
    x = np.sin(2 * np.pi * 2 * T) + np.sin(2 * np.pi * 40 * T)
    e = stft_band_energy(x[None, :], FS)[0]
    ref = [dft_band_energy(x, FS, b.lo_hz, b.hi_hz) for b in DEFAULT_BANDS]
    np.testing.assert_allclose(e, ref, rtol=1e-9, atol=1e-12)
    top = min(e[0], e[4])
    assert e[1] < 1e-6 * top and e[2] < 1e-6 * top and e[3] < 1e-6 * top


def test_band_edges_are_inclusive():
    # 1 Hz bins; a Hann-tapered bin-centred tone puts 1/16 of its peak power
    # in each neighbour, so an edge tone keeps exactly 5/6 inside the band
    for f in (8, 13):
        e = stft_band_energy(np.cos(2 * np.pi * f * T)[None, :], FS)[0]
        assert e[2] / e.sum() == pytest.approx(5 / 6, rel=1e-12)


def test_random_window_matches_direct_dft():
    x = np.random.default_rng(4).normal(size=FS)
    e = stft_band_energy(x[None, :], FS)[0]
    ref = [dft_band_energy(x, FS, b.lo_hz, b.hi_hz) for b in DEFAULT_BANDS]
    np.testing.assert_allclose(e, ref, rtol=1e-9)


def test_low_sample_rate_rejected():
    with pytest.raises(ValueError, match="cannot resolve"):
        stft_band_energy(np.zeros((1, 64)), 64)
    with pytest.raises(ValueError):
        stft_band_energy(np.zeros((1, 150)), FS)


@pytest.mark.parametrize("n", [200, 201, 128, 255])
def test_parseval(n):
    x = np.random.default_rng(n).normal(size=n)
    te, se = tapered_energy(x)
    assert abs(te - se) / te < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 2**31 - 1))
def test_channel_permutation_covariance(perm, seed):
    x = np.random.default_rng(seed).normal(size=(4, FS))
    e = stft_band_energy(x, FS)
    ep = stft_band_energy(x[list(perm)], FS)
    assert np.array_equal(ep, e[list(perm)])


def test_differential_entropy_examples():
    assert differential_entropy(1.0) == 0.0
    assert differential_entropy(math.e) == pytest.approx(1.0, abs=1e-15)
    assert differential_entropy(0.0) == pytest.approx(-27.6310211159, abs=1e-9)
    assert differential_entropy(0.0) == math.log(1e-12)
    with pytest.raises(ValueError):
        differential_entropy(-1e-3)


def test_lds_constant_series():
    np.testing.assert_allclose(lds_smooth([5.0, 5.0, 5.0, 5.0]), [5.0] * 4, atol=1e-9)


def test_lds_impulse_matches_reference():
    y = np.zeros(21)
    y[10] = 1.0
    out = lds_smooth(y)
    assert out.shape == y.shape
    assert out.max() < 1.0
    np.testing.assert_allclose(out, kalman_rts_reference(y), atol=1e-9, rtol=0)


@pytest.mark.parametrize("params", [dict(), dict(a=0.9, c=2.0, q=0.05, r=0.3), dict(a=1.1, c=-0.5, q=1e-3, r=1.0)])
def test_lds_random_series_matches_reference(params):
    y = np.random.default_rng(1).normal(size=(40, 3)).cumsum(axis=0)
    out = lds_smooth(y, **params)
    for j in range(3):
        np.testing.assert_allclose(out[:, j], kalman_rts_reference(y[:, j], **params), atol=1e-9, rtol=0)


def test_lds_errors():
    with pytest.raises(ValueError):
        lds_smooth([1.0, np.nan])
    with pytest.raises(ValueError):
        lds_smooth([1.0, 2.0], q=0.0)
    with pytest.raises(ValueError):
        lds_smooth([])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-100, 100)))
def test_lds_preserves_length_and_finiteness(y):
    out = lds_smooth(y)
    assert out.shape == y.shape and np.all(np.isfinite(out))


@pytest.mark.parametrize("n,expected", [(15, 1), (29, 2), (14, 0), (43, 3), (100, 7)])
def test_window_counts(n, expected):
    frames = np.arange(n * 2, dtype=float).reshape(n, 2)
    assert len(make_sequences(frames, 15, 14)) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 10), st.data())
def test_windows_are_exact_slices(n, step, data):
    stride = data.draw(st.integers(1, step))
    frames = np.random.default_rng(n).normal(size=(n, 3))
    w = make_sequences(frames, step, stride)
    expected = 0 if n < step else (n - step) // stride + 1
    assert w.shape == (expected, step, 3)
    for k in range(expected):
        assert w[k].tobytes() == frames[k * stride : k * stride + step].tobytes()


def test_make_sequences_rejects_bad_stride():
    with pytest.raises(ValueError):
        make_sequences(np.zeros((20, 2)), 5, 6)


def test_frames_are_channel_major_and_smoothed():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(FS * 4, 2))
    frames = extract_frames(raw, FS, smooth=False)
    assert len(frames) == 4 and frames[0].values.shape == (10,)
    direct = differential_entropy(stft_band_energy(raw[:FS].T, FS))
    np.testing.assert_array_equal(frames[0].values, direct.reshape(-1))
    assert [f.timestamp_s for f in frames] == [0.0, 1.0, 2.0, 3.0]
    smoothed = extract_frames(raw, FS)
    np.testing.assert_allclose(
        np.stack([f.values for f in smoothed]), lds_smooth(np.stack([f.values for f in frames])), atol=1e-12
    )


def test_features_from_raw_shape():
    raw = np.random.default_rng(2).normal(size=(FS * 29, 62))
    seq = features_from_raw(raw, FS)
    assert seq.shape == (2, 15, 310)
