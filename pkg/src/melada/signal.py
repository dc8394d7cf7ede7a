"""Differential-entropy features from raw multichannel EEG.

Pipeline: 1-second non-overlapping Hann-tapered windows -> per-band spectral
energy -> log energy (DE) -> Kalman/RTS smoothing along time -> fixed-length
sequences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ENERGY_FLOOR = 1e-12


@dataclass(frozen=True)
class BandSpec:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not (0 < self.lo_hz <= self.hi_hz):
            raise ValueError(f"band {self.name}: need 0 < lo <= hi, got {self.lo_hz}..{self.hi_hz}")


DEFAULT_BANDS = (
    BandSpec("delta", 1, 3),
    BandSpec("theta", 4, 7),
    BandSpec("alpha", 8, 13),
    BandSpec("beta", 14, 30),
    BandSpec("gamma", 31, 50),
)


@dataclass
class FeatureFrame:
    """DE values for one 1-second window, flattened channel-major (ch0 bands, ch1 bands, ...)."""

    values: np.ndarray
    timestamp_s: float


def hann_periodic(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def _one_sided_power(window: np.ndarray) -> np.ndarray:
    """Power per non-negative frequency bin such that the bins sum to the
    time-domain energy of the tapered window."""
    n = window.shape[-1]
    spec = np.fft.rfft(window * hann_periodic(n), axis=-1)
    power = (spec.real**2 + spec.imag**2) / n
    power[..., 1:] *= 2.0
    if n % 2 == 0:
        power[..., -1] /= 2.0  # Nyquist bin has no mirror
    return power


def stft_band_energy(window, fs: float, bands=DEFAULT_BANDS) -> np.ndarray:
    """Band energies of one 1-second window.

    Parameters
    ----------
    window : array, shape (channels, samples)
        Exactly ``fs`` samples per channel.
    fs : float
        Sampling rate in Hz.
    bands : sequence of BandSpec

    Returns
    -------
    array, shape (channels, len(bands))
        Sum of one-sided Hann-tapered power over bins with lo <= f <= hi.
    """
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    n = window.shape[-1]
    if n != int(round(fs)):
        raise ValueError(f"window has {n} samples but a 1-second window at fs={fs} needs {fs}")
    top = max(b.hi_hz for b in bands)
    if fs < 2 * top:
        raise ValueError(f"fs={fs} Hz cannot resolve bands up to {top} Hz (need fs >= {2 * top})")
    power = _one_sided_power(window)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    out = np.empty((window.shape[0], len(bands)))
    for j, b in enumerate(bands):
        sel = (freqs >= b.lo_hz) & (freqs <= b.hi_hz)
        out[:, j] = power[:, sel].sum(axis=1)
    return out


def tapered_energy(window) -> tuple[float, float]:
    """(time-domain energy, spectral energy) of a Hann-tapered window; equal by Parseval."""
    x = np.asarray(window, dtype=np.float64)
    xw = x * hann_periodic(x.shape[-1])
    return float(np.sum(xw * xw)), float(np.sum(_one_sided_power(x)))


def differential_entropy(energy):
    """Log band energy with a floor at 1e-12."""
    e = np.asarray(energy, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("band energy must be non-negative")
    out = np.log(np.maximum(e, ENERGY_FLOOR))
    return float(out) if out.ndim == 0 else out


def lds_smooth(series, a: float = 1.0, c: float = 1.0, q: float = 1e-4, r: float = 1e-2) -> np.ndarray:
    """Kalman filter + RTS smoother on x_t = a x_{t-1} + w, y_t = c x_t + v.

    Every column of ``series`` (time along axis 0) is an independent scalar
    state. The filter starts at x_0 = y_0 / c with variance r / c**2.
    """
    y = np.asarray(series, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if y.shape[0] < 1:
        raise ValueError("series must contain at least one time step")
    if q <= 0 or r <= 0:
        raise ValueError("process and observation variances must be positive")
    if c == 0:
        raise ValueError("observation gain c must be nonzero")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")

    n = y.shape[0]
    m_f = np.empty_like(y)
    p_f = np.empty(n)
    m_p = np.empty_like(y)
    p_p = np.empty(n)
    m, p = y[0] / c, r / c**2
    for t in range(n):
        if t:
            m, p = a * m, a * a * p + q
        m_p[t], p_p[t] = m, p
        k = p * c / (c * c * p + r)
        m = m + k * (y[t] - c * m)
        p = (1.0 - k * c) * p
        m_f[t], p_f[t] = m, p

    m_s = m_f.copy()
    for t in range(n - 2, -1, -1):
        j = p_f[t] * a / p_p[t + 1]
        m_s[t] = m_f[t] + j * (m_s[t + 1] - m_p[t + 1])
    return m_s[:, 0] if squeeze else m_s


def make_sequences(frames, step: int = 15, stride: int = 14) -> np.ndarray:
    """Slice a (N, F) frame matrix into windows of ``step`` frames every ``stride`` frames.

    Returns an array of shape (W, step, F); W = 0 when N < step.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if step < 1 or not 1 <= stride <= step:
        raise ValueError(f"need step >= 1 and 1 <= stride <= step, got step={step}, stride={stride}")
    n = frames.shape[0]
    if n < step:
        return np.empty((0, step) + frames.shape[1:])
    count = (n - step) // stride + 1
    return np.stack([frames[k * stride : k * stride + step] for k in range(count)])


def extract_frames(raw, fs: float, bands=DEFAULT_BANDS, smooth: bool = True) -> list[FeatureFrame]:
    """Turn a (samples, channels) recording into one DE frame per full second."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"raw signal must be (samples, channels), got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw signal contains non-finite values")
    n = int(round(fs))
    count = raw.shape[0] // n
    de = np.empty((count, raw.shape[1] * len(bands)))
    for k in range(count):
        win = raw[k * n : (k + 1) * n].T
        de[k] = differential_entropy(stft_band_energy(win, fs, bands)).reshape(-1)
    if smooth and count:
        de = lds_smooth(de)
    return [FeatureFrame(de[k], float(k)) for k in range(count)]


def features_from_raw(raw, fs: float, step: int = 15, stride: int = 14, bands=DEFAULT_BANDS) -> np.ndarray:
    frames = extract_frames(raw, fs, bands)
    if not frames:
        return np.empty((0, step, np.asarray(raw).shape[1] * len(bands)))
    return make_sequences(np.stack([f.values for f in frames]), step, stride)
