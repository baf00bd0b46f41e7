"""Band-power features from multichannel EEG windows.

Features are laid out band-major: ``[delta ch0..ch31, theta ch0..ch31, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ParameterError, ShapeError

N_CHANNELS = 32
POWER_FLOOR = 1e-12
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Band:
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ParameterError(f"band {self.name}: need 0 < low < high")


DEFAULT_BANDS = (
    Band("delta", 1.0, 3.0),
    Band("theta", 4.0, 7.0),
    Band("alpha", 8.0, 13.0),
    Band("beta", 14.0, 30.0),
    Band("gamma", 31.0, 50.0),
)


@dataclass
class RawWindow:
    """One EEG segment, ``data`` shaped [channels, samples]."""
    data: np.ndarray
    rate: float
    subject_id: str = ""
    label: int | None = None

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


def segment(trial: np.ndarray, rate: float, window_s: float = 2.0, overlap_s: float = 1.0) -> np.ndarray:
    """Cut a [channels, T] trial into windows starting every ``window_s - overlap_s`` seconds.

    Returns an array [n_windows, channels, window_samples]; a trailing
    partial window is dropped.
    """
    trial = np.asarray(trial)
    if trial.ndim != 2:
        raise ShapeError("trial must be [channels, samples]")
    width = int(round(window_s * rate))
    step = int(round((window_s - overlap_s) * rate))
    if step <= 0:
        raise ParameterError("overlap must be shorter than the window")
    n = (trial.shape[1] - width) // step + 1 if trial.shape[1] >= width else 0
    if n <= 0:
        raise ParameterError(f"trial of {trial.shape[1]} samples is shorter than one {width}-sample window")
    starts = np.arange(n) * step
    return np.stack([trial[:, s:s + width] for s in starts])


def bandpass(x: np.ndarray, low: float, high: float, rate: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    nyq = rate / 2.0
    if not 0 < low < high < nyq:
        raise ParameterError(f"band edges must satisfy 0 < {low} < {high} < {nyq}")
    sos = signal.butter(order, [low, high], btype="bandpass", fs=rate, output="sos")
    return signal.sosfiltfilt(sos, x, axis=-1)


def _check_bands(bands, rate):
    for b in bands:
        if b.low >= rate / 2.0:
            raise ParameterError(f"band {b.name} lies above the Nyquist frequency {rate / 2.0}")


def band_powers(windows: np.ndarray, rate: float, bands=DEFAULT_BANDS) -> np.ndarray:
    """Linear band power per window, channel and band: [..., channels, bands].

    Single-segment Hann periodogram; band power sums PSD bins with
    ``low <= f <= high``.
    """
    _check_bands(bands, rate)
    freqs, psd = signal.periodogram(np.asarray(windows, dtype=np.float64), fs=rate,
                                    window="hann", detrend=False, axis=-1)
    cols = [psd[..., (freqs >= b.low) & (freqs <= b.high)].sum(axis=-1) for b in bands]
    return np.stack(cols, axis=-1)


def _band_major(per_channel: np.ndarray) -> np.ndarray:
    # [..., channels, bands] -> [..., bands * channels]
    swapped = np.swapaxes(per_channel, -1, -2)
    return swapped.reshape(*swapped.shape[:-2], -1)


def psd_features(windows: np.ndarray, rate: float, bands=DEFAULT_BANDS) -> np.ndarray:
    """log10 band power, floored at 1e-12, for one window [C, S] or a batch [N, C, S]."""
    power = band_powers(windows, rate, bands)
    return _band_major(np.log10(np.maximum(power, POWER_FLOOR)))


def differential_entropy(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gaussian differential entropy ``0.5 * ln(2*pi*e*var)`` with the variance floored."""
    var = np.maximum(np.var(x, axis=axis), VARIANCE_FLOOR)
    return 0.5 * np.log(2 * np.pi * np.e * var)


def de_features(windows: np.ndarray, rate: float, bands=DEFAULT_BANDS) -> np.ndarray:
    _check_bands(bands, rate)
    x = np.asarray(windows, dtype=np.float64)
    cols = []
    for b in bands:
        high = min(b.high, 0.99 * rate / 2.0)
        cols.append(differential_entropy(bandpass(x, b.low, high, rate)))
    return _band_major(np.stack(cols, axis=-1))


FEATURE_KINDS = {"psd": psd_features, "de": de_features}


def extract(windows: np.ndarray, rate: float, kind: str = "psd", bands=DEFAULT_BANDS) -> np.ndarray:
    try:
        fn = FEATURE_KINDS[kind]
    except KeyError:
        raise ParameterError(f"unknown feature kind {kind!r}; expected one of {sorted(FEATURE_KINDS)}") from None
    return fn(windows, rate, bands)


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if np.any(self.minimum > self.maximum):
            raise ParameterError("normalizer min exceeds max")

    def to_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["min"]), np.array(d["max"]))


def fit_normalizer(samples: np.ndarray) -> NormalizationStats:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ParameterError("cannot fit a normalizer on an empty sample set")
    if samples.shape[0] < 2:
        raise ParameterError("normalizer needs at least two samples")
    return NormalizationStats(samples.min(axis=0), samples.max(axis=0))


def apply_normalizer(samples: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Min-max scale to [-1, 1]; constant dimensions map to 0 and out-of-range values are clamped."""
    x = np.asarray(samples, dtype=np.float64)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, 2.0 * (x - stats.minimum) / safe - 1.0, 0.0)
    return np.clip(out, -1.0, 1.0)


def invert_normalizer(scaled: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    span = stats.maximum - stats.minimum
    return (np.asarray(scaled, dtype=np.float64) + 1.0) / 2.0 * span + stats.minimum
