"""Dataset containers, text file formats, label mapping and a synthetic two-domain generator.

Window container (``SFEEG,v1``)::

    SFEEG,v1,<rate>,<channels>,<window_samples>
    <subject_id>,<label or -1>,<channels*samples floats, channel-major>
    ...

Feature CSV::

    subject_id,label,f0,...,f159
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError
from .features import N_CHANNELS, RawWindow, segment

N_FEATURES = 160
UNKNOWN_LABEL = -1

# DEAP channel order, used as the canonical 32-channel layout
CHANNEL_NAMES = (
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1", "Oz", "Pz",
    "Fp2", "AF4", "Fz", "F4", "F8", "FC6", "FC2", "Cz", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
)


@dataclass
class WindowDataset:
    """Homogeneous set of raw windows stored as one [N, channels, samples] array."""
    data: np.ndarray
    subject_ids: np.ndarray
    labels: np.ndarray
    rate: float
    domain: str = "source"

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 3:
            raise ParameterError("window data must be [N, channels, samples]")
        if not (len(self.data) == len(self.subject_ids) == len(self.labels)):
            raise ParameterError("data, subject ids and labels differ in length")

    def __len__(self):
        return len(self.data)

    def __getitem__(self, i) -> RawWindow:
        label = int(self.labels[i])
        return RawWindow(self.data[i], self.rate, str(self.subject_ids[i]),
                         None if label == UNKNOWN_LABEL else label)

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_samples(self):
        return self.data.shape[2]

    @property
    def has_labels(self):
        return bool(len(self)) and bool(np.all(self.labels != UNKNOWN_LABEL))

    def subset(self, idx) -> "WindowDataset":
        return WindowDataset(self.data[idx], self.subject_ids[idx], self.labels[idx], self.rate, self.domain)


@dataclass
class FeatureSet:
    values: np.ndarray
    subject_ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.values)

    @property
    def has_labels(self):
        return bool(len(self)) and bool(np.all(self.labels != UNKNOWN_LABEL))


def _fmt(values) -> str:
    # 9 significant digits round-trip float32 exactly
    return ",".join(f"{v:.9g}" for v in values)


def write_windows(ds: WindowDataset, path):
    with open(path, "w") as fh:
        fh.write(f"SFEEG,v1,{ds.rate:g},{ds.n_channels},{ds.n_samples}\n")
        for x, sid, lab in zip(ds.data, ds.subject_ids, ds.labels):
            fh.write(f"{sid},{int(lab)},{_fmt(x.ravel().tolist())}\n")


def load_windows(path, domain="source") -> WindowDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 5 or header[0] != "SFEEG" or header[1] != "v1":
            raise ParseError(f"malformed header {','.join(header)!r}", 1)
        try:
            rate = float(header[2])
            channels, samples = int(header[3]), int(header[4])
        except ValueError:
            raise ParseError("non-numeric header field", 1) from None
        if rate <= 0 or channels <= 0 or samples <= 0:
            raise ParseError("header values must be positive", 1)
        width = channels * samples
        rows, sids, labels = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width + 2:
                raise ParseError(f"expected {width + 2} fields, found {len(parts)}", lineno)
            try:
                lab = int(parts[1])
                values = np.array(parts[2:], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric field", lineno) from None
            if lab not in (UNKNOWN_LABEL, 0, 1):
                raise ParseError(f"label {lab} not in {{-1, 0, 1}}", lineno)
            rows.append(values.astype(np.float32).reshape(channels, samples))
            sids.append(parts[0])
            labels.append(lab)
    data = np.stack(rows) if rows else np.zeros((0, channels, samples), np.float32)
    return WindowDataset(data, np.array(sids, dtype=str), np.array(labels, dtype=np.int64), rate, domain)


def write_features(fs: FeatureSet, path):
    dim = fs.values.shape[1]
    with open(path, "w") as fh:
        fh.write("subject_id,label," + ",".join(f"f{i}" for i in range(dim)) + "\n")
        for v, sid, lab in zip(fs.values, fs.subject_ids, fs.labels):
            fh.write(f"{sid},{int(lab)},{','.join(repr(x) for x in v.tolist())}\n")


def load_features(path, dim: int = N_FEATURES) -> FeatureSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty feature file", 1)
        expected = ["subject_id", "label"] + [f"f{i}" for i in range(dim)]
        if header != expected:
            raise ParseError(f"expected header subject_id,label,f0..f{dim - 1} ({dim + 2} columns), "
                             f"found {len(header)} columns", 1)
        vals, sids, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise ParseError(f"expected {dim + 2} columns, found {len(row)}", lineno)
            try:
                labels.append(int(row[1]))
                vals.append(np.array(row[2:], dtype=np.float64))
            except ValueError:
                raise ParseError("non-numeric field", lineno) from None
            sids.append(row[0])
    values = np.stack(vals) if vals else np.zeros((0, dim))
    return FeatureSet(values, sids, labels)


def map_labels(value, kind: str):
    """Map a DEAP valence rating or a SEED category to 1 (positive), 0 (negative) or None (excluded)."""
    if kind == "deap":
        v = float(value)
        if not 1.0 <= v <= 9.0:
            raise ParameterError(f"DEAP valence {v} outside [1, 9]")
        return 1 if v > 4.5 else 0
    if kind == "seed":
        if value not in (-1, 0, 1):
            raise ParameterError(f"SEED category {value} not in {{-1, 0, 1}}")
        return {1: 1, -1: 0, 0: None}[int(value)]
    raise ParameterError(f"unknown dataset kind {kind!r}")


# -- synthetic generator ----------------------------------------------------

@dataclass
class SynthConfig:
    """Two-domain synthetic EEG benchmark.

    Each trial is per-channel pink noise plus alpha, beta and theta
    oscillations with slow amplitude envelopes, scaled by per-subject channel
    gains. Positive trials carry ``class_effect`` times more alpha amplitude,
    negative trials the same factor more beta.

    The target domain differs from the source through ``gain_spread``
    (extra log-normal per-channel gain sigma), ``alpha_offset_hz`` (shift of
    the alpha peak) and ``noise_ratio`` (pink-noise amplitude multiplier).
    ``gain_spread=0, alpha_offset_hz=0, noise_ratio=1`` gives identically
    distributed domains.
    """
    subjects: int = 5
    trials_per_subject: int = 40
    seconds_per_trial: int = 51
    class_balance: float = 0.5
    rate: float = 128.0
    channels: int = N_CHANNELS
    class_effect: float = 2.0
    subject_spread: float = 0.15
    trial_jitter: float = 0.2
    gain_spread: float = 0.4
    alpha_offset_hz: float = -2.5
    noise_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.subjects, self.trials_per_subject) < 1 or self.seconds_per_trial < 2:
            raise ParameterError("subjects and trials must be >= 1 and trials at least 2 s long")
        if not 0.0 < self.class_balance < 1.0:
            raise ParameterError("class_balance must lie in (0, 1)")
        if self.noise_ratio <= 0 or self.class_effect <= 0:
            raise ParameterError("noise_ratio and class_effect must be positive")

    def without_shift(self) -> "SynthConfig":
        return replace(self, gain_spread=0.0, alpha_offset_hz=0.0, noise_ratio=1.0)


ALPHA_HZ = 10.0
BETA_HZ = 20.0
THETA_HZ = 6.0


def pink_noise(rng: np.random.Generator, shape, exponent: float = 1.0) -> np.ndarray:
    """Unit-variance 1/f^exponent noise along the last axis."""
    n = shape[-1]
    m = n // 2 + 1
    spectrum = rng.standard_normal((*shape[:-1], m)) + 1j * rng.standard_normal((*shape[:-1], m))
    f = np.arange(m, dtype=np.float64)
    f[0] = 1.0
    spectrum /= f ** (exponent / 2.0)
    spectrum[..., 0] = 0.0
    x = np.fft.irfft(spectrum, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _envelopes(rng, count, n, rate, depth=0.3, cutoff_hz=0.25):
    """Mean-one amplitude envelopes [count, n] built from the sub-``cutoff_hz`` Fourier modes."""
    t = np.arange(n) / rate
    freqs = np.arange(1, int(cutoff_hz * n / rate) + 1) * rate / n
    if freqs.size == 0:
        return np.ones((count, n))
    basis = np.cos(2 * np.pi * freqs[:, None] * t[None, :])
    phases = np.sin(2 * np.pi * freqs[:, None] * t[None, :])
    a = rng.standard_normal((count, freqs.size))
    b = rng.standard_normal((count, freqs.size))
    smooth = a @ basis + b @ phases
    smooth /= smooth.std(axis=1, keepdims=True) + 1e-12
    return np.clip(1.0 + depth * smooth, 0.1, None)


def _tones(rng, amps, freq, n, rate):
    """Sinusoids at ``freq`` (jittered +-0.3 Hz per channel) with random phase, times ``amps`` [C, n]."""
    c = amps.shape[0]
    t = np.arange(n) / rate
    f = freq + rng.uniform(-0.3, 0.3, size=(c, 1))
    return amps * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi, size=(c, 1)))


def _domain(cfg: SynthConfig, rng: np.random.Generator, shifted: bool, prefix: str) -> WindowDataset:
    n = int(cfg.seconds_per_trial * cfg.rate)
    c = cfg.channels
    # fixed topography: alpha strongest posteriorly, beta frontally
    pos = np.linspace(0.0, 1.0, c)[:, None]
    alpha_topo = 0.6 + 0.8 * pos
    beta_topo = 0.6 * (1.4 - 0.8 * pos)
    alpha_hz = ALPHA_HZ + (cfg.alpha_offset_hz if shifted else 0.0)
    noise_amp = cfg.noise_ratio if shifted else 1.0
    windows, sids, labels = [], [], []
    for s in range(cfg.subjects):
        log_gain = rng.normal(0.0, cfg.subject_spread, size=(c, 1))
        if shifted and cfg.gain_spread > 0:
            log_gain = log_gain + rng.normal(0.0, cfg.gain_spread, size=(c, 1))
        gain = np.exp(log_gain)
        subj_alpha, subj_beta = np.exp(rng.normal(0.0, cfg.subject_spread, size=2))
        # stratified with cumulative rounding so the domain total is within half a trial
        n_pos = (int(round(cfg.class_balance * cfg.trials_per_subject * (s + 1)))
                 - int(round(cfg.class_balance * cfg.trials_per_subject * s)))
        trial_labels = rng.permutation(np.repeat([1, 0], [n_pos, cfg.trials_per_subject - n_pos]))
        for y in trial_labels.tolist():
            jitter_a, jitter_b = np.exp(rng.normal(0.0, cfg.trial_jitter, size=2))
            a_amp = subj_alpha * jitter_a * (cfg.class_effect if y == 1 else 1.0)
            b_amp = subj_beta * jitter_b * (1.0 if y == 1 else cfg.class_effect)
            env = _envelopes(rng, 3 * c, n, cfg.rate)
            trial = noise_amp * pink_noise(rng, (c, n))
            trial += _tones(rng, a_amp * alpha_topo * env[:c], alpha_hz, n, cfg.rate)
            trial += _tones(rng, b_amp * beta_topo * env[c:2 * c], BETA_HZ, n, cfg.rate)
            trial += _tones(rng, 0.5 * env[2 * c:], THETA_HZ, n, cfg.rate)
            w = segment(gain * trial, cfg.rate)
            windows.append(w.astype(np.float32))
            sids += [f"{prefix}{s:02d}"] * len(w)
            labels += [y] * len(w)
    return WindowDataset(np.concatenate(windows), np.array(sids), np.array(labels), cfg.rate,
                         "target" if shifted else "source")


def generate_synthetic(cfg: SynthConfig) -> tuple[WindowDataset, WindowDataset]:
    """Return ``(source, target)`` window datasets; deterministic in ``cfg.seed``."""
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    return _domain(cfg, src_rng, False, "S"), _domain(cfg, tgt_rng, True, "T")
