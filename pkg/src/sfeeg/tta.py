"""Prediction-confidence-aware test-time augmentation.

A sample is augmented only when its prediction entropy (base 2) reaches
``tau`` *and* its head discrepancy exceeds the frozen mean discrepancy.
Augmented copies are re-featurized with the target normalizer and the
final label is a majority vote over the original and the copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapt import AdaptationState, entropy
from .errors import ParameterError, StateError
from .features import DEFAULT_BANDS, RawWindow, apply_normalizer, extract
from .model import EmotionNet, predict_labels
from .pretrain import discrepancy


@dataclass
class TtaConfig:
    tau: float = 0.9
    noise_sigmas: tuple = (0.01, 0.02)
    resample_factors: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.noise_sigmas = tuple(float(s) for s in self.noise_sigmas)
        self.resample_factors = tuple(float(f) for f in self.resample_factors)
        if not 0.0 < self.tau <= 1.0:
            raise ParameterError("tau must lie in (0, 1]")
        if any(f <= 0 for f in self.resample_factors):
            raise ParameterError("resample factors must be positive")
        if any(s < 0 for s in self.noise_sigmas):
            raise ParameterError("noise sigmas must be non-negative")

    @property
    def votes(self) -> int:
        return len(self.noise_sigmas) + len(self.resample_factors)


@dataclass
class InferenceRecord:
    initial: int
    uncertainty: float
    discrepancy: float
    tta_invoked: bool
    final: int
    copy_predictions: list = field(default_factory=list)


def uncertainty(probs) -> float:
    """Base-2 entropy of a probability vector; in [0, 1] for two classes."""
    return float(entropy(np.asarray(probs, dtype=np.float64)))


def resample(x: np.ndarray, factor: float) -> np.ndarray:
    """Linearly interpolate each row to ``floor(factor * n)`` samples, then crop or zero-pad to ``n``."""
    n = x.shape[-1]
    m = int(np.floor(factor * n))
    if m == n:
        return x.copy()
    grid = np.linspace(0.0, n - 1, m)
    src = np.arange(n)
    stretched = np.stack([np.interp(grid, src, row) for row in x.reshape(-1, n)]).reshape(*x.shape[:-1], m)
    if m > n:
        return stretched[..., :n]
    out = np.zeros_like(x, dtype=np.float64)
    out[..., :m] = stretched
    return out


def augment(data: np.ndarray, config: TtaConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Noise copies (sigma = fraction of per-channel std) followed by resampled copies."""
    data = np.asarray(data, dtype=np.float64)
    std = data.std(axis=-1, keepdims=True)
    copies = [data + rng.standard_normal(data.shape) * (frac * std) for frac in config.noise_sigmas]
    copies += [resample(data, f) for f in config.resample_factors]
    return copies


def majority_vote(initial: int, copies) -> int:
    """Most common label over ``[initial, *copies]``; a tie keeps ``initial``."""
    votes = np.bincount([initial, *copies])
    winners = np.flatnonzero(votes == votes.max())
    return initial if len(winners) > 1 and initial in winners else int(winners[0])


def gate(u: float, d: float, tau: float, mean_discrepancy: float) -> bool:
    return u >= tau and d > mean_discrepancy


class PcTta:
    """Runs gated TTA with a fixed net and adaptation state.

    ``augmented_forwards`` counts augmented copies pushed through the net.
    """

    def __init__(self, net: EmotionNet, state: AdaptationState, config: TtaConfig,
                 rate: float, feature_kind: str = "psd", bands=DEFAULT_BANDS):
        self.net = net
        self.state = state
        self.config = config
        self.rate = rate
        self.feature_kind = feature_kind
        self.bands = bands
        self.augmented_forwards = 0

    def featurize(self, windows: np.ndarray) -> np.ndarray:
        return apply_normalizer(extract(windows, self.rate, self.feature_kind, self.bands), self.state.normalizer)

    def _vote(self, data: np.ndarray, initial: int, index: int):
        rng = np.random.default_rng([self.config.seed, index])
        copies = np.stack(augment(data, self.config, rng))
        labels = predict_labels(self.net.forward(self.featurize(copies)).probs_avg)
        self.augmented_forwards += len(copies)
        return [int(v) for v in labels], majority_vote(initial, labels.tolist())

    def predict(self, window: RawWindow | None, index: int = 0, features: np.ndarray | None = None,
                feature_only: bool = False) -> InferenceRecord:
        """Infer one sample. ``features`` (already normalized) may replace the window's own.

        If the gate opens and no raw window is available, raises unless
        ``feature_only`` is set, in which case TTA is skipped.
        """
        if features is None:
            if window is None:
                raise ParameterError("need a raw window or precomputed features")
            features = self.featurize(window.data)
        out = self.net.forward(np.atleast_2d(features))
        return self.record(out.probs1[0], out.probs2[0], window, index, feature_only)

    def record(self, p1, p2, window, index, feature_only=False):
        """Gate and vote for one sample given its two head outputs."""
        pavg = 0.5 * (p1 + p2)
        initial = int(predict_labels(pavg[None])[0])
        u = uncertainty(pavg)
        d = float(discrepancy(p1[None], p2[None])[0])
        if feature_only or not gate(u, d, self.config.tau, self.state.mean_discrepancy):
            return InferenceRecord(initial, u, d, False, initial)
        if window is None:
            raise StateError(f"sample {index} needs TTA but no raw window is available")
        copies, final = self._vote(window.data, initial, index)
        return InferenceRecord(initial, u, d, True, final, copies)

    def predict_many(self, windows: np.ndarray, feature_only: bool = False) -> list[InferenceRecord]:
        """Batch inference over [N, C, S] windows; sample ``i`` augments with seed ``(seed, i)``."""
        feats = self.featurize(windows)
        out = self.net.forward(feats)
        records = []
        for i in range(len(feats)):
            w = RawWindow(windows[i], self.rate)
            records.append(self.record(out.probs1[i], out.probs2[i], w, i, feature_only))
        return records


def pc_tta_predict(net: EmotionNet, window: RawWindow, state: AdaptationState, config: TtaConfig,
                   feature_kind: str = "psd", index: int = 0) -> InferenceRecord:
    return PcTta(net, state, config, window.rate, feature_kind).predict(window, index)
