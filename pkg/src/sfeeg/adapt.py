"""Source-free target adaptation.

Everything here consumes a pretrained network and *unlabeled* target
features only. The stages are:

1. computation: target normalizer, soft class centroids in feature space
   and the mean head discrepancy, all frozen afterwards;
2. DLAR: cross-entropy against nearest-centroid pseudo-labels plus head
   agreement on confident samples;
3. LCL: prediction consistency between neighbours shared by the
   feature-space and softmax-space kNN graphs of each batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateCentroidError, ParameterError
from .features import NormalizationStats, apply_normalizer, fit_normalizer
from .model import EmotionNet, NetOutput, load_checkpoint, optimizer_for, predict_labels
from .nn import BatchNorm1d
from .pretrain import LOG_FLOOR, discrepancy, discrepancy_grad, iterate_batches

MASS_FLOOR = 1e-12
DOT_FLOOR = 1e-12


@dataclass
class AdaptationState:
    centroids: np.ndarray
    mean_discrepancy: float
    normalizer: NormalizationStats

    def to_json(self) -> str:
        return json.dumps({
            "centroids": np.asarray(self.centroids, dtype=np.float64).tolist(),
            "mean_discrepancy": float(self.mean_discrepancy),
            "normalizer": self.normalizer.to_dict(),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AdaptationState":
        d = json.loads(text)
        return cls(np.array(d["centroids"]), d["mean_discrepancy"], NormalizationStats.from_dict(d["normalizer"]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "AdaptationState":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class DlarConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


@dataclass
class LclConfig:
    epochs: int = 30
    k: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not 1 <= self.k < self.batch_size:
            raise ParameterError("need 1 <= k < batch_size")


# -- computation stage ------------------------------------------------------

def evaluate_outputs(net: EmotionNet, x: np.ndarray, batch_size: int = 1024):
    """Evaluation-mode features, per-head probabilities over a whole set (fixed batch order)."""
    feats, p1, p2 = [], [], []
    for start in range(0, len(x), batch_size):
        out = net.forward(x[start:start + batch_size], training=False)
        feats.append(out.features)
        p1.append(out.probs1)
        p2.append(out.probs2)
    return np.concatenate(feats), np.concatenate(p1), np.concatenate(p2)


def weighted_centroids(features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Soft-assignment centroids ``sum_x p_k(x) F(x) / sum_x p_k(x)`` for each class k."""
    features = np.asarray(features, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    mass = probs.sum(axis=0)
    if np.any(mass < MASS_FLOOR):
        bad = np.flatnonzero(mass < MASS_FLOOR).tolist()
        raise DegenerateCentroidError(f"classes {bad} have no soft mass in the target set")
    return (probs.T @ features) / np.maximum(mass, MASS_FLOOR)[:, None]


def compute_centroids(net: EmotionNet, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        raise ParameterError("empty target set")
    feats, p1, p2 = evaluate_outputs(net, x)
    return weighted_centroids(feats, 0.5 * (p1 + p2))


def compute_mean_discrepancy(net: EmotionNet, x: np.ndarray) -> float:
    if len(x) == 0:
        raise ParameterError("empty target set")
    _, p1, p2 = evaluate_outputs(net, x)
    return float(discrepancy(p1, p2).mean())


def recalibrate_batchnorm(net: EmotionNet, x: np.ndarray):
    """Replace every batch-norm running mean/variance with exact statistics of ``x``.

    Layers are visited in order, so each one sees inputs already normalized
    with the recalibrated statistics upstream. The variance is unbiased,
    matching the running-statistics update.
    """
    x = np.asarray(x, dtype=net.dtype)
    if len(x) < 2:
        raise ParameterError("recalibration needs at least 2 samples")

    def run(seq, h):
        for layer in seq.layers:
            if isinstance(layer, BatchNorm1d):
                h64 = h.astype(np.float64)
                layer.running_mean = h64.mean(axis=0).astype(net.dtype)
                layer.running_var = h64.var(axis=0, ddof=1).astype(net.dtype)
            h = layer.forward(h, training=False)
        return h

    feats = run(net.extractor, x)
    run(net.head1, feats)
    run(net.head2, feats)


def computation_stage(net: EmotionNet, raw_target: np.ndarray):
    """Fit the target normalizer and freeze centroids and mean discrepancy.

    Returns ``(state, normalized_target_features)``.
    """
    normalizer = fit_normalizer(raw_target)
    x = apply_normalizer(raw_target, normalizer)
    feats, p1, p2 = evaluate_outputs(net, x)
    state = AdaptationState(weighted_centroids(feats, 0.5 * (p1 + p2)),
                            float(discrepancy(p1, p2).mean()), normalizer)
    return state, x


# -- DLAR -------------------------------------------------------------------

def pseudo_label(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (Euclidean); ties go to the lower class index."""
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d = np.linalg.norm(f[:, None, :] - c[None, :, :], axis=2)
    return np.argmin(d, axis=1)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Base-2 Shannon entropy per row, with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    logs = np.log2(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logs).sum(axis=-1)


def confident_set(out: NetOutput, mean_discrepancy: float) -> np.ndarray:
    """Boolean mask: head discrepancy below ``mean_discrepancy`` and entropy below the batch mean."""
    h = entropy(out.probs_avg)
    d = discrepancy(out.probs1, out.probs2)
    return (d < mean_discrepancy) & (h < h.mean())


@dataclass
class DlarLosses:
    plal: float
    ccdl: float
    d_probs1: np.ndarray = field(repr=False)
    d_probs2: np.ndarray = field(repr=False)

    @property
    def total(self) -> float:
        return self.plal + self.ccdl


def plal_loss(probs_avg: np.ndarray, pseudo: np.ndarray):
    """Batch-mean cross-entropy against pseudo-labels; returns ``(loss, d_probs_avg)``."""
    p = np.asarray(probs_avg, dtype=np.float64)
    n = p.shape[0]
    rows = np.arange(n)
    py = p[rows, pseudo]
    loss = float(-np.log(np.maximum(py, LOG_FLOOR)).mean())
    grad = np.zeros_like(p)
    live = py > LOG_FLOOR
    grad[rows[live], pseudo[live]] = -1.0 / (n * py[live])
    return loss, grad


def ccdl_loss(probs1, probs2, mask):
    """Mean head discrepancy over the confident samples (0 when none)."""
    n_c = int(mask.sum())
    if n_c == 0:
        z = np.zeros_like(np.asarray(probs1, dtype=np.float64))
        return 0.0, z, z
    loss = float(discrepancy(probs1[mask], probs2[mask]).mean())
    g = discrepancy_grad(probs1, probs2, mask / n_c)
    return loss, g, -g


def dlar_losses(out: NetOutput, pseudo: np.ndarray, mask: np.ndarray) -> DlarLosses:
    l_plal, g_avg = plal_loss(out.probs_avg, pseudo)
    l_ccdl, g1, g2 = ccdl_loss(out.probs1, out.probs2, mask)
    return DlarLosses(l_plal, l_ccdl, 0.5 * g_avg + g1, 0.5 * g_avg + g2)


def pseudo_label_agreement(net: EmotionNet, x: np.ndarray, state: AdaptationState) -> float:
    """Fraction of samples whose prediction equals their nearest-centroid pseudo-label."""
    feats, p1, p2 = evaluate_outputs(net, x)
    return float(np.mean(predict_labels(0.5 * (p1 + p2)) == pseudo_label(feats, state.centroids)))


def dlar_epochs(net: EmotionNet, x: np.ndarray, state: AdaptationState, config: DlarConfig,
                optimizer=None, log=None) -> list[dict]:
    """Run DLAR on normalized target features ``x``; returns one record per epoch."""
    opt = optimizer or optimizer_for(net, config.learning_rate, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        confident, batches, seen = 0, 0, 0
        for idx in iterate_batches(len(x), config.batch_size, rng):
            out = net.forward(x[idx], training=True)
            pseudo = pseudo_label(out.features, state.centroids)
            mask = confident_set(out, state.mean_discrepancy)
            losses = dlar_losses(out, pseudo, mask)
            net.zero_grad()
            net.backward(d_probs1=losses.d_probs1, d_probs2=losses.d_probs2)
            opt.step(_subset(net.gradients(), opt))
            sums += np.array([losses.plal, losses.ccdl, losses.total]) * len(idx)
            seen += len(idx)
            confident += int(mask.sum())
            batches += 1
        rec = {"stage": "dlar", "epoch": epoch + 1, "plal": sums[0] / seen, "ccdl": sums[1] / seen,
               "dlar": sums[2] / seen, "confident_mean": confident / batches}
        history.append(rec)
        if log is not None:
            log(rec)
    return history


# -- LCL --------------------------------------------------------------------

def _knn(points: np.ndarray, k: int) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    d = cdist(p, p, "sqeuclidean")  # same order as Euclidean
    np.fill_diagonal(d, np.inf)
    # stable sort: equal distances keep the lower batch index first
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def neighbor_mask(features: np.ndarray, probs_avg: np.ndarray, k: int) -> np.ndarray:
    """Boolean [n, n] matrix; row ``i`` marks neighbours shared by the feature and softmax kNN sets."""
    n = len(features)
    if n <= k:
        raise ParameterError(f"batch of {n} needs more than k={k} samples")
    rows = np.repeat(np.arange(n), k)
    feat = np.zeros((n, n), dtype=bool)
    cls = np.zeros((n, n), dtype=bool)
    feat[rows, _knn(features, k).ravel()] = True
    cls[rows, _knn(probs_avg, k).ravel()] = True
    return feat & cls


def reliable_neighbors(features: np.ndarray, probs_avg: np.ndarray, k: int) -> list[np.ndarray]:
    """Per sample, the neighbours common to its feature-space and softmax-space kNN sets."""
    return [np.flatnonzero(row) for row in neighbor_mask(features, probs_avg, k)]


def lcl_loss(probs_avg: np.ndarray, neighbors):
    """``-(1/N) sum_i sum_{j in NN_i} log(p_i . p_j)`` with dot products clamped to [1e-12, 1].

    ``neighbors`` is a boolean [n, n] mask or a list of index arrays.
    Returns ``(loss, d_probs_avg)``; selection of neighbours is treated as
    constant.
    """
    p = np.asarray(probs_avg, dtype=np.float64)
    n = p.shape[0]
    mask = _as_mask(neighbors, n)
    dots = p @ p.T
    clamped = np.clip(dots, DOT_FLOOR, 1.0)
    loss = -np.log(clamped)[mask].sum() / n
    live = mask & (dots > DOT_FLOOR) & (dots < 1.0)
    coef = np.where(live, -1.0 / (n * np.where(live, dots, 1.0)), 0.0)
    return float(loss), coef @ p + coef.T @ p


def _as_mask(neighbors, n: int) -> np.ndarray:
    if isinstance(neighbors, np.ndarray) and neighbors.dtype == bool:
        return neighbors
    mask = np.zeros((n, n), dtype=bool)
    for i, nbrs in enumerate(neighbors):
        mask[i, np.asarray(nbrs, dtype=np.int64)] = True
    return mask


def lcl_epochs(net: EmotionNet, x: np.ndarray, config: LclConfig, optimizer=None, log=None) -> list[dict]:
    opt = optimizer or optimizer_for(net, config.learning_rate, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        total, seen, nbr_sizes = 0.0, 0, []
        for idx in iterate_batches(len(x), config.batch_size, rng, min_size=config.k + 1):
            out = net.forward(x[idx], training=True)
            mask = neighbor_mask(out.features, out.probs_avg, config.k)
            loss, g = lcl_loss(out.probs_avg, mask)
            net.zero_grad()
            net.backward(d_probs_avg=g)
            opt.step(_subset(net.gradients(), opt))
            total += loss * len(idx)
            seen += len(idx)
            nbr_sizes.append(mask.sum(axis=1))
        rec = {"stage": "lcl", "epoch": epoch + 1, "lcl": total / seen,
               "neighbors_mean": float(np.concatenate(nbr_sizes).mean())}
        history.append(rec)
        if log is not None:
            log(rec)
    return history


def neighbor_agreement(net: EmotionNet, x: np.ndarray, k: int = 5, batch_size: int = 64) -> float:
    """Mean ``p_i . p_j`` over reliable-neighbour pairs, batches taken in order, evaluation mode."""
    dots = []
    for start in range(0, len(x) - k, batch_size):
        chunk = x[start:start + batch_size]
        if len(chunk) <= k:
            break
        out = net.forward(chunk, training=False)
        p = out.probs_avg
        for i, nb in enumerate(reliable_neighbors(out.features, p, k)):
            dots += (p[nb] @ p[i]).tolist()
    return float(np.mean(dots)) if dots else float("nan")


# -- source-free entry point ------------------------------------------------

LOG_COLUMNS = ("stage", "epoch", "plal", "ccdl", "dlar", "lcl", "confident_mean", "neighbors_mean")


def log_header() -> str:
    return "\t".join(LOG_COLUMNS)


def format_log_record(rec: dict) -> str:
    cells = []
    for col in LOG_COLUMNS:
        v = rec.get(col)
        if v is None:
            cells.append("NA")
        elif isinstance(v, float):
            cells.append(f"{v:.6f}")
        else:
            cells.append(str(v))
    return "\t".join(cells)


def prepare_target(net: EmotionNet, target_features: np.ndarray, recalibrate: bool = True):
    """Normalize the target set, optionally recalibrate batch norm on it, then run the computation stage."""
    target_features = np.asarray(target_features, dtype=np.float64)
    if recalibrate:
        x = apply_normalizer(target_features, fit_normalizer(target_features))
        recalibrate_batchnorm(net, x)
    return computation_stage(net, target_features)


def adapt(checkpoint_path, target_features: np.ndarray, dlar: DlarConfig, lcl: LclConfig, log=None,
          recalibrate: bool = True):
    """Adapt a pretrained checkpoint to unlabeled raw target features.

    The only inputs are the checkpoint path and the target feature matrix;
    source data never enters this function. Returns ``(net, state, history)``.
    """
    net = load_checkpoint(checkpoint_path)
    state, x = prepare_target(net, target_features, recalibrate)
    history = []
    if dlar.epochs:
        history += dlar_epochs(net, x, state, dlar, log=log)
    if lcl.epochs:
        history += lcl_epochs(net, x, lcl, log=log)
    return net, state, history


def _subset(grads: dict, opt) -> dict:
    # the optimizer may own only part of the net (e.g. the extractor)
    return {k: grads[k] for k in opt.params}
