"""Supervised source training: worst-group weighted cross-entropy plus head discrepancy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .model import EmotionNet, NetOutput, optimizer_for

LOG_FLOOR = 1e-12


@dataclass
class PretrainConfig:
    alpha: float = 0.5
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    patience: int = 10
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")


def class_weights(labels, n_classes: int = 2) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * count_k)`` rescaled to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        raise ParameterError(f"every class must be present; counts={counts.tolist()}")
    w = counts.sum() / (n_classes * counts)
    return w / w.mean()


def discrepancy(probs1: np.ndarray, probs2: np.ndarray) -> np.ndarray:
    """Per-sample Euclidean distance between the two heads' probability vectors."""
    return np.linalg.norm(np.asarray(probs1, np.float64) - np.asarray(probs2, np.float64), axis=1)


def discrepancy_grad(probs1, probs2, scale):
    """Gradient of ``sum(scale * ||p1 - p2||)`` w.r.t. ``p1`` (``p2`` gets the negative).

    Samples with zero distance get the zero subgradient.
    """
    diff = np.asarray(probs1, np.float64) - np.asarray(probs2, np.float64)
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    unit = np.divide(diff, dist, out=np.zeros_like(diff), where=dist > 0)
    return np.asarray(scale, dtype=np.float64).reshape(-1, 1) * unit


def discrepancy_loss(out: NetOutput):
    """Mean head discrepancy and its gradients ``(loss, d_probs1, d_probs2)``."""
    n = out.probs1.shape[0]
    loss = float(discrepancy(out.probs1, out.probs2).mean())
    g = discrepancy_grad(out.probs1, out.probs2, np.full(n, 1.0 / n))
    return loss, g, -g


def group_dro_ce(out: NetOutput, labels, weights):
    """Worst-group weighted cross-entropy on the averaged prediction.

    Groups are classes. Each group's loss is the mean of
    ``-w[y] * log(p_avg[y])`` over its samples; the loss is the max over
    groups present in the batch (first group wins a tie). Returns
    ``(loss, d_probs_avg, group_losses)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise ParameterError("empty batch")
    p = out.probs_avg
    py = p[np.arange(n), labels]
    clipped = np.maximum(py, LOG_FLOOR)
    per_sample = -np.asarray(weights)[labels] * np.log(clipped)
    groups = {}
    for g in np.unique(labels):
        groups[int(g)] = float(per_sample[labels == g].mean())
    worst = max(groups, key=lambda g: (groups[g], -g))
    mask = labels == worst
    grad = np.zeros_like(p)
    live = mask & (py > LOG_FLOOR)
    grad[np.flatnonzero(live), worst] = -np.asarray(weights)[worst] / (mask.sum() * py[live])
    return groups[worst], grad, groups


def pretrain_loss(out: NetOutput, labels, weights, alpha: float):
    """Total ``L_cls + alpha * L_dis`` with gradients w.r.t. both heads' probabilities."""
    l_cls, g_avg, _ = group_dro_ce(out, labels, weights)
    l_dis, g1, g2 = discrepancy_loss(out)
    return l_cls + alpha * l_dis, 0.5 * g_avg + alpha * g1, 0.5 * g_avg + alpha * g2


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 2):
    """Shuffled index batches; a final batch smaller than ``min_size`` is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def pretrain_epochs(net: EmotionNet, x: np.ndarray, y: np.ndarray, config: PretrainConfig, optimizer=None,
                    log=None) -> list[float]:
    """Train ``net`` in place on normalized source features; returns per-epoch mean loss."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    weights = class_weights(y, net.n_classes)
    opt = optimizer or optimizer_for(net, config.learning_rate, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    best = np.inf
    stale = 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in iterate_batches(len(x), config.batch_size, rng):
            out = net.forward(x[idx], training=True)
            loss, g1, g2 = pretrain_loss(out, y[idx], weights, config.alpha)
            net.zero_grad()
            net.backward(d_probs1=g1, d_probs2=g2)
            opt.step(net.gradients())
            total += loss * len(idx)
            count += len(idx)
        mean = total / count
        history.append(mean)
        if log is not None:
            log(f"pretrain\t{epoch + 1}\t{mean:.6f}")
        if best - mean < config.min_delta:
            stale += 1
            if stale >= config.patience:
                break
        else:
            stale = 0
        best = min(best, mean)
    return history
