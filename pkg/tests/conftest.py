"""Shared helpers: small float64 nets, kink-free batches, finite differences, tiny pipeline configs."""
from __future__ import annotations

import numpy as np
import pytest

from sfeeg.model import EmotionNet
from sfeeg.nn import ReLU, _offset
from sfeeg.pipeline import PipelineConfig

SMALL = dict(input_dim=12, extractor_dims=(10, 8), classifier_dims=(6, 4))


def small_net(seed=0, dtype=np.float64, **kw) -> EmotionNet:
    return EmotionNet(**{**SMALL, **kw}, seed=seed, dtype=dtype)


def relu_margin(net: EmotionNet, x: np.ndarray) -> float:
    """Smallest |pre-activation| over every ReLU for a training-mode pass of ``x``."""
    margin = np.inf

    def run(seq, h):
        nonlocal margin
        for layer in seq.layers:
            if isinstance(layer, ReLU):
                margin = min(margin, float(np.abs(h).min()))
            h = layer.forward(h, training=True)
        return h

    feats = run(net.extractor, x.astype(net.dtype))
    run(net.head1, feats)
    run(net.head2, feats)
    return margin


def kink_free_batch(net: EmotionNet, rng: np.random.Generator, n=8, margin=1e-3, tries=200) -> np.ndarray:
    """Random batch whose ReLU inputs all stay at least ``margin`` from zero.

    Central differences straddling a ReLU kink measure the kink, not the
    gradient, so such batches are redrawn.
    """
    for _ in range(tries):
        x = rng.uniform(-1, 1, size=(n, net.input_dim))
        if relu_margin(net, x) > margin:
            return x
    raise RuntimeError("no kink-free batch found")


def numeric_gradient(net: EmotionNet, x: np.ndarray, loss_of, h=1e-4) -> np.ndarray:
    """Central differences of ``loss_of(out)`` w.r.t. every entry of ``net.flat_params``."""
    flat = net.flat_params
    num = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_of(net.forward(x, training=True))
        flat[i] = orig - h
        lm = loss_of(net.forward(x, training=True))
        flat[i] = orig
        num[i] = (lp - lm) / (2 * h)
    return num


def analytic_gradient(net: EmotionNet, x: np.ndarray, grads_of) -> np.ndarray:
    """``grads_of(out)`` returns ``(d_probs1, d_probs2)``; returns the flat parameter gradient."""
    out = net.forward(x, training=True)
    d1, d2 = grads_of(out)
    net.zero_grad()
    net.backward(d_probs1=d1, d_probs2=d2)
    return net.flat_grads.astype(np.float64).copy()


def per_tensor_errors(net: EmotionNet, analytic: np.ndarray, numeric: np.ndarray, floor=1e-8) -> dict:
    """Relative error ``|a - n| / max(|a|, |n|)`` per parameter tensor.

    Tensors whose gradient norms are both below ``floor`` (biases feeding a
    batch norm, whose true gradient is zero) report the absolute difference.
    """
    errs = {}
    for name, p in net.parameters().items():
        off = _offset(p, net.flat_params)
        a = analytic[off:off + p.size]
        n = numeric[off:off + p.size]
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        diff = np.linalg.norm(a - n)
        errs[name] = diff / scale if scale > floor else diff
    return errs


def gradient_check(net, x, loss_and_grads, h=1e-4) -> dict:
    """``loss_and_grads(out) -> (loss, d_probs1, d_probs2)``; discrete choices must be fixed by the caller."""
    analytic = analytic_gradient(net, x, lambda out: loss_and_grads(out)[1:])
    numeric = numeric_gradient(net, x, lambda out: loss_and_grads(out)[0], h)
    return per_tensor_errors(net, analytic, numeric)


def tiny_config(tmp_path, **changes) -> PipelineConfig:
    """A pipeline run that finishes in a couple of seconds."""
    base = dict(out_dir=str(tmp_path / "run"), synth_subjects=2, synth_trials_per_subject=2,
                synth_seconds_per_trial=20, epochs_pretrain=3, epochs_dlar=2, epochs_lcl=2)
    base.update(changes)
    return PipelineConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

