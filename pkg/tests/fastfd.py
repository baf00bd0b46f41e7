"""Central differences over every parameter of a full-size net, vectorized.

Perturbing one entry of layer L leaves everything upstream of L untouched
and changes L's output by a rank-one term, so all perturbations of a tensor
are stacked along a leading axis and only the downstream layers are rerun.
The downstream forward below restates the training-mode layer rules in
plain numpy; ``replica_error`` checks it against the package forward.
"""
from __future__ import annotations

import numpy as np

from sfeeg.model import NetOutput
from sfeeg.nn import BatchNorm1d, Linear, ReLU, _offset

CHUNK = 2048


def _apply(layer, h):
    if isinstance(layer, Linear):
        return h @ layer.weight.T + layer.bias
    if isinstance(layer, BatchNorm1d):
        mean = h.mean(axis=-2, keepdims=True)
        var = h.var(axis=-2, keepdims=True)
        return layer.gamma * ((h - mean) / np.sqrt(var + layer.eps)) + layer.beta
    if isinstance(layer, ReLU):
        return h * (h > 0)
    raise TypeError(type(layer))


def _run(layers, h, start=0):
    for layer in layers[start:]:
        h = _apply(layer, h)
    return h


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _inputs(layers, x):
    """Input to every layer plus the final output, unbatched."""
    acts = [x]
    for layer in layers:
        acts.append(_apply(layer, acts[-1]))
    return acts


def replica_forward(net, x):
    feats = _run(net.extractor.layers, x)
    z1, z2 = _run(net.head1.layers, feats), _run(net.head2.layers, feats)
    return NetOutput(feats, z1, z2, _softmax(z1), _softmax(z2))


def replica_error(net, x, rng, n_checks=20, h=1e-4) -> float:
    """Largest gap between the replica and ``net.forward`` at the base point and random perturbations."""
    worst = 0.0
    flat = net.flat_params
    for idx in [None, *rng.choice(flat.size, n_checks, replace=False).tolist()]:
        if idx is not None:
            flat[idx] += h
        a, b = net.forward(x, training=True), replica_forward(net, x)
        for name in ("features", "logits1", "logits2", "probs1", "probs2"):
            worst = max(worst, float(np.abs(getattr(a, name) - getattr(b, name)).max()))
        if idx is not None:
            flat[idx] -= h
    return worst


def _perturbed_outputs(layer, attr, layer_in, layer_out, sign_h, sel):
    """Stacked outputs of ``layer`` for perturbations ``sel`` (flat indices into ``attr``)."""
    out = np.repeat(layer_out[None], len(sel), axis=0)
    rows = np.arange(len(sel))
    if attr == "weight":
        o, i = np.unravel_index(sel, layer.weight.shape)
        out[rows, :, o] += sign_h * layer_in[:, i].T
    elif attr in ("bias", "beta"):
        out[rows, :, sel] += sign_h
    elif attr == "gamma":
        mean = layer_in.mean(axis=0)
        xhat = (layer_in - mean) / np.sqrt(layer_in.var(axis=0) + layer.eps)
        out[rows, :, sel] += sign_h * xhat[:, sel].T
    return out


def numeric_gradients(net, x, losses: dict, h=1e-4) -> dict:
    """Flat central-difference gradients of each ``losses[name](out) -> float``."""
    x = np.asarray(x, dtype=np.float64)
    ext = _inputs(net.extractor.layers, x)
    feats = ext[-1]
    heads = {"head1": _inputs(net.head1.layers, feats), "head2": _inputs(net.head2.layers, feats)}
    base_z = {k: v[-1] for k, v in heads.items()}
    grads = {name: np.zeros(net.flat_params.size) for name in losses}
    modules = {"extractor": (net.extractor.layers, ext), "head1": (net.head1.layers, heads["head1"]),
               "head2": (net.head2.layers, heads["head2"])}
    for mod, (layers, acts) in modules.items():
        for li, layer in enumerate(layers):
            for attr in ("weight", "bias", "gamma", "beta"):
                if not hasattr(layer, attr):
                    continue
                param = getattr(layer, attr)
                off = _offset(param, net.flat_params)
                for start in range(0, param.size, CHUNK):
                    sel = np.arange(start, min(start + CHUNK, param.size))
                    vals = {name: [] for name in losses}
                    for sign in (1.0, -1.0):
                        y = _perturbed_outputs(layer, attr, acts[li], acts[li + 1], sign * h, sel)
                        y = _run(layers, y, li + 1)
                        if mod == "extractor":
                            f = y
                            z1, z2 = _run(net.head1.layers, f), _run(net.head2.layers, f)
                        else:
                            f = np.broadcast_to(feats, (len(sel), *feats.shape))
                            z1 = y if mod == "head1" else np.broadcast_to(base_z["head1"], y.shape)
                            z2 = y if mod == "head2" else np.broadcast_to(base_z["head2"], y.shape)
                        p1, p2 = _softmax(z1), _softmax(z2)
                        for name, fn in losses.items():
                            vals[name].append(np.array([fn(NetOutput(f[k], z1[k], z2[k], p1[k], p2[k]))
                                                        for k in range(len(sel))]))
                    for name in losses:
                        plus, minus = vals[name]
                        grads[name][off + sel] = (plus - minus) / (2 * h)
    return grads
