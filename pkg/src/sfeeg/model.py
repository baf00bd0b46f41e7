"""Dual-classifier emotion network and its checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (CheckpointFormatError, CheckpointTruncatedError, DimensionError,
                     ShapeError, StateError)
from .nn import Adam, BatchNorm1d, Linear, ReLU, Sequential, flatten_into, softmax, softmax_backward

INPUT_DIM = 160
N_CLASSES = 2
EXTRACTOR_DIMS = (128, 64)
CLASSIFIER_DIMS = (32, 16)

MAGIC = b"SFEM"
VERSION = 1


def dense_stack(dims, rng, dtype, final_linear=False) -> Sequential:
    layers = []
    pairs = list(zip(dims[:-1], dims[1:]))
    for i, (a, b) in enumerate(pairs):
        layers.append(Linear(a, b, rng, dtype))
        if final_linear and i == len(pairs) - 1:
            break
        layers += [BatchNorm1d(b, dtype=dtype), ReLU()]
    return Sequential(layers)


@dataclass
class NetOutput:
    features: np.ndarray
    logits1: np.ndarray
    logits2: np.ndarray
    probs1: np.ndarray
    probs2: np.ndarray

    @property
    def probs_avg(self) -> np.ndarray:
        return 0.5 * (self.probs1 + self.probs2)


class EmotionNet:
    """Feature extractor followed by two parallel classifier heads.

    Extractor: ``input -> 128 -> 64`` (Linear, BatchNorm, ReLU each).
    Heads: ``64 -> 32 -> 16 -> n_classes``; the last layer is linear.
    """

    def __init__(self, input_dim=INPUT_DIM, extractor_dims=EXTRACTOR_DIMS,
                 classifier_dims=CLASSIFIER_DIMS, n_classes=N_CLASSES, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        self.extractor = dense_stack((input_dim, *extractor_dims), rng, dtype)
        head_dims = (extractor_dims[-1], *classifier_dims, n_classes)
        self.head1 = dense_stack(head_dims, rng, dtype, final_linear=True)
        self.head2 = dense_stack(head_dims, rng, dtype, final_linear=True)
        self._cache: NetOutput | None = None
        self._flatten()

    def _flatten(self):
        # parameters and gradients become views of two contiguous buffers
        slots = [(layer, name) for mod in self.modules.values() for layer in mod.layers
                 for name in ("weight", "bias", "gamma", "beta") if hasattr(layer, name)]
        grad_name = {"weight": "grad_weight", "bias": "grad_bias", "gamma": "grad_gamma", "beta": "grad_beta"}
        self.flat_params, pviews = flatten_into([getattr(l, n) for l, n in slots], self.dtype)
        self.flat_grads, gviews = flatten_into([getattr(l, grad_name[n]) for l, n in slots], self.dtype)
        for (layer, name), pv, gv in zip(slots, pviews, gviews):
            setattr(layer, name, pv)
            setattr(layer, grad_name[name], gv)

    @property
    def feature_dim(self) -> int:
        return self.extractor.layers[-3].out_dim

    @property
    def modules(self) -> dict[str, Sequential]:
        return {"extractor": self.extractor, "head1": self.head1, "head2": self.head2}

    def forward(self, x: np.ndarray, training: bool = False) -> NetOutput:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input [B, {self.input_dim}], got {x.shape}")
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        x = x.astype(self.dtype, copy=False)
        feats = self.extractor.forward(x, training)
        z1 = self.head1.forward(feats, training)
        z2 = self.head2.forward(feats, training)
        out = NetOutput(feats, z1, z2, softmax(z1), softmax(z2))
        self._cache = out if training else None
        return out

    def backward(self, d_probs1=None, d_probs2=None, d_probs_avg=None):
        """Accumulate parameter gradients for upstream gradients on the outputs.

        ``d_probs_avg`` is split equally onto both heads. Both heads feed
        the summed feature gradient into a single extractor backward.
        """
        out = self._cache
        if out is None:
            raise StateError("backward requires a preceding training-mode forward")
        zeros = np.zeros_like(out.probs1)
        g1 = zeros if d_probs1 is None else np.asarray(d_probs1, dtype=np.float64)
        g2 = zeros if d_probs2 is None else np.asarray(d_probs2, dtype=np.float64)
        if d_probs_avg is not None:
            g1 = g1 + 0.5 * d_probs_avg
            g2 = g2 + 0.5 * d_probs_avg
        dz1 = softmax_backward(out.probs1, g1).astype(self.dtype)
        dz2 = softmax_backward(out.probs2, g2).astype(self.dtype)
        dfeat = self.head1.backward(dz1) + self.head2.backward(dz2)
        return self.extractor.backward(dfeat.astype(self.dtype))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict_labels(self.forward(x).probs_avg)

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.parameters().items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.gradients().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.buffers().items()}

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def zero_grad(self):
        self.flat_grads[...] = 0

    def copy(self) -> "EmotionNet":
        other = EmotionNet(self.input_dim, self._extractor_dims(), self._classifier_dims(),
                           self.n_classes, dtype=self.dtype)
        other.load_tensors(self.state_tensors())
        return other

    def load_tensors(self, tensors: dict[str, np.ndarray]):
        own = self.state_tensors()
        for name, arr in own.items():
            if name not in tensors:
                raise CheckpointFormatError(f"missing tensor {name}")
            if tensors[name].shape != arr.shape:
                raise DimensionError(f"tensor {name} has shape {tensors[name].shape}, expected {arr.shape}")
        # in-place so optimizer references stay valid; batch norm rebinds its
        # running buffers each step, so those go through the layer objects
        for m, mod in self.modules.items():
            for i, layer in enumerate(mod.layers):
                for attr in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
                    key = f"{m}.{i}.{attr}"
                    if key in tensors:
                        getattr(layer, attr)[...] = tensors[key]

    def _extractor_dims(self):
        return tuple(l.out_dim for l in self.extractor.layers if isinstance(l, Linear))

    def _classifier_dims(self):
        return tuple(l.out_dim for l in self.head1.layers if isinstance(l, Linear))[:-1]


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; ``np.argmax`` returns the first maximum, so ties go to class 0."""
    return np.argmax(probs, axis=1)


def optimizer_for(net: EmotionNet, lr=1e-4, weight_decay=5e-4) -> Adam:
    return Adam(net.parameters(), lr=lr, weight_decay=weight_decay,
                flat_params=net.flat_params, flat_grads=net.flat_grads)


# -- checkpoint I/O ---------------------------------------------------------

def _write_tensor(fh, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(net: EmotionNet, path, optimizer: Adam | None = None):
    """Write parameters, running statistics and optional Adam state.

    Layout (little endian): ``b"SFEM"``, u32 version, u32 tensor count,
    then per tensor u32 name length, name bytes, u32 rank, u32 dims,
    float32 payload.
    """
    tensors = dict(net.state_tensors())
    if optimizer is not None:
        for k, v in optimizer.state_dict().items():
            tensors[f"adam.{k}"] = v
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, arr)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count != 1 else vals[0]


def read_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not an SFEM checkpoint")
    version, count = r.u32(2)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank != 1 else (r.u32(),)
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return tensors


def load_checkpoint(path, feature_dim: int | None = None, with_optimizer=False,
                    lr=1e-4, weight_decay=5e-4):
    """Rebuild an :class:`EmotionNet` (and optionally its Adam state) from ``path``.

    Layer widths are recovered from the stored weight shapes. When
    ``feature_dim`` is given the extractor output width must match it.
    """
    tensors = read_checkpoint_tensors(path)
    try:
        ext = _linear_shapes(tensors, "extractor")
        head = _linear_shapes(tensors, "head1")
    except KeyError as exc:
        raise CheckpointFormatError(f"missing tensor {exc}") from None
    input_dim = ext[0][1]
    ext_dims = tuple(s[0] for s in ext)
    cls_dims = tuple(s[0] for s in head)
    if feature_dim is not None and ext_dims[-1] != feature_dim:
        raise DimensionError(f"checkpoint feature dim {ext_dims[-1]} != expected {feature_dim}")
    net = EmotionNet(input_dim, ext_dims, cls_dims[:-1], cls_dims[-1])
    net.load_tensors(tensors)
    if not with_optimizer:
        return net
    opt = optimizer_for(net, lr, weight_decay)
    if "adam.step" in tensors:
        opt.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("adam.")})
    return net, opt


def _linear_shapes(tensors, prefix):
    shapes = []
    i = 0
    while True:
        # blocks are Linear, BatchNorm, ReLU; the head ends with a bare Linear
        key = f"{prefix}.{i}.weight"
        if key not in tensors:
            break
        shapes.append(tensors[key].shape)
        i += 3
    if not shapes:
        raise KeyError(f"{prefix}.0.weight")
    return shapes
