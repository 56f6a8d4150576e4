"""Toy LoRA-adapted classifier with manual backpropagation.

Layer ``l`` holds a frozen ``W`` of shape ``(dim_l, dim_{l-1})`` and an
adapter, so a row batch ``h`` maps to ``h @ (W + B A).T``. ``tanh`` follows
every layer but the last; the last layer's output is the pre-logit feature
vector fed to the linear head.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ShapeError
from .lora import LoraAdapter, delta, init_adapter
from .seeding import derive_seed, make_rng

SNAPSHOT_MAGIC = b"LVAR"
SNAPSHOT_VERSION = 1


@dataclass
class ToyBackbone:
    frozen_weights: list[np.ndarray]
    adapters: list[LoraAdapter]

    def __post_init__(self):
        if len(self.frozen_weights) != len(self.adapters):
            raise ShapeError("need one adapter per layer",
                             (len(self.frozen_weights),), (len(self.adapters),))
        for l, (w, ad) in enumerate(zip(self.frozen_weights, self.adapters)):
            if ad.shape != w.shape:
                raise ShapeError(f"adapter shape mismatch at layer {l + 1}", ad.shape, w.shape)
            if l and w.shape[1] != self.frozen_weights[l - 1].shape[0]:
                raise ShapeError(f"layer {l + 1} not conformable",
                                 self.frozen_weights[l - 1].shape, w.shape)

    @property
    def num_layers(self) -> int:
        return len(self.frozen_weights)

    @property
    def dims(self) -> list[int]:
        return [self.frozen_weights[0].shape[1]] + [w.shape[0] for w in self.frozen_weights]

    def effective_weights(self) -> list[np.ndarray]:
        return [w + delta(ad) for w, ad in zip(self.frozen_weights, self.adapters)]

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for w in self.frozen_weights:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


@dataclass
class ClassifierHead:
    weights: np.ndarray  # C x feature_dim
    bias: np.ndarray  # C

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[0] < 2:
            raise ShapeError("head needs at least two classes", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal class count",
                             self.bias.shape, self.weights.shape)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.bias.copy())


@dataclass
class ClassVarianceStats:
    sigma: np.ndarray
    correct_counts: np.ndarray


@dataclass
class Grads:
    a: list[np.ndarray]
    b: list[np.ndarray]
    head: np.ndarray
    bias: np.ndarray


def init_frozen_weights(dims: list[int], seed: int) -> list[np.ndarray]:
    """Random stand-in for pre-trained weights, ``N(0, 1/fan_in)`` entries."""
    rng = make_rng(seed)
    return [rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
            for d_in, d_out in zip(dims[:-1], dims[1:])]


def fresh_adapters(frozen_weights: list[np.ndarray], rank: int, seed: int) -> list[LoraAdapter]:
    return [init_adapter(w.shape[0], w.shape[1], rank, derive_seed(seed, l))
            for l, w in enumerate(frozen_weights)]


def zero_head(num_classes: int, feature_dim: int) -> ClassifierHead:
    return ClassifierHead(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))


def _forward_cache(backbone: ToyBackbone, head: ClassifierHead, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != backbone.dims[0]:
        raise ShapeError("input width does not match backbone", x.shape, (backbone.dims[0],))
    if head.weights.shape[1] != backbone.dims[-1]:
        raise ShapeError("head width does not match features",
                         head.weights.shape, (backbone.dims[-1],))
    eff = backbone.effective_weights()
    acts = [x]
    h = x
    for l, w in enumerate(eff):
        z = h @ w.T
        h = np.tanh(z) if l < len(eff) - 1 else z
        acts.append(h)
    logits = h @ head.weights.T + head.bias
    return eff, acts, logits


def forward(backbone: ToyBackbone, head: ClassifierHead, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for a row batch."""
    _, acts, logits = _forward_cache(backbone, head, x)
    return acts[-1], logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grads(backbone: ToyBackbone, head: ClassifierHead, x, labels) -> tuple[float, Grads]:
    """Mean softmax cross-entropy and its gradients w.r.t. adapters and head."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-D array")
    C = head.num_classes
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    eff, acts, logits = _forward_cache(backbone, head, x)
    n = labels.size
    if acts[0].shape[0] != n:
        raise ShapeError("batch/labels length mismatch", acts[0].shape, labels.shape)

    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())

    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    features = acts[-1]
    g_head = dlogits.T @ features
    g_bias = dlogits.sum(axis=0)

    L = len(eff)
    g_a: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    g_b: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    dz = dlogits @ head.weights
    for l in range(L - 1, -1, -1):
        if l < L - 1:
            dz = dz * (1.0 - acts[l + 1] ** 2)
        g_w = dz.T @ acts[l]
        ad = backbone.adapters[l]
        g_b[l] = g_w @ ad.a.T
        g_a[l] = ad.b.T @ g_w
        if l:
            dz = dz @ eff[l]
    return loss, Grads(a=g_a, b=g_b, head=g_head, bias=g_bias)


def mean_loss(backbone: ToyBackbone, head: ClassifierHead, x, labels) -> float:
    _, logits = forward(backbone, head, x)
    logp = _log_softmax(logits)
    labels = np.asarray(labels)
    return float(-logp[np.arange(labels.size), labels].mean())


def accuracy(backbone: ToyBackbone, head: ClassifierHead, x, labels) -> float:
    _, logits = forward(backbone, head, x)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def class_variances(backbone: ToyBackbone, head: ClassifierHead, x, labels) -> ClassVarianceStats:
    """Mean per-dimension feature variance over correctly classified samples.

    Population variance per feature dimension, averaged over dimensions.
    Classes with fewer than two correct samples get ``sigma = 0``.
    """
    labels = np.asarray(labels)
    features, logits = forward(backbone, head, x)
    pred = np.argmax(logits, axis=1)
    C = head.num_classes
    sigma = np.zeros(C)
    counts = np.zeros(C, dtype=np.int64)
    for c in range(C):
        rows = features[(labels == c) & (pred == c)]
        counts[c] = rows.shape[0]
        if rows.shape[0] >= 2:
            sigma[c] = float(rows.var(axis=0).mean())
    return ClassVarianceStats(sigma=sigma, correct_counts=counts)


# -- snapshot I/O -----------------------------------------------------------

def _write_matrix(fh: BinaryIO, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    fh.write(struct.pack("<II", *m.shape))
    fh.write(m.tobytes(order="C"))


def _read_matrix(fh: BinaryIO) -> np.ndarray:
    rows, cols = struct.unpack("<II", fh.read(8))
    payload = fh.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise ValueError("truncated snapshot")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_snapshot(path: str | Path, backbone: ToyBackbone, head: ClassifierHead) -> None:
    """Little-endian binary: header, then W, A, B per layer, head, bias."""
    dims = backbone.dims
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<III", SNAPSHOT_VERSION, backbone.num_layers, head.num_classes))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w, ad in zip(backbone.frozen_weights, backbone.adapters):
            _write_matrix(fh, w)
            _write_matrix(fh, ad.a)
            _write_matrix(fh, ad.b)
        _write_matrix(fh, head.weights)
        _write_matrix(fh, head.bias.reshape(1, -1))


def load_snapshot(path: str | Path) -> tuple[ToyBackbone, ClassifierHead]:
    with open(path, "rb") as fh:
        if fh.read(4) != SNAPSHOT_MAGIC:
            raise ValueError("not a model snapshot (bad magic)")
        version, L, C = struct.unpack("<III", fh.read(12))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        dims = list(struct.unpack(f"<{L + 1}I", fh.read(4 * (L + 1))))
        weights, adapters = [], []
        for _ in range(L):
            w = _read_matrix(fh)
            a = _read_matrix(fh)
            b = _read_matrix(fh)
            weights.append(w)
            adapters.append(LoraAdapter(a=a, b=b))
        head_w = _read_matrix(fh)
        bias = _read_matrix(fh).ravel()
    backbone = ToyBackbone(weights, adapters)
    if backbone.dims != dims or head_w.shape[0] != C:
        raise ValueError("snapshot header disagrees with payload")
    return backbone, ClassifierHead(head_w, bias)
