"""DLRM-lite: bottom MLP over dense features, dot-product interaction with
pooled embeddings, top MLP with a sigmoid head.

Dense (replicated) parameters live in one flat float64 vector so that sync
kernels can treat a replica as a single array. Layer weights are views into
that vector, so in-place optimizer updates are visible to every reader of
the same ``DenseParams`` (the Hogwild setting).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    """Raised when an input tensor does not match the architecture."""


@dataclass(frozen=True)
class ModelArch:
    num_tables: int = 4
    embedding_dim: int = 8
    rows_per_table: int = 1000
    dense_in_dim: int = 8
    bottom_mlp_dims: tuple[int, ...] = (16, 8)
    top_mlp_dims: tuple[int, ...] = (32, 16, 1)

    def __post_init__(self):
        object.__setattr__(self, "bottom_mlp_dims", tuple(self.bottom_mlp_dims))
        object.__setattr__(self, "top_mlp_dims", tuple(self.top_mlp_dims))
        counts = (self.num_tables, self.embedding_dim, self.rows_per_table, self.dense_in_dim)
        if min(counts) < 1:
            raise ValueError(f"all counts must be >= 1, got {counts}")
        if not self.bottom_mlp_dims or not self.top_mlp_dims:
            raise ValueError("both MLPs need at least one layer")
        if min(self.bottom_mlp_dims + self.top_mlp_dims) < 1:
            raise ValueError("layer widths must be >= 1")
        if self.bottom_mlp_dims[-1] != self.embedding_dim:
            raise ValueError(
                f"bottom MLP output width {self.bottom_mlp_dims[-1]} "
                f"!= embedding_dim {self.embedding_dim}"
            )
        if self.top_mlp_dims[-1] != 1:
            raise ValueError("top MLP must end in width 1")

    @property
    def num_interactions(self) -> int:
        return comb(self.num_tables + 1, 2)

    @property
    def top_in_dim(self) -> int:
        return self.embedding_dim + self.num_interactions

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every layer, bottom MLP first."""
        shapes = []
        fan_in = self.dense_in_dim
        for i, width in enumerate(self.bottom_mlp_dims):
            shapes.append((f"bottom{i}", fan_in, width))
            fan_in = width
        fan_in = self.top_in_dim
        for i, width in enumerate(self.top_mlp_dims):
            shapes.append((f"top{i}", fan_in, width))
            fan_in = width
        return shapes


@dataclass(frozen=True)
class LayerSlot:
    name: str
    fan_in: int
    fan_out: int
    w_offset: int
    b_offset: int

    @property
    def w_size(self) -> int:
        return self.fan_in * self.fan_out


class Layout:
    """Offset table mapping (layer, row, col) to flat indices.

    Each layer stores its weight matrix row-major as ``[fan_in, fan_out]``
    followed by its bias ``[fan_out]``.
    """

    def __init__(self, arch: ModelArch):
        self.arch = arch
        self.slots: list[LayerSlot] = []
        offset = 0
        for name, fan_in, fan_out in arch.layer_shapes():
            slot = LayerSlot(name, fan_in, fan_out, offset, offset + fan_in * fan_out)
            self.slots.append(slot)
            offset = slot.b_offset + fan_out
        self.size = offset
        self.num_bottom = len(arch.bottom_mlp_dims)

    def weight_index(self, layer: int, row: int, col: int) -> int:
        slot = self.slots[layer]
        if not (0 <= row < slot.fan_in and 0 <= col < slot.fan_out):
            raise IndexError((layer, row, col))
        return slot.w_offset + row * slot.fan_out + col

    def bias_index(self, layer: int, col: int) -> int:
        slot = self.slots[layer]
        if not 0 <= col < slot.fan_out:
            raise IndexError((layer, col))
        return slot.b_offset + col

    def unflatten(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views into ``flat`` (no copies)."""
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, layout needs ({self.size},)")
        out = []
        for s in self.slots:
            w = flat[s.w_offset:s.b_offset].reshape(s.fan_in, s.fan_out)
            b = flat[s.b_offset:s.b_offset + s.fan_out]
            out.append((w, b))
        return out

    def flatten(self, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        flat = np.empty(self.size)
        for s, (w, b) in zip(self.slots, layers, strict=True):
            flat[s.w_offset:s.b_offset] = np.asarray(w).reshape(-1)
            flat[s.b_offset:s.b_offset + s.fan_out] = b
        return flat


@dataclass
class DenseParams:
    arch: ModelArch
    values: np.ndarray
    adagrad_acc: np.ndarray
    layout: Layout = field(repr=False, default=None)

    def __post_init__(self):
        if self.layout is None:
            self.layout = Layout(self.arch)
        if self.values.shape != (self.layout.size,) or self.adagrad_acc.shape != self.values.shape:
            raise ShapeError(
                f"values {self.values.shape} / adagrad_acc {self.adagrad_acc.shape} "
                f"do not match layout size {self.layout.size}"
            )
        self._layers = self.layout.unflatten(self.values)

    @classmethod
    def zeros(cls, arch: ModelArch) -> "DenseParams":
        layout = Layout(arch)
        return cls(arch, np.zeros(layout.size), np.zeros(layout.size), layout)

    @classmethod
    def init(cls, arch: ModelArch, seed: int) -> "DenseParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, weights and biases."""
        rng = np.random.default_rng(seed)
        params = cls.zeros(arch)
        for slot, (w, b) in zip(params.layout.slots, params.layers):
            bound = 1.0 / np.sqrt(slot.fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return params

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._layers

    @property
    def nbytes(self) -> int:
        return self.values.nbytes

    def copy(self) -> "DenseParams":
        return DenseParams(self.arch, self.values.copy(), self.adagrad_acc.copy(), self.layout)


@dataclass
class DenseGrads:
    values: np.ndarray


@dataclass
class ForwardCache:
    dense_x: np.ndarray
    pooled: np.ndarray              # [T, B, D]
    bottom_acts: list[np.ndarray]   # input to each bottom layer, then bottom output
    features: np.ndarray            # [B, T+1, D] stacked (bottom output, pooled tables)
    top_acts: list[np.ndarray]      # input to each top layer
    logits: np.ndarray
    probs: np.ndarray               # unclamped sigmoid


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # numerically stable for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _check_inputs(pooled, dense_x, arch: ModelArch):
    if dense_x.ndim != 2 or dense_x.shape[1] != arch.dense_in_dim:
        raise ShapeError(f"dense_x has shape {dense_x.shape}, expected [batch, {arch.dense_in_dim}]")
    expected = (arch.num_tables, dense_x.shape[0], arch.embedding_dim)
    if pooled.shape != expected:
        raise ShapeError(f"pooled has shape {pooled.shape}, expected {expected}")


def forward_cached(params: DenseParams, pooled, dense_x, arch: ModelArch | None = None):
    """Forward pass returning ``(clamped probs, cache)`` for :func:`backward`."""
    arch = arch or params.arch
    pooled = np.asarray(pooled, dtype=np.float64)
    dense_x = np.asarray(dense_x, dtype=np.float64)
    _check_inputs(pooled, dense_x, arch)
    layers = params.layers
    nb = len(arch.bottom_mlp_dims)

    h = dense_x
    bottom_acts = [h]
    for w, b in layers[:nb]:
        h = np.maximum(h @ w + b, 0.0)
        bottom_acts.append(h)

    # features[:, 0] is the bottom output, features[:, 1:] the pooled tables
    features = np.concatenate([h[:, None, :], pooled.transpose(1, 0, 2)], axis=1)
    gram = features @ features.transpose(0, 2, 1)
    iu, ju = np.triu_indices(arch.num_tables + 1, k=1)
    h = np.concatenate([bottom_acts[-1], gram[:, iu, ju]], axis=1)

    top_acts = []
    top = layers[nb:]
    for i, (w, b) in enumerate(top):
        top_acts.append(h)
        h = h @ w + b
        if i < len(top) - 1:
            h = np.maximum(h, 0.0)
    logits = h[:, 0]
    probs = _sigmoid(logits)
    cache = ForwardCache(dense_x, pooled, bottom_acts, features, top_acts, logits, probs)
    return clamp_probs(probs), cache


def forward(params: DenseParams, pooled, dense_x, arch: ModelArch | None = None) -> np.ndarray:
    """Click probabilities, clamped to ``[1e-7, 1 - 1e-7]``."""
    return forward_cached(params, pooled, dense_x, arch)[0]


def backward(params: DenseParams, cache: ForwardCache, labels) -> tuple[DenseGrads, np.ndarray]:
    """Gradients of the mean log-loss.

    Returns the dense gradient (aligned to the params layout) and the
    gradient w.r.t. each pooled embedding, shaped ``[T, B, D]``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = cache.logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels has shape {labels.shape}, cache holds {n} examples")
    arch = params.arch
    layout = params.layout
    layers = params.layers
    nb = len(arch.bottom_mlp_dims)
    grad = np.zeros(layout.size)
    glayers = layout.unflatten(grad)

    d = ((cache.probs - labels) / n)[:, None]
    top = layers[nb:]
    for i in range(len(top) - 1, -1, -1):
        w, _ = top[i]
        gw, gb = glayers[nb + i]
        x = cache.top_acts[i]
        gw[...] = x.T @ d
        gb[...] = d.sum(axis=0)
        d = d @ w.T
        if i > 0:
            d = d * (x > 0)

    D = arch.embedding_dim
    d_bottom = d[:, :D].copy()
    d_dots = d[:, D:]
    iu, ju = np.triu_indices(arch.num_tables + 1, k=1)
    d_gram = np.zeros((n, arch.num_tables + 1, arch.num_tables + 1))
    d_gram[:, iu, ju] = d_dots
    d_gram = d_gram + d_gram.transpose(0, 2, 1)
    d_features = d_gram @ cache.features
    d_bottom += d_features[:, 0]
    d_pooled = d_features[:, 1:].transpose(1, 0, 2).copy()

    d = d_bottom * (cache.bottom_acts[-1] > 0)
    for i in range(nb - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = glayers[i]
        x = cache.bottom_acts[i]
        gw[...] = x.T @ d
        gb[...] = d.sum(axis=0)
        if i > 0:
            d = (d @ w.T) * (x > 0)
    return DenseGrads(grad), d_pooled


def logistic_loss(pred, labels) -> float:
    """Mean binary cross entropy of clamped predictions."""
    p = clamp_probs(np.asarray(pred, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"pred {p.shape} vs labels {y.shape}")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def adagrad_delta(g: np.ndarray, acc: np.ndarray, lr: float, eps: float) -> np.ndarray:
    """``lr * g / sqrt(acc + eps)``; 0 where the denominator is 0 (possible only with eps = 0)."""
    num = lr * g
    denom = np.sqrt(acc + eps)
    if eps > 0:
        return num / denom
    return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


def adagrad_step(params: DenseParams, grads: DenseGrads, lr: float, eps: float = 1e-8) -> None:
    """In-place Adagrad; no locking, concurrent callers race per element."""
    g = grads.values
    acc = params.adagrad_acc
    acc += g * g
    params.values -= adagrad_delta(g, acc, lr, eps)


def sgd_step(params: DenseParams, grads: DenseGrads, lr: float, eps: float = 0.0) -> None:
    params.values -= lr * grads.values


OPTIMIZERS = {"adagrad": adagrad_step, "sgd": sgd_step}
