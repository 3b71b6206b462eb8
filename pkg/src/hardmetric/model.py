"""Minimal set-pooling sequence embedder with hand-written reverse mode.

Per frame ``h_t = tanh(x_t @ frame_weights + frame_bias)``, max-pool over
frames, ``raw = pooled @ head_weights + head_bias``, then L2-normalize.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericError, UsageError

NORM_EPS = 1e-12


class Condition(str, enum.Enum):
    BASE = "Base"
    OCCL = "Occl"
    DEFORM = "Deform"


@dataclass(eq=False)
class FeatureSequence:
    """One labeled sample: ``frames`` has shape (n_frames, d_in)."""

    id: int
    view_deg: int
    condition: Condition
    frames: np.ndarray
    seq: int = 0

    def __post_init__(self):
        self.condition = Condition(self.condition)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"frames must be a non-empty 2-D array, got shape {self.frames.shape}")

    @property
    def key(self):
        return (self.id, self.view_deg, self.condition.value, self.seq)

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return self.key == other.key and np.array_equal(self.frames, other.frames)


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 16
    d_hid: int = 64
    n_dim: int = 32

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigurationError(f"model dimension {f.name} must be an integer >= 1, got {v!r}")
        return self


@dataclass
class ModelParams:
    frame_weights: np.ndarray  # (d_in, d_hid)
    frame_bias: np.ndarray  # (d_hid,)
    head_weights: np.ndarray  # (d_hid, n_dim)
    head_bias: np.ndarray  # (n_dim,)

    NAMES = ("frame_weights", "frame_bias", "head_weights", "head_bias")

    @property
    def dims(self):
        d_in, d_hid = self.frame_weights.shape
        return ModelDims(d_in, d_hid, self.head_weights.shape[1])

    def arrays(self):
        return {name: getattr(self, name) for name in self.NAMES}

    def copy(self):
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros_like(cls, other):
        return cls(**{k: np.zeros_like(v) for k, v in other.arrays().items()})

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


@dataclass(eq=False)
class EmbeddingMatrix:
    rows: np.ndarray  # (batch, n_dim)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise UsageError(f"embedding rows must be 2-D, got shape {self.rows.shape}")
        if self.labels.size and self.labels.shape != self.rows.shape[:1]:
            raise UsageError(f"{self.rows.shape[0]} rows but {self.labels.size} labels")


# a loss callable maps an EmbeddingMatrix to (value, d value / d rows)
LossFn = Callable[[EmbeddingMatrix], "tuple[float, np.ndarray]"]


def init_params(dims, seed):
    """Glorot-uniform weights, zero biases. Deterministic in ``seed``."""
    dims = dims.validate()
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    frame_weights = glorot(dims.d_in, dims.d_hid)
    head_weights = glorot(dims.d_hid, dims.n_dim)
    return ModelParams(
        frame_weights=frame_weights,
        frame_bias=np.zeros(dims.d_hid),
        head_weights=head_weights,
        head_bias=np.zeros(dims.n_dim),
    )


def _stack(batch, d_in):
    if len(batch) == 0:
        raise UsageError("forward called with an empty batch")
    lengths = [s.frames.shape[0] for s in batch]
    n_t = max(lengths)
    x = np.zeros((len(batch), n_t, d_in))
    mask = np.zeros((len(batch), n_t), dtype=bool)
    for b, s in enumerate(batch):
        if s.frames.shape[1] != d_in:
            raise DataError(f"sequence {s.key} has frame width {s.frames.shape[1]}, model expects {d_in}")
        x[b, : lengths[b]] = s.frames
        mask[b, : lengths[b]] = True
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite values in input frames")
    return x, mask


def _affine(x, weights, bias):
    # Accumulate over the input axis one column at a time: each output row
    # depends only on its own input row, with a fixed summation order, so
    # results are bitwise invariant to batch and frame permutations.
    out = np.broadcast_to(bias, x.shape[:-1] + bias.shape).copy()
    for k in range(weights.shape[0]):
        out += x[..., k, None] * weights[k]
    return out


def _forward(params, x, mask):
    h = np.tanh(_affine(x, params.frame_weights, params.frame_bias))
    masked = np.where(mask[..., None], h, -np.inf)
    # argmax returns the first maximal index: ties go to the lowest frame
    idx = np.argmax(masked, axis=1)
    pooled = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :]
    raw = _affine(pooled, params.head_weights, params.head_bias)
    norm = np.sqrt(np.sum(raw * raw, axis=1))
    denom = np.maximum(norm, NORM_EPS)
    rows = raw / denom[:, None]
    cache = dict(x=x, h=h, idx=idx, pooled=pooled, norm=norm, denom=denom, rows=rows)
    return rows, cache


def _backward(params, cache, grad_rows):
    rows, norm, denom = cache["rows"], cache["norm"], cache["denom"]
    big = norm > NORM_EPS
    radial = np.sum(rows * grad_rows, axis=1, keepdims=True)
    g_raw = np.where(big[:, None], grad_rows - rows * radial, grad_rows) / denom[:, None]

    grads = ModelParams.zeros_like(params)
    grads.head_weights = cache["pooled"].T @ g_raw
    grads.head_bias = g_raw.sum(axis=0)
    g_pooled = g_raw @ params.head_weights.T

    h = cache["h"]
    g_h = np.zeros_like(h)
    np.put_along_axis(g_h, cache["idx"][:, None, :], g_pooled[:, None, :], axis=1)
    g_pre = g_h * (1.0 - h * h)
    grads.frame_weights = np.einsum("btk,bth->kh", cache["x"], g_pre)
    grads.frame_bias = g_pre.sum(axis=(0, 1))
    return grads


def _labels(batch):
    return np.array([s.id for s in batch], dtype=np.int64)


def forward(params, batch: Sequence[FeatureSequence]):
    x, mask = _stack(batch, params.frame_weights.shape[0])
    rows, _ = _forward(params, x, mask)
    return EmbeddingMatrix(rows, _labels(batch))


def embed_frames(params, frames):
    """Embed a dense (n, n_frames, d_in) array directly; returns (n, n_dim)."""
    x = np.asarray(frames, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite values in input frames")
    rows, _ = _forward(params, x, np.ones(x.shape[:2], dtype=bool))
    return rows


def _value(out):
    return float(out[0] if isinstance(out, tuple) else out)


def loss_and_grad(params, batch, loss_fn: LossFn, context=None):
    """Scalar loss of the batch embeddings and its exact parameter gradients.

    ``loss_fn`` receives an :class:`EmbeddingMatrix` and returns
    ``(value, d value / d rows)``.
    """
    x, mask = _stack(batch, params.frame_weights.shape[0])
    rows, cache = _forward(params, x, mask)
    value, grad_rows = loss_fn(EmbeddingMatrix(rows, _labels(batch)))
    value = float(value)
    if not np.isfinite(value) or not np.all(np.isfinite(grad_rows)):
        raise NumericError(f"non-finite loss {value!r}", context)
    return value, _backward(params, cache, np.asarray(grad_rows, dtype=np.float64))


def central_difference(f, x, step=1e-5):
    """Central differences of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def numerical_gradient(params, batch, loss_fn, step=1e-5):
    """Finite-difference oracle for :func:`loss_and_grad`."""
    x, mask = _stack(batch, params.frame_weights.shape[0])
    labels = _labels(batch)
    work = params.copy()

    def objective(_):
        rows, _cache = _forward(work, x, mask)
        return _value(loss_fn(EmbeddingMatrix(rows, labels)))

    grads = ModelParams.zeros_like(params)
    for name in ModelParams.NAMES:
        setattr(grads, name, central_difference(objective, getattr(work, name), step))
    return grads


def relative_error(a, b):
    """Norm-wise relative error between two gradients (arrays or ModelParams)."""
    if isinstance(a, ModelParams):
        a, b = a.flat(), b.flat()
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def pooling_margin(params, batch):
    """Smallest gap between the top two frame activations over all pooled units.

    Finite-difference checks are only meaningful away from pooling ties.
    """
    x, mask = _stack(batch, params.frame_weights.shape[0])
    _, cache = _forward(params, x, mask)
    h = np.where(mask[..., None], cache["h"], -np.inf)
    if h.shape[1] < 2:
        return np.inf
    top2 = -np.sort(-h, axis=1)[:, :2, :]
    gaps = top2[:, 0, :] - top2[:, 1, :]
    gaps = gaps[np.isfinite(gaps)]
    return float(gaps.min()) if gaps.size else np.inf
