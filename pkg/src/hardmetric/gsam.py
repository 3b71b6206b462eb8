"""Class-centroid memory bank with structure-aligned updates.

The bank holds one centroid per training identity. Rows of identities in
the current batch follow a momentum update; rows of absent identities are
moved too (AU), so the bank's relative geometry keeps pace with the
present rows. The bank then supervises the embedder as a temperature-scaled
cosine classifier plus a variance penalty.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataError, UsageError
from .drpl import ordered_mean, ordered_sum
from .model import _stack, _forward


class MemoryMode(str, enum.Enum):
    NO_UPDATE = "NoUpdate"
    HARD_REPLACE = "HardReplace"
    PU = "PU"
    PU_AU = "PU_AU"
    PU_AU_MEAN_SHIFT = "PU_AU_MeanShift"


class VarianceMode(str, enum.Enum):
    BATCH_MEAN = "BatchMean"
    PER_ID_MEAN = "PerIdMean"


@dataclass(frozen=True)
class GsamConfig:
    tau: float = 0.1
    variance_mode: VarianceMode = VarianceMode.BATCH_MEAN

    def __post_init__(self):
        object.__setattr__(self, "variance_mode", VarianceMode(self.variance_mode))
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class GsamBreakdown:
    ce: float
    var: float
    total: float


@dataclass(eq=False)
class MemoryBank:
    rows: np.ndarray
    mode: MemoryMode = MemoryMode.PU_AU
    alpha: float = 0.9
    beta: float = 0.9
    renormalize: bool = True

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.mode = MemoryMode(self.mode)
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")

    @property
    def n_ids(self):
        return self.rows.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            np.array_equal(self.rows, other.rows)
            and (self.mode, self.alpha, self.beta, self.renormalize)
            == (other.mode, other.alpha, other.beta, other.renormalize)
        )


def _renormalize(rows):
    sq = np.zeros(rows.shape[0])
    for k in range(rows.shape[1]):
        sq += rows[:, k] * rows[:, k]
    norms = np.sqrt(sq)
    return np.where(norms[:, None] > 0, rows / np.where(norms > 0, norms, 1.0)[:, None], rows)


def embed_dataset(params, dataset, chunk=256):
    seqs = dataset.sequences
    out = []
    for start in range(0, len(seqs), chunk):
        x, mask = _stack(seqs[start : start + chunk], params.frame_weights.shape[0])
        out.append(_forward(params, x, mask)[0])
    return np.concatenate(out, axis=0)


def init_memory(dataset, params, mode=MemoryMode.PU_AU, alpha=0.9, beta=0.9, renormalize=True):
    """Centroid of every identity's embeddings over the full dataset."""
    emb = embed_dataset(params, dataset)
    n_ids = dataset.n_ids
    acc = np.zeros((n_ids, emb.shape[1]))
    counts = np.zeros(n_ids, dtype=np.int64)
    for row, seq in zip(emb, dataset.sequences):
        acc[seq.id] += row
        counts[seq.id] += 1
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"identities without sequences: {missing}")
    rows = acc / counts[:, None]
    if renormalize:
        rows = _renormalize(rows)
    return MemoryBank(rows, mode=mode, alpha=alpha, beta=beta, renormalize=renormalize)


def _present_offsets(rows, labels, memory_rows):
    """Per present identity, the mean of (batch row - memory row)."""
    present = np.unique(labels)
    offsets = np.stack([(rows[labels == i] - memory_rows[i]).mean(axis=0) for i in present])
    return present, offsets


def update_memory(memory, emb, t=None):
    """One bank update from batch embeddings; returns a new bank.

    ``t`` is accepted for symmetry with the schedules and is unused.
    """
    rows, labels = np.asarray(emb.rows), np.asarray(emb.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= memory.n_ids):
        raise UsageError(f"batch label outside [0, {memory.n_ids})")
    mode = memory.mode
    old = memory.rows
    new = old.copy()
    if mode is not MemoryMode.NO_UPDATE:
        # offsets from the old rows, so a batch sitting on its row leaves it untouched exactly
        present, offsets = _present_offsets(rows, labels, old)
        absent = np.setdiff1d(np.arange(memory.n_ids), present)
        if mode is MemoryMode.HARD_REPLACE:
            new[present] = np.stack([rows[labels == i].mean(axis=0) for i in present])
        else:
            new[present] = old[present] + (1.0 - memory.alpha) * offsets
            if mode is MemoryMode.PU_AU:
                batch_mean = rows.mean(axis=0)
                b = memory.beta
                new[absent] = (1.0 - b) * (batch_mean - old[absent]) + b * old[absent]
            elif mode is MemoryMode.PU_AU_MEAN_SHIFT:
                shift = (new[present] - old[present]).mean(axis=0)
                new[absent] = old[absent] + shift
    if memory.renormalize:
        new = _renormalize(new)
    return replace(memory, rows=new)


def fusion_factor(t, total_iters):
    if not 0 <= t <= total_iters:
        raise UsageError(f"iteration {t} outside [0, {total_iters}]")
    return math.sin(math.pi * t / (2.0 * total_iters))


def gsam_loss(emb, labels, memory_rows, cfg):
    """Cross-entropy against the bank plus the variance penalty. Returns (value, breakdown)."""
    value, _, breakdown = gsam_loss_and_grad(emb, labels, memory_rows, cfg)
    return value, breakdown


def gsam_loss_and_grad(emb, labels, memory_rows, cfg):
    """Loss and its gradient with respect to the embeddings; the bank is a constant."""
    rows = np.asarray(getattr(emb, "rows", emb), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    memory_rows = np.asarray(getattr(memory_rows, "rows", memory_rows), dtype=np.float64)
    n, dim = rows.shape
    n_ids = memory_rows.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_ids):
        raise UsageError(f"label outside [0, {n_ids}) of the memory bank")

    logits = rows @ memory_rows.T / cfg.tau
    top = logits.max(axis=1, keepdims=True)
    shifted = logits - top
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    ce = ordered_mean(lse - picked)
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    grad = (probs / n) @ memory_rows / cfg.tau

    if cfg.variance_mode is VarianceMode.BATCH_MEAN:
        centered = rows - ordered_sum(rows, axis=0) / n
    else:
        centered = np.empty_like(rows)
        for i in np.unique(labels):
            sel = labels == i
            centered[sel] = rows[sel] - ordered_sum(rows[sel], axis=0) / sel.sum()
    var = ordered_mean(centered * centered)
    # the mean's own dependence on the rows cancels because centered rows sum to zero
    grad = grad + centered * (2.0 / (n * dim))
    total = ce + var
    return total, grad, GsamBreakdown(ce=ce, var=var, total=total)
