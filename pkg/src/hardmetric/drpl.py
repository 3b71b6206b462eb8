"""Easy-to-hard reweighting of pairwise distances for triplet-style losses.

Distances are reweighted by hardness attention: within each anchor's
positive set, far samples get more weight; within its negative set, near
samples do. A cosine schedule on the softness factor sharpens the weights
as training proceeds, and a sine ramp blends the reweighted batch-hard-like
term into a plain batch-all triplet loss.

Every loss here has a ``*_and_grad`` twin returning the gradient with
respect to the distance matrix, which :func:`distance_backward` maps onto
the embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class DRPLSchedule:
    delta_min: float = 0.1
    epsilon: float = 1.4
    total_iters: int = 2000
    margin: float = 0.2

    def validate(self):
        if not self.delta_min > 0:
            raise ConfigurationError(f"delta_min must be > 0, got {self.delta_min}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")
        if int(self.total_iters) < 1:
            raise ConfigurationError(f"total_iters must be >= 1, got {self.total_iters}")
        return self


@dataclass(frozen=True)
class DRPLBreakdown:
    ba: float
    bh: float
    s_t: float
    delta_t: float
    total: float


def ordered_sum(a, axis=None):
    """Sum whose result depends only on the multiset of values, not their order."""
    return np.sort(a, axis=axis).sum(axis=axis)


def ordered_mean(values):
    values = np.ravel(values)
    return math.fsum(values.tolist()) / values.size


def _check_t(t, total_iters):
    if not 0 <= t <= total_iters:
        raise UsageError(f"iteration {t} outside [0, {total_iters}]")


def progressive_factor(t, sched):
    _check_t(t, sched.total_iters)
    return sched.delta_min + 0.5 * (1.0 + math.cos(math.pi * t / (2.0 * sched.total_iters))) * sched.epsilon


def smoothness_factor(t, total_iters):
    _check_t(t, total_iters)
    return math.sin(math.pi * t / (2.0 * total_iters))


def pair_masks(labels):
    """Boolean (B, B) positive and negative masks; the diagonal is in neither."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos, ~same


def pairwise_distances(rows):
    rows = np.asarray(rows, dtype=np.float64)
    diff = rows[:, None, :] - rows[None, :, :]
    sq = np.zeros(diff.shape[:2])
    # fixed left-to-right order over coordinates; see naive loop in tests
    for k in range(rows.shape[1]):
        sq += diff[..., k] * diff[..., k]
    return np.sqrt(sq)


def distance_backward(rows, dist, grad_dist):
    """Map d loss / d dist onto the embedding rows.

    Zero distances (self pairs, duplicate rows) get the zero subgradient.
    """
    rows = np.asarray(rows, dtype=np.float64)
    g = grad_dist + grad_dist.T
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(dist > 0, g / dist, 0.0)
    return coef.sum(axis=1)[:, None] * rows - coef @ rows


def _masked_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    top = z.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(z - top), 0.0)
    return e / ordered_sum(e, axis=1)[:, None]


def _logits(dist, delta, pos, neg):
    with np.errstate(over="ignore"):
        return np.where(pos, np.exp(dist / delta), np.where(neg, np.exp(-dist / delta), 0.0))


def attention_weights(dist, labels, delta):
    """Hardness attention: per anchor, softmax of exp(+d/delta) over positives
    and of exp(-d/delta) over negatives. Returns a (B, B) matrix with zero diagonal."""
    if not delta > 0:
        raise UsageError(f"delta must be > 0, got {delta}")
    dist = np.asarray(dist, dtype=np.float64)
    pos, neg = pair_masks(labels)
    if not pos.any(axis=1).all():
        raise UsageError("every anchor needs at least one positive (K >= 2)")
    if not neg.any(axis=1).all():
        raise UsageError("every anchor needs at least one negative (P >= 2)")
    z = _logits(dist, delta, pos, neg)
    return _masked_softmax(z, pos) + _masked_softmax(z, neg)


def _attention_backward(dist, weights, labels, delta, grad_weights):
    pos, neg = pair_masks(labels)
    z = _logits(dist, delta, pos, neg)
    grad = np.zeros_like(dist)
    for mask, sign in ((pos, 1.0), (neg, -1.0)):
        w = np.where(mask, weights, 0.0)
        gw = np.where(mask, grad_weights, 0.0)
        gz = w * (gw - (w * gw).sum(axis=1, keepdims=True))
        grad += np.where(mask, gz * z * (sign / delta), 0.0)
    return grad


def weighted_distances(dist, weights):
    out = np.asarray(weights) * np.asarray(dist)
    np.fill_diagonal(out, 0.0)
    return out


def drpl_bh_loss(weighted, labels, margin):
    """Batch-hard-like hinge on weighted positive and negative aggregates,
    averaged over anchors. The self pair is excluded from the positive set."""
    return _bh_terms(weighted, labels, margin)[0]


def _bh_terms(weighted, labels, margin):
    pos, neg = pair_masks(labels)
    hinge = margin + ordered_sum(np.where(pos, weighted, 0.0), axis=1) - ordered_sum(np.where(neg, weighted, 0.0), axis=1)
    active = hinge > 0
    return ordered_mean(np.where(active, hinge, 0.0)), active, pos, neg


def drpl_bh_loss_and_grad(dist, labels, delta, margin):
    """BH-like loss on attention-reweighted distances and d loss / d dist,
    differentiating through the attention weights."""
    weights = attention_weights(dist, labels, delta)
    weighted = weighted_distances(dist, weights)
    value, active, pos, neg = _bh_terms(weighted, labels, margin)
    n = len(labels)
    g_weighted = (np.where(pos, 1.0, 0.0) - np.where(neg, 1.0, 0.0)) * (active[:, None] / n)
    grad = g_weighted * weights
    grad += _attention_backward(dist, weights, labels, delta, g_weighted * dist)
    return value, grad


def _triplets(dist, labels, margin):
    pos, neg = pair_masks(labels)
    valid = pos[:, :, None] & neg[:, None, :]
    hinge = margin + dist[:, :, None] - dist[:, None, :]
    return hinge, valid


def triplet_ba_loss(dist, labels, margin):
    """Batch-all triplet hinge, averaged over every (anchor, positive, negative)."""
    return triplet_ba_loss_and_grad(dist, labels, margin)[0]


def triplet_ba_loss_and_grad(dist, labels, margin):
    dist = np.asarray(dist, dtype=np.float64)
    hinge, valid = _triplets(dist, labels, margin)
    count = int(valid.sum())
    if count == 0:
        raise UsageError("batch has no valid triplets (needs P >= 2 and K >= 2)")
    active = valid & (hinge > 0)
    value = math.fsum(hinge[active].tolist()) / count
    grad = (active.sum(axis=2) - active.sum(axis=1)) / count
    return value, grad


def drpl_loss(dist, labels, t, sched, use_bh=True):
    """Batch-all triplet plus the sine-ramped BH-like term. Returns (value, breakdown)."""
    value, _, breakdown = drpl_loss_and_grad(dist, labels, t, sched, use_bh=use_bh)
    return value, breakdown


def drpl_loss_and_grad(dist, labels, t, sched, use_bh=True):
    delta_t = progressive_factor(t, sched)
    s_t = smoothness_factor(t, sched.total_iters)
    ba, grad = triplet_ba_loss_and_grad(dist, labels, sched.margin)
    bh = 0.0
    total = ba
    if use_bh:
        bh, g_bh = drpl_bh_loss_and_grad(dist, labels, delta_t, sched.margin)
        total = ba + s_t * bh
        grad = grad + s_t * g_bh
    return total, grad, DRPLBreakdown(ba=ba, bh=bh, s_t=s_t, delta_t=delta_t, total=total)
