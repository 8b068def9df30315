"""Distillation, retrieval and sparsity losses, and their weighted sum.

    L_all = 0.5 * L_dl + L_id + L_tri + L_kl + alpha * L_np
    L_acc = L_all - alpha * L_np          (the accumulation objective)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from capdistill import tensor as T
from capdistill.tensor import ShapeError, Tensor

DEFAULT_ALPHA = 0.004
DEFAULT_SMOOTHING = 0.1
DEFAULT_MARGIN = 0.3
DEFAULT_TEMPERATURE = 1.0


def loss_dl(teacher_taps, student_taps):
    """Block-wise alignment: mean over blocks of the mean squared GAP-feature difference."""
    if len(teacher_taps) != len(student_taps) or not teacher_taps:
        raise ValueError(f"tap list lengths differ or are empty: {len(teacher_taps)} vs {len(student_taps)}")
    total = None
    for m, (t, s) in enumerate(zip(teacher_taps, student_taps)):
        if t.shape != s.shape:
            raise ShapeError(f"block {m}: teacher tap {t.shape} != student tap {s.shape}")
        diff = s - T.as_tensor(t).detach()
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(teacher_taps))


def loss_id(logits, labels, smoothing=DEFAULT_SMOOTHING):
    """Label-smoothed cross-entropy averaged over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    logp = T.log_softmax(logits)
    return (logp * target).sum() * (-1.0 / n)


def hardest_pairs(emb, labels):
    """Indices of the hardest positive and negative for every anchor.

    Returns (anchors, positives, negatives); anchors without a positive are
    dropped. Ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    has_pos = pos_mask.any(axis=1)
    if not has_pos.any():
        raise ValueError("triplet loss needs at least one identity with two samples")
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(~same, dist, np.inf), axis=1)
    anchors = np.flatnonzero(has_pos)
    return anchors, pos[anchors], neg[anchors]


def _pair_dist(emb, a, b):
    d = emb[a] - emb[b]
    return T.sqrt(T.clamp_min((d * d).sum(axis=1), 1e-12))


def loss_triplet(embeddings, labels, margin=DEFAULT_MARGIN):
    """Batch-hard triplet loss: mean over anchors of max(0, d_ap - d_an + margin)."""
    anchors, pos, neg = hardest_pairs(embeddings.data, labels)
    d_ap = _pair_dist(embeddings, anchors, pos)
    d_an = _pair_dist(embeddings, anchors, neg)
    return T.relu(d_ap - d_an + margin).mean()


def loss_kl(student_logits, teacher_logits, temperature=DEFAULT_TEMPERATURE):
    """T^2 * batch mean of KL(softmax(teacher/T) || softmax(student/T))."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = np.asarray(T.as_tensor(teacher_logits).data) / temperature
    t = t - t.max(axis=1, keepdims=True)
    log_pt = t - np.log(np.exp(t).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(student_logits * (1.0 / temperature))
    n = pt.shape[0]
    const = float((pt * log_pt).sum())
    return ((log_ps * pt).sum() * -1.0 + const) * (temperature**2 / n)


def _weights(compactors):
    for c in compactors:
        yield c.weight if hasattr(c, "weight") else c


def loss_np(compactors):
    """Group lasso: sum over kernels of the L2 norms of their output-channel rows."""
    total = None
    for w in _weights(compactors):
        term = T.row_norms(w).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def lasso_grad(weight):
    """Analytic gradient of the row-norm sum: W_i / ||W_i||, zero for rows below 1e-12."""
    w = np.asarray(weight).reshape(weight.shape[0], -1)
    norms = np.sqrt((w * w).sum(axis=1))
    safe = np.where(norms < 1e-12, np.inf, norms)
    return (w / safe[:, None]).reshape(weight.shape)


@dataclass
class LossBreakdown:
    l_dl: float
    l_id: float
    l_tri: float
    l_kl: float
    l_np: float
    alpha: float
    l_total: float
    l_acc: float

    def as_dict(self):
        return dict(self.__dict__)


def loss_total(parts, alpha=DEFAULT_ALPHA):
    """Combine (l_dl, l_id, l_tri, l_kl, l_np) into a :class:`LossBreakdown`.

    ``parts`` is a mapping with those keys or a 5-sequence in that order.
    """
    keys = ("l_dl", "l_id", "l_tri", "l_kl", "l_np")
    if not isinstance(parts, dict):
        parts = dict(zip(keys, parts))
    vals = {}
    for key in keys:
        v = parts.get(key, 0.0)
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {key}={v}")
        vals[key] = v
    acc = 0.5 * vals["l_dl"] + vals["l_id"] + vals["l_tri"] + vals["l_kl"]
    total = acc + alpha * vals["l_np"]
    return LossBreakdown(alpha=alpha, l_total=total, l_acc=acc, **vals)
