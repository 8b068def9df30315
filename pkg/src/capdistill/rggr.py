"""Retrieval-guided gradient resetting: decide which compactor rows stop learning.

For every block, teacher GAP features fill a FIFO gallery. The batch's teacher
features query that gallery (cosine similarity); for each query and each of
its top-K retrieved gallery vectors, channels are scored by
``|student_feat * retrieved_feat|`` and the lowest ``floor(p * D)`` are
collected. Channels collected for *every* (query, neighbour) pair get mask 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOP_K = 2
DEFAULT_P = 0.5


class GalleryNotWarm(RuntimeError):
    """Raised when ranking is attempted against an empty gallery."""


class GalleryQueue:
    """Fixed-capacity FIFO of feature vectors with identity labels (ring buffer)."""

    def __init__(self, dim, capacity):
        if dim < 1 or capacity < 1:
            raise ValueError("dim and capacity must be positive")
        self.dim = dim
        self.capacity = capacity
        self._feats = np.zeros((capacity, dim))
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._start = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, feats, labels):
        feats = np.asarray(feats, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ValueError(f"feature dim mismatch: queue holds {self.dim}, got shape {feats.shape}")
        if labels.shape[0] != feats.shape[0]:
            raise ValueError("one label per feature vector is required")
        for f, lab in zip(feats, labels):
            slot = (self._start + self._size) % self.capacity
            self._feats[slot] = f
            self._labels[slot] = lab
            if self._size < self.capacity:
                self._size += 1
            else:
                self._start = (self._start + 1) % self.capacity
        return self

    def _order(self):
        return (self._start + np.arange(self._size)) % self.capacity

    @property
    def features(self):
        """Stored vectors, oldest first."""
        return self._feats[self._order()].copy()

    @property
    def labels(self):
        return self._labels[self._order()].copy()

    def state(self):
        return {"features": self.features, "labels": self.labels.astype(np.float64)}

    @classmethod
    def from_state(cls, dim, capacity, features, labels):
        q = cls(dim, capacity)
        if len(features):
            q.push(np.asarray(features).reshape(-1, dim), np.asarray(labels).astype(np.int64))
        return q


def queue_update(queue, teacher_feats, labels):
    return queue.push(teacher_feats, labels)


@dataclass
class RankResult:
    order: np.ndarray  # [N, G] gallery indices, most similar first
    top_k: np.ndarray  # [N, K] gallery indices
    retrieved: np.ndarray  # [N, K, D] retrieved gallery vectors


def cosine_matrix(queries, gallery):
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    return (queries / np.where(qn == 0, 1.0, qn)) @ (gallery / np.where(gn == 0, 1.0, gn)).T


def compute_rank(queue, query_feats, k=DEFAULT_TOP_K):
    """Rank the gallery for each query by descending cosine similarity (ties: lower index)."""
    if len(queue) == 0:
        raise GalleryNotWarm("gallery not warmed up")
    if k < 1:
        raise ValueError("K must be >= 1")
    query_feats = np.asarray(query_feats, dtype=np.float64)
    gallery = queue.features
    sim = cosine_matrix(query_feats, gallery)
    order = np.argsort(-sim, axis=1, kind="stable")
    kk = min(k, gallery.shape[0])
    top = order[:, :kk]
    return RankResult(order, top, gallery[top])


def channel_importance(student_feat, retrieved_feat):
    """A_d = |f_d * r_d|."""
    return np.abs(np.asarray(student_feat) * np.asarray(retrieved_feat))


def select_unimportant(scores, p=DEFAULT_P):
    """Indices of the floor(p * D) smallest scores, ties to the lower index."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    scores = np.asarray(scores)
    count = int(np.floor(p * scores.shape[-1]))
    return frozenset(int(i) for i in np.argsort(scores, kind="stable")[:count])


def intersect_masks(index_sets):
    sets = list(index_sets)
    if not sets:
        raise ValueError("at least one index set is required")
    out = set(sets[0])
    for s in sets[1:]:
        out &= s
    return frozenset(out)


def mask_from_indices(indices, dim):
    mask = np.ones(dim)
    if indices:
        mask[sorted(indices)] = 0.0
    return mask


@dataclass
class BlockMaskStats:
    block: int
    dim: int
    unimportant: int
    empty: bool
    mask_ones: int


@dataclass
class MaskResult:
    masks: list
    stats: list = field(default_factory=list)


def block_mask(queue, teacher_feats, student_feats, labels, p=DEFAULT_P, k=DEFAULT_TOP_K):
    """Update ``queue`` with this batch, rank, and return (mask, unimportant set)."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    teacher_feats = np.asarray(teacher_feats, dtype=np.float64)
    student_feats = np.asarray(student_feats, dtype=np.float64)
    queue.push(teacher_feats, labels)
    rank = compute_rank(queue, teacher_feats, k)
    # argsort per (i, j) row is equivalent to calling select_unimportant on each pair
    scores = np.abs(student_feats[:, None, :] * rank.retrieved)
    dim = student_feats.shape[1]
    count = int(np.floor(p * dim))
    picked = np.argsort(scores.reshape(-1, dim), axis=1, kind="stable")[:, :count]
    hits = np.zeros((picked.shape[0], dim), dtype=bool)
    np.put_along_axis(hits, picked, True, axis=1)
    common = np.flatnonzero(hits.all(axis=0))
    indices = frozenset(int(i) for i in common)
    return mask_from_indices(indices, dim), indices


def build_masks(teacher_taps, student_taps, labels, queues, p=DEFAULT_P, k=DEFAULT_TOP_K):
    """Per-block channel masks from this batch's taps; blocks are independent."""
    if not (len(teacher_taps) == len(student_taps) == len(queues)):
        raise ValueError("one teacher tap, student tap and queue per block is required")
    result = MaskResult([])
    for m, (ft, fs, q) in enumerate(zip(teacher_taps, student_taps, queues)):
        mask, indices = block_mask(q, ft, fs, labels, p, k)
        result.masks.append(mask)
        result.stats.append(BlockMaskStats(m, len(mask), len(indices), not indices, int(mask.sum())))
    return result
