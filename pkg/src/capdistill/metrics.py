"""Retrieval accuracy (cosine ranking, mAP, R1) and cost accounting (MP, FLOPs).

FLOP convention: a multiply-accumulate counts as 2 FLOPs; bias adds, norm
affine (scale + shift = 2 per element), ReLU, residual adds and pooling
count one FLOP per element touched.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FLOP_CONVENTION = "MAC=2 FLOPs; bias/relu/add/pool=1 per element; norm=2 per element"


def rank_gallery(query_embs, gallery_embs):
    """Gallery indices per query, by descending cosine similarity (ties: lower index)."""
    q = np.asarray(query_embs, dtype=np.float64)
    g = np.asarray(gallery_embs, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: query {q.shape}, gallery {g.shape}")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn == 0).any():
        raise ValueError(f"zero-norm query embedding at index {int(np.flatnonzero(qn == 0)[0])}")
    if (gn == 0).any():
        raise ValueError(f"zero-norm gallery embedding at index {int(np.flatnonzero(gn == 0)[0])}")
    sim = (q / qn[:, None]) @ (g / gn[:, None]).T
    return np.argsort(-sim, axis=1, kind="stable")


def _matches(rankings, query_labels, gallery_labels):
    rankings = np.asarray(rankings)
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    return gl[rankings] == ql[:, None]


def compute_map(rankings, query_labels, gallery_labels, return_excluded=False):
    """Mean average precision; queries without any positive are excluded.

    Precisions are summed as exact fractions and rounded once, so the value
    does not depend on summation order.
    """
    hits = _matches(rankings, query_labels, gallery_labels)
    valid = hits.any(axis=1)
    aps = []
    for row in hits[valid]:
        ranks = np.flatnonzero(row) + 1
        aps.append(sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1)) / len(ranks))
    value = float(sum(aps) / len(aps)) if aps else 0.0
    excluded = int((~valid).sum())
    return (value, excluded) if return_excluded else value


def compute_r1(rankings, query_labels, gallery_labels):
    """Fraction of (valid) queries whose top-ranked gallery item shares their label."""
    hits = _matches(rankings, query_labels, gallery_labels)
    valid = hits.any(axis=1)
    if not valid.any():
        return 0.0
    return float(Fraction(int(hits[valid, 0].sum()), int(valid.sum())))


def count_params(model):
    """Trainable element count (kernels, biases, norm scale/shift, compactors, head)."""
    return int(sum(t.size for t in model.parameters()))


def _conv_flops(spec, h, w):
    # stride-1 or strided; output extent from the conv arithmetic
    ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
    wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
    flops = 2 * ho * wo * spec.in_channels * spec.out_channels * spec.kernel**2
    if spec.has_bias:
        flops += ho * wo * spec.out_channels
    return flops, ho, wo


def count_flops(model, input_shape, breakdown=False):
    """Inference FLOPs for one image of shape (C, H, W)."""
    _, h, w = input_shape
    parts = {}
    f, h, w = _conv_flops(model.stem_conv.spec, h, w)
    c = model.stem_conv.spec.out_channels
    parts["stem"] = f + 2 * c * h * w + c * h * w  # conv + norm + relu
    for i, b in enumerate(model.blocks):
        f = 0
        if b.pool > 1:
            f += c * h * w
            h, w = h // b.pool, w // b.pool
        f3, h3, w3 = _conv_flops(b.conv3.spec, h, w)
        d = b.conv3.spec.out_channels
        f += f3
        if b.norm is not None:
            f += 2 * d * h3 * w3
        if b.compactor is not None:
            f += 2 * h3 * w3 * d * b.compactor.weight.shape[0]
            d = b.compactor.weight.shape[0]
        f += d * h3 * w3  # relu
        f1, _, _ = _conv_flops(b.conv1.spec, h3, w3)
        f += f1
        out_c = b.conv1.spec.out_channels
        if b.proj is not None:
            fp, _, _ = _conv_flops(b.proj.spec, h, w)
            f += fp
        f += 2 * out_c * h3 * w3  # residual add + relu
        parts[f"block{i}"] = f
        c, h, w = out_c, h3, w3
    emb_w = model.embed.weight
    head = c * h * w + 2 * emb_w.shape[0] * emb_w.shape[1] + emb_w.shape[0]
    cls_w = model.classifier.weight
    head += 2 * cls_w.shape[0] * cls_w.shape[1]
    if model.classifier.bias is not None:
        head += cls_w.shape[0]
    parts["head"] = head
    total = int(sum(parts.values()))
    return (total, parts) if breakdown else total


@dataclass
class EvalReport:
    mAP: float
    R1: float
    MP: int
    FLOPs: int
    num_query: int
    num_gallery: int
    excluded_queries: int = 0

    def to_record(self):
        """Flat ``key=value`` lines; percentages use two decimals."""
        lines = [
            f"# flops_convention: {FLOP_CONVENTION}",
            f"mAP={self.mAP:.6f}",
            f"mAP_pct={100 * self.mAP:.2f}",
            f"R1={self.R1:.6f}",
            f"R1_pct={100 * self.R1:.2f}",
            f"MP={self.MP}",
            f"FLOPs={self.FLOPs}",
            f"num_query={self.num_query}",
            f"num_gallery={self.num_gallery}",
            f"excluded_queries={self.excluded_queries}",
        ]
        return "\n".join(lines) + "\n"


def evaluate_embeddings(query_embs, query_labels, gallery_embs, gallery_labels):
    """(mAP, R1, excluded) for a query/gallery split."""
    ranks = rank_gallery(query_embs, gallery_embs)
    m, excluded = compute_map(ranks, query_labels, gallery_labels, return_excluded=True)
    return m, compute_r1(ranks, query_labels, gallery_labels), excluded


def reduction_pct(before, after):
    return 100.0 * (before - after) / before
