"""Convert a trained compactor student into a slim network.

Per block: fold the norm into the 3x3 conv, drop compactor rows whose L2 norm
is below ``lam``, collapse conv + slim compactor into one 3x3 conv with bias,
and slice the following 1x1 conv to the surviving channels. Shortcuts, the
stem and the head are untouched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from capdistill import network as N
from capdistill.network import Conv, ConvSpec, Model, ResidualBlock
from capdistill.tensor import ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-5


class ConversionError(RuntimeError):
    def __init__(self, block, message):
        super().__init__(f"block {block}: {message}")
        self.block = block


def fold_norm(weight, bias, norm):
    """Fold inference-mode normalization into conv weights; returns (W', B')."""
    denom = norm.running_var + norm.eps
    if (denom <= 0).any():
        raise ValueError("running variance + eps must be positive to fold")
    scale = norm.gamma.data / np.sqrt(denom)
    w = np.asarray(weight) * scale[:, None, None, None]
    b0 = np.zeros(w.shape[0]) if bias is None else np.asarray(bias)
    b = norm.beta.data + scale * (b0 - norm.running_mean)
    return w, b


def row_norms(weight):
    w = np.asarray(weight).reshape(weight.shape[0], -1)
    return np.sqrt((w * w).sum(axis=1))


def prune_compactor(weight, lam=DEFAULT_LAMBDA):
    """Keep rows with ||row|| >= lam; if none survive keep the largest one.

    Returns (slim kernel [E, D], kept indices, forced) where ``forced`` flags
    the keep-at-least-one fallback.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    w = np.asarray(weight).reshape(weight.shape[0], -1)
    norms = row_norms(w)
    kept = np.flatnonzero(norms >= lam)
    forced = kept.size == 0
    if forced:
        kept = np.array([int(np.argmax(norms))])
    return w[kept].copy(), kept, forced


def merge(w_folded, b_folded, slim_compactor):
    """W[e] = sum_d C[e, d] W'[d]; B = C @ B'."""
    w_folded = np.asarray(w_folded)
    c = np.asarray(slim_compactor)
    if c.ndim != 2 or c.shape[1] != w_folded.shape[0] or np.shape(b_folded) != (w_folded.shape[0],):
        raise ShapeError(f"merge shape mismatch: conv {w_folded.shape}, bias {np.shape(b_folded)}, compactor {c.shape}")
    d = w_folded.shape[0]
    w = (c @ w_folded.reshape(d, -1)).reshape((c.shape[0],) + w_folded.shape[1:])
    return w, c @ np.asarray(b_folded)


def thin_downstream(weight, kept):
    """Slice a [D_out, D, 1, 1] kernel to the kept input channels."""
    kept = np.asarray(kept)
    if kept.size == 0:
        raise ValueError("kept channel set is empty")
    if kept.min() < 0 or kept.max() >= weight.shape[1]:
        raise ValueError(f"kept indices out of range for {weight.shape[1]} input channels")
    return np.asarray(weight)[:, kept].copy()


@dataclass
class BlockPlan:
    block: int
    D: int
    E: int
    kept: list
    forced: bool = False
    max_deviation: float = 0.0


@dataclass
class PrunePlan:
    blocks: list
    params_heavy_backbone: int = 0
    params_student: int = 0
    params_slim: int = 0
    flops_heavy_backbone: int = 0
    flops_student: int = 0
    flops_slim: int = 0

    @property
    def widths(self):
        return [b.E for b in self.blocks]


@dataclass
class ConversionReport:
    plan: PrunePlan
    lam: float
    max_dev_zero_forced: float
    max_dev_heavy: float
    flagged_blocks: list = field(default_factory=list)

    def param_reduction_pct(self):
        p = self.plan
        return 100.0 * (p.params_heavy_backbone - p.params_slim) / p.params_heavy_backbone

    def flops_reduction_pct(self):
        p = self.plan
        return 100.0 * (p.flops_heavy_backbone - p.flops_slim) / p.flops_heavy_backbone

    def to_text(self):
        p = self.plan
        lines = [
            "# conversion report",
            "# flops_convention: MAC=2 FLOPs; bias/relu/add/pool=1 per element; norm=2 per element",
            f"lambda={self.lam:.3e}",
            "block\tD\tE\tmax_deviation\tkept",
        ]
        for b in p.blocks:
            flag = " (forced)" if b.forced else ""
            lines.append(f"{b.block}\t{b.D}\t{b.E}\t{b.max_deviation:.3e}\t{','.join(map(str, b.kept))}{flag}")
        lines += [
            f"MP_heavy_backbone={p.params_heavy_backbone}",
            f"MP_student={p.params_student}",
            f"MP_slim={p.params_slim}",
            f"FLOPs_heavy_backbone={p.flops_heavy_backbone}",
            f"FLOPs_student={p.flops_student}",
            f"FLOPs_slim={p.flops_slim}",
            f"MP_reduction_pct={self.param_reduction_pct():.2f}",
            f"FLOPs_reduction_pct={self.flops_reduction_pct():.2f}",
            f"max_dev_zero_forced={self.max_dev_zero_forced:.3e}",
            f"max_dev_heavy={self.max_dev_heavy:.3e}",
            f"flagged_blocks={','.join(map(str, self.flagged_blocks))}",
        ]
        return "\n".join(lines) + "\n"


def project_costs(config, mids, compactors=False, folded=False):
    """Closed-form params and FLOPs for a network whose block i has ``mids[i]`` mid channels.

    ``compactors`` adds a D x D compactor per block; ``folded`` replaces the
    block norm with a conv bias.
    """
    s = config.stem_width
    hw = config.image_size
    params = 9 * config.in_channels * s + 2 * s
    flops = 2 * hw * hw * config.in_channels * s * 9 + 3 * s * hw * hw
    c = s
    i = 0
    for st, width in enumerate(config.widths):
        for b in range(config.blocks_per_stage):
            e = mids[i]
            pix = hw * hw
            if st > 0 and b == 0:
                flops += c * pix
                hw //= 2
                pix = hw * hw
            params += 9 * c * e + (e if folded else 2 * e) + width * e + width
            flops += 2 * pix * c * e * 9 + (pix * e if folded else 2 * pix * e)
            if compactors:
                params += e * e
                flops += 2 * pix * e * e
            flops += pix * e + 2 * pix * e * width + pix * width
            if c != width:
                params += c * width
                flops += 2 * pix * c * width
            flops += 2 * pix * width
            c = width
            i += 1
    emb, k = config.embedding_dim, config.num_classes
    params += emb * c + emb + k * emb
    flops += c * hw * hw + 2 * emb * c + emb + 2 * k * emb
    return params, flops


def _zero_forced_copy(student, plans):
    """Student copy with every pruned compactor row set to exactly zero."""
    clone = N.build_model(student.config, 0)
    clone.load_state_dict(student.state_dict())
    for block, plan in zip(clone.blocks, plans):
        w = block.compactor.weight.data.copy()
        drop = np.setdiff1d(np.arange(plan.D), plan.kept)
        w[drop] = 0.0
        block.compactor.weight.data = w
    return clone


def convert_model(student, lam=DEFAULT_LAMBDA, inputs=None, check_seed=0, n_check=8):
    """Build the slim model; returns (slim_model, plan, report).

    Equivalence is checked on ``inputs`` (default: ``n_check`` seeded normal
    images) against the student with pruned rows forced to zero.
    """
    if not student.has_compactors or len(student.compactors()) != len(student.blocks):
        raise ConversionError(-1, "model has no compactors; only compactor students can be converted")
    cfg = student.config
    slim_blocks, plans, flagged = [], [], []
    for i, b in enumerate(student.blocks):
        try:
            wf, bf = fold_norm(b.conv3.weight.data, None if b.conv3.bias is None else b.conv3.bias.data, b.norm)
            cw = b.compactor.weight.data
            slim_c, kept, forced = prune_compactor(cw, lam)
            w, bias = merge(wf, bf, slim_c)
            conv1_w = thin_downstream(b.conv1.weight.data, kept)
        except (ValueError, ShapeError) as exc:
            raise ConversionError(i, str(exc)) from exc
        if forced:
            log.warning("block %d: no compactor row reached lambda=%g; kept channel %d", i, lam, int(kept[0]))
            flagged.append(i)
        e = len(kept)
        spec3 = ConvSpec(b.conv3.spec.in_channels, e, 3, padding=b.conv3.spec.padding, has_bias=True)
        conv3 = Conv(spec3, Tensor(w, requires_grad=True), Tensor(bias, requires_grad=True))
        spec1 = ConvSpec(e, b.conv1.spec.out_channels, 1, has_bias=True)
        conv1 = Conv(spec1, Tensor(conv1_w, requires_grad=True), Tensor(b.conv1.bias.data.copy(), requires_grad=True))
        proj = None
        if b.proj is not None:
            proj = Conv(b.proj.spec, Tensor(b.proj.weight.data.copy(), requires_grad=True))
        slim_blocks.append(ResidualBlock(conv3, None, None, conv1, proj, b.pool))
        plans.append(BlockPlan(i, cw.shape[0], e, [int(k) for k in kept], forced))

    stem_conv = Conv(student.stem_conv.spec, Tensor(student.stem_conv.weight.data.copy(), requires_grad=True))
    stem_norm = N.AffineNorm(cfg.stem_width, student.stem_norm.eps, student.stem_norm.momentum)
    stem_norm.gamma.data = student.stem_norm.gamma.data.copy()
    stem_norm.beta.data = student.stem_norm.beta.data.copy()
    stem_norm.running_mean = student.stem_norm.running_mean.copy()
    stem_norm.running_var = student.stem_norm.running_var.copy()
    embed = N.Linear(Tensor(student.embed.weight.data.copy(), requires_grad=True),
                     Tensor(student.embed.bias.data.copy(), requires_grad=True))
    classifier = N.Linear(Tensor(student.classifier.weight.data.copy(), requires_grad=True))
    slim_cfg = N.ModelConfig.from_dict({**cfg.to_dict(), "with_compactors": False})
    slim = Model(slim_cfg, stem_conv, stem_norm, slim_blocks, embed, classifier)

    plan = PrunePlan(plans)
    widths = [p.D for p in plans]
    plan.params_heavy_backbone, plan.flops_heavy_backbone = project_costs(cfg, widths)
    plan.params_student, plan.flops_student = project_costs(cfg, widths, compactors=True)
    plan.params_slim, plan.flops_slim = project_costs(cfg, [p.E for p in plans], folded=True)

    if inputs is None:
        rng = np.random.default_rng(check_seed)
        inputs = rng.standard_normal((n_check, cfg.in_channels, cfg.image_size, cfg.image_size))
    inputs = np.asarray(inputs, dtype=np.float64)
    reference = _zero_forced_copy(student, plans)
    with no_grad():
        ref = N.forward_with_taps(reference, inputs, "eval")
        heavy = N.forward_with_taps(student, inputs, "eval")
        out = N.forward_with_taps(slim, inputs, "eval")
    for p, rt, st in zip(plans, ref.block_features, out.block_features):
        p.max_deviation = float(np.abs(rt.data[:, p.kept] - st.data).max())
    dev_zero = max(
        float(np.abs(ref.embedding.data - out.embedding.data).max()),
        float(np.abs(ref.logits.data - out.logits.data).max()),
    )
    dev_heavy = float(np.abs(heavy.embedding.data - out.embedding.data).max())
    report = ConversionReport(plan, lam, dev_zero, dev_heavy, flagged)
    return slim, plan, report


def slim_from_state(config, state):
    """Rebuild a slim model from a flat state dict produced by ``Model.state_dict``."""
    mids = []
    i = 0
    while f"blocks.{i}.conv3.weight" in state:
        mids.append(state[f"blocks.{i}.conv3.weight"].shape[0])
        i += 1
    model = N.build_model(N.ModelConfig.from_dict({**config.to_dict(), "with_compactors": False}), 0)
    for b, e in zip(model.blocks, mids):
        c = b.conv3.spec.in_channels
        b.conv3 = Conv(ConvSpec(c, e, 3, padding=1, has_bias=True), Tensor(np.zeros((e, c, 3, 3)), requires_grad=True),
                       Tensor(np.zeros(e), requires_grad=True))
        b.norm = None
        out_c = b.conv1.spec.out_channels
        b.conv1 = Conv(ConvSpec(e, out_c, 1, has_bias=True), Tensor(np.zeros((out_c, e, 1, 1)), requires_grad=True),
                       Tensor(np.zeros(out_c), requires_grad=True))
    model.load_state_dict(state)
    return model
