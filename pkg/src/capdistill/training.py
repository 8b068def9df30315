"""Teacher training, compactor distillation with gradient resetting, SGD and LR schedule.

Distillation step (modes ``cdd`` / ``cdd_rggr``):

1. frozen teacher forward (eval mode) -> taps, logits
2. student forward (train mode), backward of L_acc only
3. compactor gradients become ``G_acc * M + alpha * W / ||W||`` per row
4. SGD with momentum; weight decay skips rows whose mask bit is 0

``cdd_no_dgc`` trains a compactor-free student and adds the lasso gradient to
the 3x3 conv kernels instead.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from capdistill import data as D
from capdistill import losses as L
from capdistill import metrics
from capdistill import network as N
from capdistill import rggr
from capdistill.checkpoint import Checkpoint
from capdistill.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MODES = ("teacher", "cdd", "cdd_rggr", "cdd_no_dgc")


@dataclass
class TrainConfig:
    epochs: int = 40
    rggr_activation_epoch: int = 9
    alpha: float = 0.05
    p: float = 0.7
    top_k: int = 2
    queue_capacity: int = 128
    base_lr: float = 1e-3
    peak_lr: float = 1e-2
    warmup_epochs: float = 4.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    P: int = 4
    S: int = 4
    seed: int = 0
    mode: str = "cdd_rggr"
    smoothing: float = L.DEFAULT_SMOOTHING
    margin: float = L.DEFAULT_MARGIN
    temperature: float = L.DEFAULT_TEMPERATURE
    student_init: str = "teacher"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode == "cdd_rggr" and not 1 <= self.rggr_activation_epoch <= self.epochs:
            raise ValueError("rggr_activation_epoch must lie in [1, epochs]")
        if self.P < 2 or self.S < 2:
            raise ValueError("P and S must both be >= 2")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if self.top_k < 1 or self.queue_capacity < 1:
            raise ValueError("top_k and queue_capacity must be positive")
        if self.student_init not in ("scratch", "teacher"):
            raise ValueError("student_init must be 'scratch' or 'teacher'")

    def to_dict(self):
        return asdict(self)


# --- schedule and optimizer -------------------------------------------------
def lr_at(step, config, steps_per_epoch):
    """Linear warmup base -> peak over ``warmup_epochs``, then cosine decay to 0 at the last epoch."""
    t = step / steps_per_epoch
    w = config.warmup_epochs
    if w > 0 and t < w:
        return config.base_lr + (config.peak_lr - config.base_lr) * t / w
    span = config.epochs - w
    if span <= 0:
        return config.peak_lr
    frac = min(max((t - w) / span, 0.0), 1.0)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)
    step: int = 0


def sgd_step(params, grads, state, lr, momentum, weight_decay, decay_masks=None):
    """v <- momentum * v + grad + wd * param; param <- param - lr * v.

    ``params`` and ``grads`` are name-keyed dicts. ``decay_masks`` maps a
    parameter name to a per-row 0/1 vector; rows with 0 get no weight decay.
    """
    decay_masks = decay_masks or {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            wd = weight_decay * p.data
            mask = decay_masks.get(name)
            if mask is not None:
                wd = wd * mask.reshape((-1,) + (1,) * (p.data.ndim - 1))
            g = g + wd
        v = state.buffers.get(name)
        v = g.copy() if v is None or momentum == 0 else momentum * v + g
        state.buffers[name] = v
        p.data = p.data - lr * v
    state.step += 1


def reset_gradients(acc_grads, weights, masks, alpha):
    """Per compactor: G_acc * M (row-wise) + alpha * W / ||W|| (zero for rows with ||W|| < 1e-12)."""
    out = []
    for g, w, m in zip(acc_grads, weights, masks):
        w = np.asarray(w)
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (w.shape[0],):
            raise ValueError(f"mask length {m.shape} does not match {w.shape[0]} compactor rows")
        g = np.zeros_like(w) if g is None else np.asarray(g)
        out.append(g * m.reshape((-1,) + (1,) * (w.ndim - 1)) + alpha * L.lasso_grad(w))
    return out


# --- evaluation -------------------------------------------------------------
def embed(model, images, batch_size=64):
    out = []
    with no_grad():
        for k in range(0, len(images), batch_size):
            res = N.forward_with_taps(model, images[k : k + batch_size], "eval")
            out.append(res.embedding.data)
    return np.concatenate(out)


def evaluate(model, dataset):
    """EvalReport on the dataset's query/gallery split."""
    qx, ql = dataset.subset(D.QUERY)
    gx, gl = dataset.subset(D.GALLERY)
    q = embed(model, D.prepare(qx))
    g = embed(model, D.prepare(gx))
    m, r1, excluded = metrics.evaluate_embeddings(q, ql, g, gl)
    cfg = model.config
    return metrics.EvalReport(
        m, r1, metrics.count_params(model),
        metrics.count_flops(model, (cfg.in_channels, cfg.image_size, cfg.image_size)),
        len(ql), len(gl), excluded,
    )


# --- trainer ----------------------------------------------------------------
class Trainer:
    """Owns the trained model, optimizer state, gallery queues and step counter."""

    def __init__(self, config, dataset, model, teacher=None, mask_log=None):
        self.config = config
        self.dataset = dataset
        self.model = model
        self.teacher = teacher
        self.opt = OptimizerState()
        self.step = 0
        self.mask_log = mask_log
        self.label_map = dataset.train_label_map()
        self.steps_per_epoch = len(D.pk_batches(dataset, config.P, config.S, config.seed, 0))
        self.queues = []
        if config.mode == "cdd_rggr":
            self.queues = [rggr.GalleryQueue(b.mid_channels, config.queue_capacity) for b in model.blocks]
        if config.mode != "teacher" and teacher is None:
            raise ValueError(f"mode {config.mode} needs a teacher")

    @property
    def total_steps(self):
        return self.config.epochs * self.steps_per_epoch

    def _batch(self, epoch, index, rows):
        rng = np.random.default_rng([self.config.seed, epoch, index, 23])
        x = D.prepare(self.dataset.images[rows], self.dataset.spec.augmentations, rng)
        y = np.array([self.label_map[int(l)] for l in self.dataset.labels[rows]])
        return x, y

    def train_step(self, x, y, epoch):
        """One optimization step; ``epoch`` is 1-based. Returns the loss record."""
        cfg = self.config
        model = self.model
        model.zero_grad()
        lr = lr_at(self.step, cfg, self.steps_per_epoch)
        res = N.forward_with_taps(model, x, "train")
        l_id = L.loss_id(res.logits, y, cfg.smoothing)
        l_tri = L.loss_triplet(res.embedding, y, cfg.margin)
        record = {"step": self.step, "epoch": epoch, "lr": lr}
        decay_masks = {}
        params = dict(model.named_parameters())

        if cfg.mode == "teacher":
            loss = l_id + l_tri
            loss.backward()
            parts = {"l_id": l_id, "l_tri": l_tri}
            alpha = 0.0
        else:
            with no_grad():
                tres = N.forward_with_taps(self.teacher, x, "eval")
            l_dl = L.loss_dl([t.data for t in tres.block_features], res.block_features)
            l_kl = L.loss_kl(res.logits, tres.logits.data, cfg.temperature)
            l_acc = l_dl * 0.5 + l_id + l_tri + l_kl
            l_acc.backward()
            alpha = cfg.alpha
            if cfg.mode == "cdd_no_dgc":
                targets = [(f"blocks.{i}.conv3.weight", b.conv3.weight) for i, b in enumerate(model.blocks)]
                for name, w in targets:
                    w.grad = w.grad + alpha * L.lasso_grad(w.data)
                l_np = float(sum(np.linalg.norm(w.data.reshape(w.shape[0], -1), axis=1).sum() for _, w in targets))
            else:
                comps = [b.compactor for b in model.blocks]
                dims = [c.weight.shape[0] for c in comps]
                masks = [np.ones(d) for d in dims]
                if cfg.mode == "cdd_rggr":
                    t_feats = [t.data for t in tres.block_features]
                    s_feats = [s.data for s in res.block_features]
                    if epoch >= cfg.rggr_activation_epoch:
                        mres = rggr.build_masks(t_feats, s_feats, y, self.queues, cfg.p, cfg.top_k)
                        masks = mres.masks
                        self._log_masks(epoch, mres.stats)
                    else:
                        for q, f in zip(self.queues, t_feats):
                            q.push(f, y)
                new = reset_gradients([c.weight.grad for c in comps], [c.weight.data for c in comps], masks, alpha)
                for i, (c, g, m) in enumerate(zip(comps, new, masks)):
                    c.weight.grad = g
                    decay_masks[f"blocks.{i}.compactor.weight"] = m
                l_np = float(sum(np.linalg.norm(c.weight.data, axis=1).sum() for c in comps))
                record["masked_rows"] = int(sum(len(m) - m.sum() for m in masks))
            parts = {"l_dl": l_dl, "l_id": l_id, "l_tri": l_tri, "l_kl": l_kl, "l_np": l_np}

        breakdown = L.loss_total(parts, alpha)
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
        sgd_step(params, grads, self.opt, lr, cfg.momentum, cfg.weight_decay, decay_masks)
        self.step += 1
        record.update({k: v for k, v in breakdown.as_dict().items() if k != "alpha"})
        return record

    def _log_masks(self, epoch, stats):
        if self.mask_log is None:
            return
        cells = " ".join(f"b{s.block}:I={s.unimportant},ones={s.mask_ones}/{s.dim}" for s in stats)
        empty = ",".join(str(s.block) for s in stats if s.empty)
        self.mask_log.write(f"step={self.step} epoch={epoch} {cells} empty=[{empty}]\n")

    def run(self, stop_step=None, on_epoch_end=None):
        """Train from ``self.step`` up to ``stop_step`` (default: all epochs)."""
        stop = self.total_steps if stop_step is None else min(stop_step, self.total_steps)
        history = []
        while self.step < stop:
            epoch0, index = divmod(self.step, self.steps_per_epoch)
            batches = D.pk_batches(self.dataset, self.config.P, self.config.S, self.config.seed, epoch0)
            losses = []
            for i in range(index, len(batches)):
                if self.step >= stop:
                    break
                x, y = self._batch(epoch0, i, batches[i])
                rec = self.train_step(x, y, epoch0 + 1)
                if not math.isfinite(rec["l_total"]):
                    raise FloatingPointError(f"non-finite loss at step {rec['step']}")
                losses.append(rec)
            if self.step % self.steps_per_epoch == 0 and losses:
                summary = _epoch_summary(epoch0 + 1, losses)
                if on_epoch_end is not None:
                    summary.update(on_epoch_end(self, epoch0 + 1) or {})
                history.append(summary)
        return history

    # --- persistence ----------------------------------------------------------
    def to_checkpoint(self, kind):
        tensors = dict(self.model.state_dict())
        for name, v in self.opt.buffers.items():
            tensors["opt/" + name] = v
        for m, q in enumerate(self.queues):
            st = q.state()
            tensors[f"queue/{m}/features"] = st["features"]
            tensors[f"queue/{m}/labels"] = st["labels"]
        return Checkpoint(
            tensors,
            config={"model": self.model.config.to_dict(), "train": self.config.to_dict()},
            step=self.step,
            meta={"kind": kind},
        )

    def load_checkpoint(self, ckpt):
        state = {k: v for k, v in ckpt.tensors.items() if "/" not in k}
        self.model.load_state_dict(state)
        self.opt = OptimizerState(
            {k[4:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("opt/")}, ckpt.step
        )
        for m, q in enumerate(self.queues):
            feats = ckpt.tensors.get(f"queue/{m}/features")
            if feats is not None:
                self.queues[m] = rggr.GalleryQueue.from_state(
                    q.dim, q.capacity, feats, ckpt.tensors[f"queue/{m}/labels"]
                )
        self.step = ckpt.step


def _epoch_summary(epoch, records):
    keys = ("l_total", "l_acc", "l_dl", "l_id", "l_tri", "l_kl", "l_np")
    out = {"epoch": epoch, "steps": len(records), "lr_last": records[-1]["lr"]}
    for k in keys:
        out[k] = float(np.mean([r[k] for r in records]))
    if "masked_rows" in records[-1]:
        out["masked_rows_mean"] = float(np.mean([r["masked_rows"] for r in records]))
    return out


def compactor_norms(model):
    return [np.linalg.norm(b.compactor.weight.data, axis=1).tolist() for b in model.blocks if b.compactor is not None]


def train_teacher(config, dataset, model_config, on_epoch_end=None):
    """Train a teacher with L_id + L_tri; returns (trainer, history)."""
    mcfg = N.ModelConfig.from_dict({**model_config.to_dict(), "with_compactors": False})
    model = N.build_model(mcfg, config.seed)
    trainer = Trainer(TrainConfig(**{**config.to_dict(), "mode": "teacher"}), dataset, model)
    history = trainer.run(on_epoch_end=on_epoch_end)
    return trainer, history


def make_student(config, model_config, teacher):
    """Fresh student for ``config.mode``; ``student_init='teacher'`` copies the teacher backbone."""
    mcfg = N.ModelConfig.from_dict({**model_config.to_dict(), "with_compactors": config.mode != "cdd_no_dgc"})
    student = N.build_model(mcfg, config.seed + 1)
    if config.student_init == "teacher":
        N.copy_backbone(teacher, student)
    return student


def distill(config, dataset, teacher, model_config, mask_log=None, on_epoch_end=None):
    """Distil ``teacher`` into a fresh student in ``config.mode``; returns (trainer, history)."""
    if config.mode == "teacher":
        raise ValueError("distill needs a student mode")
    student = make_student(config, model_config, teacher)
    trainer = Trainer(config, dataset, student, teacher, mask_log)
    history = trainer.run(on_epoch_end=on_epoch_end)
    return trainer, history
