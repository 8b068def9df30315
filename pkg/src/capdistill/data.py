"""Seeded synthetic identity-retrieval dataset and PK batch sampling.

Each identity is a procedural prototype: a background colour plus a few
coloured rectangles, discs and stripe patches. Samples add a colour shift,
a small translation and pixel noise, all scaled by ``jitter``.

Splits follow the open-set protocol: training identities are disjoint from
evaluation identities, and every evaluation identity contributes disjoint
images to both the query and the gallery set.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

TRAIN, QUERY, GALLERY = 0, 1, 2
TRAIN_OPS = ("crop", "flip", "normalize", "erase")
EVAL_OPS = ("normalize",)


@dataclass
class DatasetSpec:
    num_identities: int = 32
    images_per_identity: int = 20
    channels: int = 3
    height: int = 32
    width: int = 32
    jitter: float = 1.0
    seed: int = 0
    train_fraction: float = 0.5
    query_fraction: float = 0.25
    gallery_fraction: float = 0.25
    augmentations: tuple = TRAIN_OPS

    def __post_init__(self):
        self.augmentations = tuple(self.augmentations)
        bad = [op for op in self.augmentations if op not in TRAIN_OPS]
        if bad:
            raise ValueError(f"unknown augmentation(s) {bad}; choose from {TRAIN_OPS}")
        total = self.train_fraction + self.query_fraction + self.gallery_fraction
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if min(self.train_fraction, self.query_fraction, self.gallery_fraction) <= 0:
            raise ValueError("every split fraction must be positive")
        if self.num_identities < 2 or self.images_per_identity < 2:
            raise ValueError("need at least 2 identities with 2 images each")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    spec: DatasetSpec
    images: np.ndarray  # [N, C, H, W], values roughly in [0, 1]
    labels: np.ndarray  # identity index, global
    split: np.ndarray  # TRAIN / QUERY / GALLERY

    def subset(self, which):
        idx = np.flatnonzero(self.split == which)
        return self.images[idx], self.labels[idx]

    @property
    def train_identities(self):
        return np.unique(self.labels[self.split == TRAIN])

    @property
    def eval_identities(self):
        return np.unique(self.labels[self.split != TRAIN])

    def train_label_map(self):
        """Global identity -> contiguous classifier index."""
        return {int(g): i for i, g in enumerate(self.train_identities)}


def _render_prototype(rng, c, h, w):
    img = np.empty((c, h, w))
    img[:] = rng.uniform(0.0, 1.0, size=(c, 1, 1))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 5)):
        colour = rng.uniform(0.0, 1.0, size=(c, 1, 1))
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        if kind == 0:
            hh, ww = rng.uniform(0.15, 0.45) * h, rng.uniform(0.15, 0.45) * w
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        elif kind == 1:
            r = rng.uniform(0.1, 0.25) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            period = rng.integers(3, 7)
            theta = rng.uniform(0, np.pi)
            phase = (np.cos(theta) * yy + np.sin(theta) * xx) % period
            r = rng.uniform(0.2, 0.35) * min(h, w)
            mask = (phase < period / 2) & ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r)
        img = np.where(mask[None], colour, img)
    return img


def _jitter_sample(proto, rng, level):
    if level == 0:
        return proto.copy()
    c = proto.shape[0]
    # colour shift: near-identity channel mix plus offset
    mix = np.eye(c) + rng.normal(0.0, 0.05 * level, size=(c, c))
    img = np.tensordot(mix, proto, axes=1) + rng.normal(0.0, 0.05 * level, size=(c, 1, 1))
    shift = int(round(2 * level))
    if shift:
        dy, dx = rng.integers(-shift, shift + 1, size=2)
        img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
    img = img + rng.normal(0.0, 0.05 * level, size=img.shape)
    return img


def generate(spec):
    """Build the dataset; identical specs give bit-identical output."""
    n_ids, per = spec.num_identities, spec.images_per_identity
    images = np.empty((n_ids * per, spec.channels, spec.height, spec.width))
    labels = np.repeat(np.arange(n_ids), per)
    for i in range(n_ids):
        proto = _render_prototype(np.random.default_rng([spec.seed, i]), spec.channels, spec.height, spec.width)
        for j in range(per):
            rng = np.random.default_rng([spec.seed, i, j, 1])
            images[i * per + j] = _jitter_sample(proto, rng, spec.jitter)

    order = np.random.default_rng([spec.seed, 7]).permutation(n_ids)
    n_train = int(round(spec.train_fraction * n_ids))
    if not 1 <= n_train < n_ids:
        raise ValueError("split leaves no training or no evaluation identities")
    train_ids = set(order[:n_train].tolist())
    q_share = spec.query_fraction / (spec.query_fraction + spec.gallery_fraction)
    n_query = min(max(1, int(round(q_share * per))), per - 1)
    split = np.empty(n_ids * per, dtype=np.int64)
    for i in range(n_ids):
        rows = slice(i * per, (i + 1) * per)
        if i in train_ids:
            split[rows] = TRAIN
        else:
            split[rows] = GALLERY
            split[i * per : i * per + n_query] = QUERY
    return Dataset(spec, images, labels, split)


# --- augmentation -------------------------------------------------------------
def zscore(img, eps=1e-5):
    """Whole-image standardization; the eps floor keeps constant images finite."""
    return (img - img.mean()) / np.sqrt(img.var() + eps)


def hflip(img):
    return img[..., ::-1].copy()


def random_crop(img, rng, pad=2):
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    y, x = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, y : y + h, x : x + w].copy()


def erase(img, top, left, height, width, value=0.0):
    out = img.copy()
    out[:, top : top + height, left : left + width] = value
    return out


def random_erase(img, rng, prob=0.5, area=(0.02, 0.2), aspect=(0.3, 3.3)):
    if rng.uniform() >= prob:
        return img
    _, h, w = img.shape
    target = rng.uniform(*area) * h * w
    ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
    eh = min(h, max(1, int(round(math.sqrt(target * ratio)))))
    ew = min(w, max(1, int(round(math.sqrt(target / ratio)))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    return erase(img, top, left, eh, ew, 0.0)


def augment(image, ops, rng):
    """Apply ``ops`` (names from TRAIN_OPS) in order with generator ``rng``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    img = image
    for op in ops:
        if op == "crop":
            img = random_crop(img, rng)
        elif op == "flip":
            if rng.uniform() < 0.5:
                img = hflip(img)
        elif op == "normalize":
            img = zscore(img)
        elif op == "erase":
            img = random_erase(img, rng)
        else:
            raise ValueError(f"unknown augmentation {op!r}")
    return img


def prepare(images, ops=EVAL_OPS, rng=None):
    return np.stack([augment(im, ops, rng) for im in images]) if len(images) else images


# --- sampling -----------------------------------------------------------------
def pk_batches(dataset, P, S, seed, epoch=0):
    """Deterministic list of batches (arrays of dataset row indices), P identities x S images.

    Each round shuffles the training identities into groups of P (the last
    group is topped up with other identities); each identity walks through a
    per-epoch shuffle of its images. An epoch has ceil(max_images / S) rounds.
    """
    train_rows = np.flatnonzero(dataset.split == TRAIN)
    ids = np.unique(dataset.labels[train_rows])
    if P < 2 or S < 2:
        raise ValueError("P and S must both be >= 2")
    if len(ids) < P:
        raise ValueError(f"need at least P={P} training identities, have {len(ids)}")
    pools = {int(i): train_rows[dataset.labels[train_rows] == i] for i in ids}
    short = [i for i, rows in pools.items() if len(rows) < S]
    if short:
        raise ValueError(f"identities {short} have fewer than S={S} training images")
    rng = np.random.default_rng([seed, epoch, 11])
    order = {i: rng.permutation(rows) for i, rows in pools.items()}
    cursor = {i: 0 for i in pools}
    rounds = math.ceil(max(len(r) for r in pools.values()) / S)
    batches = []
    for _ in range(rounds):
        perm = [int(i) for i in rng.permutation(ids)]
        groups = [perm[k : k + P] for k in range(0, len(perm), P)]
        if len(groups[-1]) < P:
            last = groups[-1]
            others = [i for i in perm if i not in last]
            last.extend(int(i) for i in rng.choice(others, size=P - len(last), replace=False))
        for group in groups:
            rows = []
            for i in group:
                pool = order[i]
                take = [pool[(cursor[i] + t) % len(pool)] for t in range(S)]
                cursor[i] = (cursor[i] + S) % len(pool)
                rows.extend(take)
            batches.append(np.array(rows, dtype=np.int64))
    return batches


def to_checkpoint(dataset):
    from capdistill.checkpoint import Checkpoint

    return Checkpoint(
        {"images": dataset.images, "labels": dataset.labels.astype(np.float64), "split": dataset.split.astype(np.float64)},
        config=dataset.spec.to_dict(),
        meta={"kind": "dataset"},
    )


def from_checkpoint(ckpt):
    t = ckpt.tensors
    return Dataset(DatasetSpec(**ckpt.config), t["images"], t["labels"].astype(np.int64), t["split"].astype(np.int64))
