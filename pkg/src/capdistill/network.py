"""MiniResNet teacher / compactor-equipped student with per-block feature taps.

Block layout (the tap point is marked with ``*``)::

    x -> conv3x3 -> norm -> [compactor] * -> relu -> conv1x1 -> (+ shortcut) -> relu

Stages after the first open with a 2x2 average pool, so every convolution
runs at stride 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from capdistill import tensor as T
from capdistill.tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 32
    stem_width: int = 16
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    embedding_dim: int = 64
    num_classes: int = 16
    with_compactors: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ValueError("at least one stage is required")
        if any(w <= 0 for w in self.widths) or self.stem_width <= 0:
            raise ValueError(f"stage widths must be positive, got stem={self.stem_width} widths={self.widths}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.embedding_dim <= 0 or self.num_classes <= 0 or self.in_channels <= 0:
            raise ValueError("embedding_dim, num_classes and in_channels must be positive")
        if self.image_size % (2 ** (len(self.widths) - 1)):
            raise ValueError(f"image_size {self.image_size} is not divisible by the pooling factor")

    @property
    def num_blocks(self):
        return len(self.widths) * self.blocks_per_stage

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid conv extents: {self}")
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")


class Conv:
    def __init__(self, spec, weight, bias=None):
        self.spec = spec
        self.weight = weight
        self.bias = bias

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)

    def params(self, prefix):
        out = [(prefix + ".weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + ".bias", self.bias))
        return out


class AffineNorm:
    """Batch normalization: batch statistics in train mode, running statistics in eval mode."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, train, update_stats=True):
        if train:
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            if update_stats:
                count = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var * count / max(count - 1, 1)
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mu
                self.running_var = (1.0 - m) * self.running_var + m * unbiased
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = self.gamma * inv
        shift = self.beta - self.gamma * (self.running_mean * inv)
        return T.channel_affine(x, scale, shift)

    def params(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def buffers(self, prefix):
        return [(prefix + ".running_mean", "running_mean"), (prefix + ".running_var", "running_var")]


class Compactor:
    """Bias-free D x D channel mixer, identity-initialized."""

    def __init__(self, channels):
        self.weight = Tensor(np.eye(channels), requires_grad=True)

    def __call__(self, x):
        return T.channel_mix(x, self.weight)


class Linear:
    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def params(self, prefix):
        out = [(prefix + ".weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + ".bias", self.bias))
        return out


@dataclass
class ResidualBlock:
    conv3: Conv
    norm: AffineNorm | None
    compactor: Compactor | None
    conv1: Conv
    proj: Conv | None = None
    pool: int = 1

    @property
    def out_channels(self):
        return self.conv1.spec.out_channels

    @property
    def mid_channels(self):
        return self.conv3.spec.out_channels


@dataclass
class ForwardResult:
    embedding: Tensor
    logits: Tensor
    block_features: list
    tap_maps: list = field(default_factory=list)


class Model:
    def __init__(self, config, stem_conv, stem_norm, blocks, embed, classifier):
        self.config = config
        self.stem_conv = stem_conv
        self.stem_norm = stem_norm
        self.blocks = blocks
        self.embed = embed
        self.classifier = classifier

    @property
    def has_compactors(self):
        return any(b.compactor is not None for b in self.blocks)

    @property
    def is_slim(self):
        return any(b.norm is None for b in self.blocks)

    def named_parameters(self):
        out = self.stem_conv.params("stem.conv") + self.stem_norm.params("stem.norm")
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}"
            out += b.conv3.params(p + ".conv3")
            if b.norm is not None:
                out += b.norm.params(p + ".norm")
            if b.compactor is not None:
                out.append((p + ".compactor.weight", b.compactor.weight))
            out += b.conv1.params(p + ".conv1")
            if b.proj is not None:
                out += b.proj.params(p + ".proj")
        out += self.embed.params("embed") + self.classifier.params("classifier")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def _norms(self):
        yield "stem.norm", self.stem_norm
        for i, b in enumerate(self.blocks):
            if b.norm is not None:
                yield f"blocks.{i}.norm", b.norm

    def named_buffers(self):
        out = []
        for prefix, norm in self._norms():
            out.append((prefix + ".running_mean", norm.running_mean))
            out.append((prefix + ".running_var", norm.running_var))
        return out

    def state_dict(self):
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()
        for prefix, norm in self._norms():
            for attr in ("running_mean", "running_var"):
                arr = np.asarray(state[f"{prefix}.{attr}"], dtype=np.float64)
                if arr.shape != getattr(norm, attr).shape:
                    raise ShapeError(f"buffer {prefix}.{attr}: shape {arr.shape} mismatch")
                setattr(norm, attr, arr.copy())

    def compactors(self):
        return [b.compactor for b in self.blocks if b.compactor is not None]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __call__(self, x, train=False, update_stats=True):
        return forward_with_taps(self, x, "train" if train else "eval", update_stats=update_stats)


def _kaiming(rng, shape, fan_in):
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def build_model(config, seed):
    """Deterministically initialize a model from ``seed``.

    Compactors do not draw from the generator, so a teacher and a student built
    from the same seed share every other parameter bit-for-bit.
    """
    rng = np.random.default_rng(seed)
    cin = config.in_channels
    stem_spec = ConvSpec(cin, config.stem_width, 3, padding=1)
    stem_conv = Conv(stem_spec, _kaiming(rng, (config.stem_width, cin, 3, 3), cin * 9))
    stem_norm = AffineNorm(config.stem_width)

    blocks = []
    c = config.stem_width
    for s, width in enumerate(config.widths):
        for b in range(config.blocks_per_stage):
            pool = 2 if (s > 0 and b == 0) else 1
            conv3 = Conv(ConvSpec(c, width, 3, padding=1), _kaiming(rng, (width, c, 3, 3), c * 9))
            norm = AffineNorm(width)
            conv1_w = _kaiming(rng, (width, width, 1, 1), width)
            conv1 = Conv(ConvSpec(width, width, 1, has_bias=True), conv1_w, Tensor(np.zeros(width), requires_grad=True))
            proj = None
            if c != width:
                proj = Conv(ConvSpec(c, width, 1), _kaiming(rng, (width, c, 1, 1), c))
            compactor = Compactor(width) if config.with_compactors else None
            blocks.append(ResidualBlock(conv3, norm, compactor, conv1, proj, pool))
            c = width

    emb = config.embedding_dim
    embed = Linear(
        Tensor(rng.standard_normal((emb, c)) * np.sqrt(1.0 / c), requires_grad=True),
        Tensor(np.zeros(emb), requires_grad=True),
    )
    classifier = Linear(Tensor(rng.standard_normal((config.num_classes, emb)) * 0.01, requires_grad=True))
    return Model(config, stem_conv, stem_norm, blocks, embed, classifier)


def block_forward(block, x, train, update_stats=True):
    """Run one residual block; returns (output, tap map)."""
    if block.pool > 1:
        x = T.avg_pool2d(x, block.pool)
    h = block.conv3(x)
    if block.norm is not None:
        h = block.norm(h, train, update_stats)
    if block.compactor is not None:
        h = block.compactor(h)
    tap = h
    h = block.conv1(T.relu(h))
    shortcut = block.proj(x) if block.proj is not None else x
    return T.relu(h + shortcut), tap


def forward_with_taps(model, batch, mode="eval", update_stats=True):
    """Forward pass returning embedding, logits and the GAP feature of every block tap."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"batch shape {batch.shape} does not match model input (N, {expected})")
    train = mode == "train"
    h = T.relu(model.stem_norm(model.stem_conv(batch), train, update_stats))
    feats, maps = [], []
    for block in model.blocks:
        h, tap = block_forward(block, h, train, update_stats)
        maps.append(tap)
        feats.append(T.gap(tap))
    pooled = T.gap(h)
    embedding = model.embed(pooled)
    logits = model.classifier(embedding)
    return ForwardResult(embedding, logits, feats, maps)


def copy_backbone(src, dst):
    """Copy every parameter/buffer that ``dst`` shares with ``src`` (by name)."""
    src_state = src.state_dict()
    dst_params = dict(dst.named_parameters())
    for name, t in dst_params.items():
        if name in src_state and src_state[name].shape == t.shape:
            t.data = src_state[name].copy()
    for prefix, norm in dst._norms():
        for attr in ("running_mean", "running_var"):
            key = f"{prefix}.{attr}"
            if key in src_state:
                setattr(norm, attr, src_state[key].copy())
