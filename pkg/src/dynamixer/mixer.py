"""DynaMixer operation, block, layer and model.

Activations are channel-last: a token grid is ``(B, H, W, D)`` and the
DynaMixer op acts on any ``(..., N, D)`` tensor, mixing the ``N`` axis.

Parameter layout of one op (N tokens, D channels, S segments, reduced d):

    reduce   (S, D, d)      per-segment reduction, applied to all D channels
    gen      (N*d, N*N)     logit generator shared by all segments; row i of
                            the N x N logits is column block [i*N, (i+1)*N)
    out_fuse (D, D)         fusion after the segment outputs are concatenated

The reduced tokens of one segment are flattened token-major (token index
slow, reduced feature fast) before multiplying ``gen``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from dynamixer import ops
from dynamixer.config import GenKind, ModelConfig
from dynamixer.errors import ConfigError, DimensionError
from dynamixer.tensor import Tensor, get_default_dtype

INIT_STD = 0.02


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


@dataclass
class LayerNormWeights:
    gain: Tensor
    bias: Tensor

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias)


@dataclass
class DynaMixerOpWeights:
    kind: GenKind
    num_tokens: int
    dim: int
    segments: int
    reduced_dim: int
    reduce: Tensor | None = None
    gen: Tensor | None = None
    dense: Tensor | None = None
    static: Tensor | None = None
    out_fuse: Tensor | None = None


@dataclass
class ReweightWeights:
    w1: Tensor
    w2: Tensor


@dataclass
class BlockWeights:
    row_op: DynaMixerOpWeights | None = None
    col_op: DynaMixerOpWeights | None = None
    proj_c: Linear | None = None
    reweight: ReweightWeights | None = None
    proj_o: Linear | None = None


@dataclass
class MlpWeights:
    fc1: Linear
    fc2: Linear


@dataclass
class LayerWeights:
    ln1: LayerNormWeights
    block: BlockWeights
    ln2: LayerNormWeights
    mlp: MlpWeights


@dataclass
class StageWeights:
    patch_embed: Linear
    layers: list[LayerWeights] = field(default_factory=list)


@dataclass
class ModelWeights:
    """Parameter tree of a full model.

    :func:`named_parameters` walks it depth-first in field declaration order,
    e.g. ``stages.0.patch_embed.weight``, ``stages.0.layers.0.ln1.gain``,
    ``stages.0.layers.0.block.row_op.reduce`` ... ``final_ln.bias``,
    ``head.weight``, ``head.bias``. A row/column op shared by ablation is
    listed once, under ``row_op``.
    """

    stages: list[StageWeights]
    final_ln: LayerNormWeights
    head: Linear


def named_parameters(tree, prefix=""):
    """Yield ``(dotted_name, Tensor)`` in stable order, each tensor once."""
    seen = set()

    def walk(node, name):
        if node is None:
            return
        if isinstance(node, Tensor):
            if id(node) not in seen:
                seen.add(id(node))
                yield name, node
            return
        if isinstance(node, (list, tuple)):
            for i, child in enumerate(node):
                yield from walk(child, f"{name}.{i}" if name else str(i))
            return
        if is_dataclass(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for f in fields(node):
                yield from walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)

    yield from walk(tree, prefix)


def parameters(tree):
    return [t for _, t in named_parameters(tree)]


def count_parameters(tree):
    return sum(t.size for _, t in named_parameters(tree))


# -- initialization ---------------------------------------------------------


def _trunc_normal(rng, shape, std=INIT_STD):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class _Init:
    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype or get_default_dtype()

    def param(self, arr):
        return Tensor(np.ascontiguousarray(arr, dtype=self.dtype), requires_grad=True)

    def matrix(self, *shape):
        return self.param(_trunc_normal(self.rng, shape))

    def zeros(self, *shape):
        return self.param(np.zeros(shape))

    def ones(self, *shape):
        return self.param(np.ones(shape))

    def linear(self, n_in, n_out, bias=True):
        return Linear(self.matrix(n_in, n_out), self.zeros(n_out) if bias else None)

    def layer_norm(self, dim):
        return LayerNormWeights(self.ones(dim), self.zeros(dim))


def _build_op(init, kind, num_tokens, dim, segments, reduced_dim):
    kind = GenKind(kind)
    if segments < 1 or dim % segments:
        raise ConfigError(f"feature dim {dim} is not divisible by {segments} segments")
    n, s, d = num_tokens, segments, reduced_dim
    w = DynaMixerOpWeights(kind, n, dim, s, d)
    if kind is GenKind.DYNAMIC:
        w.reduce = init.matrix(s, dim, d)
        w.gen = init.matrix(n * d, n * n)
    elif kind is GenKind.DENSE_PER_TOKEN:
        w.dense = init.matrix(s, dim, n)
    else:
        # Raw mixing matrix: start near uniform mixing like the softmax kinds.
        w.static = init.param(1.0 / n + _trunc_normal(init.rng, (n, n)))
    w.out_fuse = init.matrix(dim, dim)
    return w


def build_op_weights(num_tokens, dim, segments, reduced_dim, kind=GenKind.DYNAMIC, seed=0, dtype=None):
    """Randomly initialized weights for a single DynaMixer op."""
    return _build_op(_Init(seed, dtype), kind, num_tokens, dim, segments, reduced_dim)


def _build_block(init, config, side, stage):
    dim = stage.hidden
    op = lambda: _build_op(init, config.gen_kind, side, dim, stage.segments, config.reduced_dim)  # noqa: E731
    block = BlockWeights()
    if not config.disable_row:
        block.row_op = op()
    if not config.disable_col:
        block.col_op = block.row_op if config.share_row_col_op else op()
    if not config.disable_channel:
        block.proj_c = init.linear(dim, dim)
    if not config.disable_reweight:
        k = len(config.branches)
        block.reweight = ReweightWeights(init.matrix(dim, dim // 4), init.matrix(dim // 4, k * dim))
    block.proj_o = init.linear(dim, dim)
    return block


def build_model(config: ModelConfig, seed=0, dtype=None) -> ModelWeights:
    """Initialize all weights: truncated normal (std 0.02) matrices, zero biases, unit gains."""
    config.validate()
    init = _Init(seed, dtype)
    stages = []
    in_features = config.in_chans
    for stage, side in zip(config.stages, config.grids):
        embed = init.linear(stage.patch_size * stage.patch_size * in_features, stage.hidden)
        layers = []
        for _ in range(stage.depth):
            hidden = config.mlp_ratio * stage.hidden
            layers.append(
                LayerWeights(
                    ln1=init.layer_norm(stage.hidden),
                    block=_build_block(init, config, side, stage),
                    ln2=init.layer_norm(stage.hidden),
                    mlp=MlpWeights(init.linear(stage.hidden, hidden), init.linear(hidden, stage.hidden)),
                )
            )
        stages.append(StageWeights(embed, layers))
        in_features = stage.hidden
    last = config.stages[-1].hidden
    return ModelWeights(stages, init.layer_norm(last), init.linear(last, config.num_classes))


# -- forward ----------------------------------------------------------------


def _check_tokens(x, w):
    if x.ndim < 2 or x.shape[-2:] != (w.num_tokens, w.dim):
        raise DimensionError(f"expected (..., {w.num_tokens}, {w.dim}) tokens, got {x.shape}")


def _mixing_logits_or_matrix(x, w):
    """Mixing matrices in a shape that broadcasts against (..., S, N, N)."""
    n, dim, s, d = w.num_tokens, w.dim, w.segments, w.reduced_dim
    lead = x.shape[:-2]
    if w.kind is GenKind.STATIC_RANDOM:
        return w.static
    if w.kind is GenKind.DYNAMIC:
        # (S, D, d) -> (D, S*d): all segment reductions in one GEMM.
        reduce = ops.reshape(ops.permute(w.reduce, (1, 0, 2)), (dim, s * d))
        xhat = ops.reshape(ops.matmul(x, reduce), lead + (n, s, d))
        xhat = ops.permute(xhat, tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))
        flat = ops.reshape(xhat, lead + (s, n * d))
        logits = ops.reshape(ops.matmul(flat, w.gen), lead + (s, n, n))
    else:
        dense = ops.reshape(ops.permute(w.dense, (1, 0, 2)), (dim, s * n))
        logits = ops.reshape(ops.matmul(x, dense), lead + (n, s, n))
        logits = ops.permute(logits, tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))
    return ops.softmax(logits, -1)


def generate_mixing_matrices(x, w: DynaMixerOpWeights):
    """Mixing matrices for tokens ``x`` (..., N, D): returns (..., S, N, N)."""
    _check_tokens(x, w)
    p = _mixing_logits_or_matrix(x, w)
    return ops.expand(p, x.shape[:-2] + (w.segments, w.num_tokens, w.num_tokens)) if p.ndim == 2 else p


def _op_forward(x, w):
    _check_tokens(x, w)
    n, dim, s = w.num_tokens, w.dim, w.segments
    lead = x.shape[:-2]
    nl = len(lead)
    p = _mixing_logits_or_matrix(x, w)
    seg = ops.permute(ops.reshape(x, lead + (n, s, dim // s)), tuple(range(nl)) + (nl + 1, nl, nl + 2))
    mixed = ops.matmul(p, seg)
    mixed = ops.reshape(ops.permute(mixed, tuple(range(nl)) + (nl + 1, nl, nl + 2)), lead + (n, dim))
    return ops.matmul(mixed, w.out_fuse), p


def dynamixer_op(x, w: DynaMixerOpWeights):
    """Mix the N tokens of ``x`` (..., N, D), segment by segment, then fuse channels."""
    return _op_forward(x, w)[0]


def reweight(branches, w: ReweightWeights):
    """Per-channel softmax fusion of the branch outputs, each (B, H, W, D)."""
    total = branches[0]
    for b in branches[1:]:
        total = ops.add(total, b)
    batch, dim = total.shape[0], total.shape[-1]
    k = len(branches)
    pooled = ops.mean(total, axis=(1, 2))
    hidden = ops.gelu(ops.matmul(pooled, w.w1))
    logits = ops.reshape(ops.matmul(hidden, w.w2), (batch, k, dim))
    alpha = ops.softmax(logits, axis=1)
    out = None
    for i, b in enumerate(branches):
        a = ops.reshape(ops.narrow(alpha, 1, i, 1), (batch, 1, 1, dim))
        term = ops.mul(b, a)
        out = term if out is None else ops.add(out, term)
    return out


def dynamixer_block(x, w: BlockWeights, capture=None):
    """Row, column and channel mixing of a (B, H, W, D) grid, fused and projected.

    ``capture``, when a dict, receives the row/column mixing matrices as
    numpy arrays under keys ``"row"`` (B, H, S, W, W) and ``"col"`` (B, W, S, H, H).
    """
    if x.ndim != 4:
        raise DimensionError(f"dynamixer_block expects (B, H, W, D), got {x.shape}")
    branches = []
    if w.row_op is not None:
        y_h, p = _op_forward(x, w.row_op)
        branches.append(y_h)
        if capture is not None:
            capture["row"] = np.broadcast_to(p.data, x.shape[:2] + (w.row_op.segments,) + p.shape[-2:])
    if w.col_op is not None:
        xt = ops.permute(x, (0, 2, 1, 3))
        y_w, p = _op_forward(xt, w.col_op)
        branches.append(ops.permute(y_w, (0, 2, 1, 3)))
        if capture is not None:
            capture["col"] = np.broadcast_to(p.data, xt.shape[:2] + (w.col_op.segments,) + p.shape[-2:])
    if w.proj_c is not None:
        branches.append(w.proj_c(x))
    if not branches:
        raise ConfigError("dynamixer_block: all mixing components are disabled")
    if w.reweight is not None:
        combined = reweight(branches, w.reweight)
    else:
        combined = branches[0]
        for b in branches[1:]:
            combined = ops.add(combined, b)
    return w.proj_o(combined)


def drop_path(y, rate, training, rng=None):
    """Zero the whole branch per sample with probability ``rate``; rescale survivors."""
    if not training or rate <= 0.0:
        return y
    if rate >= 1.0:
        return ops.scale(y, 0.0)
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(y.shape[0]) >= rate).astype(y.dtype) / (1.0 - rate)
    return ops.mul(y, Tensor(keep.reshape((y.shape[0],) + (1,) * (y.ndim - 1)), dtype=y.dtype))


def mlp(x, w: MlpWeights):
    return w.fc2(ops.gelu(w.fc1(x)))


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def mixer_layer(x, w: LayerWeights, drop_path_rate=0.0, mode="eval", rng=None, capture=None):
    """Pre-norm residual layer: token mixing block, then channel MLP."""
    training = _check_mode(mode)
    x = ops.add(x, drop_path(dynamixer_block(w.ln1(x), w.block, capture), drop_path_rate, training, rng))
    return ops.add(x, drop_path(mlp(w.ln2(x), w.mlp), drop_path_rate, training, rng))


def patchify(images, patch):
    """(B, C, H, W) -> (B, H/p, W/p, C*p*p), patch vector ordered (channel, row, col)."""
    b, c, h, w = images.shape
    x = ops.reshape(images, (b, c, h // patch, patch, w // patch, patch))
    x = ops.permute(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (b, h // patch, w // patch, c * patch * patch))


def merge_patches(tokens, patch):
    """(B, H, W, D) -> (B, H/p, W/p, p*p*D), neighbourhood ordered (row, col, channel)."""
    b, h, w, d = tokens.shape
    x = ops.reshape(tokens, (b, h // patch, patch, w // patch, patch, d))
    x = ops.permute(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, h // patch, w // patch, patch * patch * d))


def model_forward(images, weights: ModelWeights, config: ModelConfig, mode="eval", rng=None, capture=None):
    """Logits (B, num_classes) for images (B, C, H, W).

    ``capture``, when a dict, maps ``(layer_index, "row"|"col")`` to the
    mixing matrices of that layer (global layer index across stages).
    """
    training = _check_mode(mode)
    images = ops.as_tensor(images)
    expected = (config.in_chans, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"input images must be (B, {', '.join(map(str, expected))}), got {images.shape}")
    rates = config.drop_path_rates()
    layer_index = 0
    x = None
    for i, (stage_cfg, stage) in enumerate(zip(config.stages, weights.stages)):
        patches = patchify(images, stage_cfg.patch_size) if i == 0 else merge_patches(x, stage_cfg.patch_size)
        x = stage.patch_embed(patches)
        for layer in stage.layers:
            layer_capture = {} if capture is not None else None
            x = mixer_layer(x, layer, rates[layer_index], mode, rng if training else None, layer_capture)
            if capture is not None:
                for direction, p in layer_capture.items():
                    capture[(layer_index, direction)] = p
            layer_index += 1
    x = weights.final_ln(x)
    pooled = ops.mean(x, axis=(1, 2))
    return weights.head(pooled)


def model_loss(images, labels, weights, config, mode="eval", rng=None, label_smoothing=0.0):
    logits = model_forward(images, weights, config, mode, rng)
    return ops.cross_entropy(logits, labels, label_smoothing), logits
