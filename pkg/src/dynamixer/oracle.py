"""Loop-level reference implementations.

Everything here is written with explicit index loops over Python floats so
it shares no code path with the vectorized model. Weights are read from the
same containers (``DynaMixerOpWeights``, ``BlockWeights``, ``ModelWeights``)
but only as raw numbers. Slow by design; guards keep instances small.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dynamixer.config import GenKind
from dynamixer.errors import ConfigError, ContractError

MAX_OP_SIZE = 256  # N * D
MAX_FULL_SIZE = 256
LN_EPS = 1e-6


def param_formula(num_tokens, dim, reduced_dim, segments):
    """Scalar parameter count of one dynamic DynaMixer op."""
    n, d_model, d, s = num_tokens, dim, reduced_dim, segments
    if min(n, d_model, d, s) < 1:
        raise ConfigError("param_formula: all arguments must be >= 1")
    if d_model % s:
        raise ConfigError(f"param_formula: dim {d_model} not divisible by {s} segments")
    return s * d_model * d + n**3 * d + d_model * d_model


def _arr(t):
    return None if t is None else np.asarray(getattr(t, "data", t), dtype=np.float64)


@dataclass
class OracleInstance:
    x: np.ndarray
    out_fuse: np.ndarray
    segments: int
    reduced_dim: int = 1
    kind: GenKind = GenKind.DYNAMIC
    reduce: np.ndarray | None = None
    gen: np.ndarray | None = None
    dense: np.ndarray | None = None
    static: np.ndarray | None = None

    @property
    def num_tokens(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    @classmethod
    def from_weights(cls, x, w):
        return cls(
            x=_arr(x),
            out_fuse=_arr(w.out_fuse),
            segments=w.segments,
            reduced_dim=w.reduced_dim,
            kind=GenKind(w.kind),
            reduce=_arr(w.reduce),
            gen=_arr(w.gen),
            dense=_arr(w.dense),
            static=_arr(w.static),
        )


def _softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    total = math.fsum(e)
    return [v / total for v in e]


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def _guard(inst):
    if inst.num_tokens * inst.dim > MAX_OP_SIZE:
        raise ContractError(f"oracle instance too large: N*D = {inst.num_tokens * inst.dim} > {MAX_OP_SIZE}")
    if inst.dim % inst.segments:
        raise ConfigError(f"dim {inst.dim} not divisible by {inst.segments} segments")


def naive_mixing_matrices(inst: OracleInstance):
    """List of S mixing matrices, each an N x N nested list."""
    _guard(inst)
    n, dim, s_count, d = inst.num_tokens, inst.dim, inst.segments, inst.reduced_dim
    x = inst.x
    result = []
    for s in range(s_count):
        if inst.kind is GenKind.STATIC_RANDOM:
            result.append([[float(inst.static[i, j]) for j in range(n)] for i in range(n)])
            continue
        p = []
        if inst.kind is GenKind.DYNAMIC:
            flat = [0.0] * (n * d)
            for t in range(n):
                for k in range(d):
                    acc = 0.0
                    for c in range(dim):
                        acc += x[t, c] * inst.reduce[s, c, k]
                    flat[t * d + k] = acc
            for i in range(n):
                logits = []
                for j in range(n):
                    acc = 0.0
                    for q in range(n * d):
                        acc += flat[q] * inst.gen[q, i * n + j]
                    logits.append(acc)
                p.append(_softmax(logits))
        else:
            for i in range(n):
                logits = []
                for j in range(n):
                    acc = 0.0
                    for c in range(dim):
                        acc += x[i, c] * inst.dense[s, c, j]
                    logits.append(acc)
                p.append(_softmax(logits))
        result.append(p)
    return result


def naive_dynamixer_op(inst: OracleInstance):
    """Mix each channel segment with its matrix, concatenate, fuse. Returns (N, D)."""
    mats = naive_mixing_matrices(inst)
    n, dim, s_count = inst.num_tokens, inst.dim, inst.segments
    width = dim // s_count
    x = inst.x
    cat = [[0.0] * dim for _ in range(n)]
    for s in range(s_count):
        for i in range(n):
            for c in range(width):
                acc = 0.0
                for j in range(n):
                    acc += mats[s][i][j] * x[j, s * width + c]
                cat[i][s * width + c] = acc
    y = np.zeros((n, dim))
    for i in range(n):
        for e in range(dim):
            acc = 0.0
            for c in range(dim):
                acc += cat[i][c] * inst.out_fuse[c, e]
            y[i, e] = acc
    return y


def naive_full_matrix_op(x, w_full):
    """Un-reduced generator: row i of P is softmax(flat(X) @ w_full[i]).

    ``w_full`` has shape (N, N*D, N); ``flat`` is token-major.
    """
    x = _arr(x)
    w_full = _arr(w_full)
    n, dim = x.shape
    if n * dim > MAX_FULL_SIZE:
        raise ContractError(f"oracle instance too large: N*D = {n * dim} > {MAX_FULL_SIZE}")
    if w_full.shape != (n, n * dim, n):
        raise ContractError(f"w_full must be {(n, n * dim, n)}, got {w_full.shape}")
    flat = [x[t, c] for t in range(n) for c in range(dim)]
    p = []
    for i in range(n):
        logits = []
        for j in range(n):
            acc = 0.0
            for q in range(n * dim):
                acc += flat[q] * w_full[i, q, j]
            logits.append(acc)
        p.append(_softmax(logits))
    return np.array(p)


def _linear_tokens(rows, weight, bias):
    weight = _arr(weight)
    bias = _arr(bias)
    n_in, n_out = weight.shape
    out = []
    for v in rows:
        o = []
        for e in range(n_out):
            acc = 0.0 if bias is None else float(bias[e])
            for c in range(n_in):
                acc += v[c] * weight[c, e]
            o.append(acc)
        out.append(o)
    return out


def _layer_norm(v, gain, bias):
    gain, bias = _arr(gain), _arr(bias)
    n = len(v)
    mean = math.fsum(v) / n
    var = math.fsum((a - mean) ** 2 for a in v) / n
    inv = 1.0 / math.sqrt(var + LN_EPS)
    return [(v[c] - mean) * inv * gain[c] + bias[c] for c in range(n)]


def naive_block(x, w):
    """Row, column and channel mixing of one (H, W, D) grid with explicit loops."""
    x = _arr(x)
    h_count, w_count, dim = x.shape
    branches = []
    if w.row_op is not None:
        y_h = np.zeros_like(x)
        for h in range(h_count):
            y_h[h] = naive_dynamixer_op(OracleInstance.from_weights(x[h], w.row_op))
        branches.append(y_h)
    if w.col_op is not None:
        y_w = np.zeros_like(x)
        for c in range(w_count):
            y_w[:, c] = naive_dynamixer_op(OracleInstance.from_weights(x[:, c], w.col_op))
        branches.append(y_w)
    if w.proj_c is not None:
        rows = [list(x[h, c]) for h in range(h_count) for c in range(w_count)]
        y_c = np.array(_linear_tokens(rows, w.proj_c.weight, w.proj_c.bias)).reshape(x.shape)
        branches.append(y_c)

    combined = np.zeros_like(x)
    if w.reweight is None:
        for b in branches:
            for h in range(h_count):
                for c in range(w_count):
                    for e in range(dim):
                        combined[h, c, e] += b[h, c, e]
    else:
        alpha = naive_reweight_alpha(branches, w.reweight)
        for k, b in enumerate(branches):
            for h in range(h_count):
                for c in range(w_count):
                    for e in range(dim):
                        combined[h, c, e] += alpha[k][e] * b[h, c, e]
    rows = [list(combined[h, c]) for h in range(h_count) for c in range(w_count)]
    return np.array(_linear_tokens(rows, w.proj_o.weight, w.proj_o.bias)).reshape(x.shape)


def naive_reweight_alpha(branches, w):
    """Per-branch, per-channel fusion weights alpha[k][c]."""
    h_count, w_count, dim = branches[0].shape
    k_count = len(branches)
    pooled = []
    for e in range(dim):
        acc = 0.0
        for b in branches:
            for h in range(h_count):
                for c in range(w_count):
                    acc += b[h, c, e]
        pooled.append(acc / (h_count * w_count))
    hidden = [_gelu(v) for v in _linear_tokens([pooled], w.w1, None)[0]]
    logits = _linear_tokens([hidden], w.w2, None)[0]
    alpha = [[0.0] * dim for _ in range(k_count)]
    for e in range(dim):
        probs = _softmax([logits[k * dim + e] for k in range(k_count)])
        for k in range(k_count):
            alpha[k][e] = probs[k]
    return alpha


def naive_reweight(branches, w):
    alpha = naive_reweight_alpha(branches, w)
    out = np.zeros_like(branches[0])
    h_count, w_count, dim = out.shape
    for k, b in enumerate(branches):
        for h in range(h_count):
            for c in range(w_count):
                for e in range(dim):
                    out[h, c, e] += alpha[k][e] * b[h, c, e]
    return out


def _grid_apply(grid, fn):
    h_count, w_count, _ = grid.shape
    return np.array([[fn(list(grid[h, c])) for c in range(w_count)] for h in range(h_count)])


def naive_layer(x, w):
    """Eval-mode mixer layer on one (H, W, D) grid."""
    normed = _grid_apply(x, lambda v: _layer_norm(v, w.ln1.gain, w.ln1.bias))
    x = x + naive_block(normed, w.block)
    normed = _grid_apply(x, lambda v: _layer_norm(v, w.ln2.gain, w.ln2.bias))

    def channel_mlp(v):
        hidden = [_gelu(a) for a in _linear_tokens([v], w.mlp.fc1.weight, w.mlp.fc1.bias)[0]]
        return _linear_tokens([hidden], w.mlp.fc2.weight, w.mlp.fc2.bias)[0]

    return x + _grid_apply(normed, channel_mlp)


def naive_model_forward(image, weights, config):
    """Eval-mode logits for one image (C, H, W), as a 1-D array."""
    image = _arr(image)
    tokens = None
    for i, (stage_cfg, stage) in enumerate(zip(config.stages, weights.stages)):
        p = stage_cfg.patch_size
        if i == 0:
            chans, height, width = image.shape
            gh, gw = height // p, width // p
            rows = []
            for ti in range(gh):
                for tj in range(gw):
                    v = []
                    for c in range(chans):
                        for py in range(p):
                            for px in range(p):
                                v.append(image[c, ti * p + py, tj * p + px])
                    rows.append(v)
        else:
            gh, gw = tokens.shape[0] // p, tokens.shape[1] // p
            rows = []
            for ti in range(gh):
                for tj in range(gw):
                    v = []
                    for dy in range(p):
                        for dx in range(p):
                            v.extend(tokens[ti * p + dy, tj * p + dx])
                    rows.append(v)
        tokens = np.array(_linear_tokens(rows, stage.patch_embed.weight, stage.patch_embed.bias))
        tokens = tokens.reshape(gh, gw, -1)
        for layer in stage.layers:
            tokens = naive_layer(tokens, layer)
    normed = _grid_apply(tokens, lambda v: _layer_norm(v, weights.final_ln.gain, weights.final_ln.bias))
    h_count, w_count, dim = normed.shape
    pooled = [math.fsum(normed[h, c, e] for h in range(h_count) for c in range(w_count)) / (h_count * w_count)
              for e in range(dim)]
    return np.array(_linear_tokens([pooled], weights.head.weight, weights.head.bias)[0])


def central_difference(fn, arr, eps=1e-6):
    """Finite-difference gradient of scalar ``fn()`` with respect to every entry of ``arr``."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn()
        flat[i] = orig - eps
        f_minus = fn()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
