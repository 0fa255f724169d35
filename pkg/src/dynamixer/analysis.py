"""Closed-form parameter and MAC accounting, plus a throughput benchmark.

Counts come from the configuration alone; no weights are built. One
multiply-accumulate counts as one FLOP and only matrix products are counted
(softmax, normalization, activations and pooling are free), which is the
convention of the common vision-MLP FLOP counters.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from dynamixer.config import GenKind, ModelConfig
from dynamixer.oracle import param_formula


@dataclass
class CapacityRow:
    component: str
    params: int
    macs: int


@dataclass
class CapacityReport:
    rows: list[CapacityRow] = field(default_factory=list)

    def add(self, component, params, macs):
        self.rows.append(CapacityRow(component, int(params), int(macs)))

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.rows)

    def row(self, component):
        for r in self.rows:
            if r.component == component:
                return r
        raise KeyError(component)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["component", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.component, r.params, r.macs])
        writer.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_json(self):
        doc = {
            "rows": [asdict(r) for r in self.rows],
            "total": {"params": self.total_params, "macs": self.total_macs},
        }
        return json.dumps(doc, indent=2)


def op_params(kind, num_tokens, dim, segments, reduced_dim):
    kind = GenKind(kind)
    if kind is GenKind.DYNAMIC:
        return param_formula(num_tokens, dim, reduced_dim, segments)
    if kind is GenKind.DENSE_PER_TOKEN:
        return segments * dim * num_tokens + dim * dim
    return num_tokens * num_tokens + dim * dim


def op_macs(kind, num_tokens, dim, segments, reduced_dim):
    """MACs of one op call on a single line of ``num_tokens`` tokens."""
    n, s, d = num_tokens, segments, reduced_dim
    kind = GenKind(kind)
    mix = n * n * dim + n * dim * dim
    if kind is GenKind.DYNAMIC:
        return n * dim * s * d + s * (n * d) * (n * n) + mix
    if kind is GenKind.DENSE_PER_TOKEN:
        return n * dim * s * n + mix
    return mix


def _linear(n_in, n_out, bias=True):
    return n_in * n_out + (n_out if bias else 0)


def capacity(config: ModelConfig) -> CapacityReport:
    """Per-component parameter and per-image MAC counts, aggregated per stage."""
    config.validate()
    report = CapacityReport()
    in_features = config.in_chans
    k = len(config.branches)
    for i, (stage, side) in enumerate(zip(config.stages, config.grids), start=1):
        dim, depth = stage.hidden, stage.depth
        tokens = side * side
        patch_in = stage.patch_size * stage.patch_size * in_features
        report.add(f"stage{i}.patch_embed", _linear(patch_in, dim), tokens * patch_in * dim)

        op_p = op_params(config.gen_kind, side, dim, stage.segments, config.reduced_dim)
        op_m = side * op_macs(config.gen_kind, side, dim, stage.segments, config.reduced_dim)
        if not config.disable_row:
            report.add(f"stage{i}.row_mix", depth * op_p, depth * op_m)
        if not config.disable_col:
            shared = config.share_row_col_op
            report.add(f"stage{i}.col_mix", 0 if shared else depth * op_p, depth * op_m)
        if not config.disable_channel:
            report.add(f"stage{i}.channel_mix", depth * _linear(dim, dim), depth * tokens * dim * dim)
        if not config.disable_reweight:
            rw = dim * (dim // 4) + (dim // 4) * k * dim
            report.add(f"stage{i}.reweight", depth * rw, depth * rw)
        report.add(f"stage{i}.proj_o", depth * _linear(dim, dim), depth * tokens * dim * dim)
        report.add(f"stage{i}.norms", depth * 2 * 2 * dim, 0)
        hidden = config.mlp_ratio * dim
        report.add(
            f"stage{i}.channel_mlp",
            depth * (_linear(dim, hidden) + _linear(hidden, dim)),
            depth * tokens * 2 * dim * hidden,
        )
        in_features = dim
    last = config.stages[-1].hidden
    report.add("final_norm", 2 * last, 0)
    report.add("head", _linear(last, config.num_classes), last * config.num_classes)
    return report


def count_params(config: ModelConfig) -> CapacityReport:
    """Capacity report; read ``.total_params`` for the parameter count."""
    return capacity(config)


def count_flops(config: ModelConfig) -> CapacityReport:
    """Capacity report; read ``.total_macs`` for the per-image FLOP count."""
    return capacity(config)


@dataclass
class ThroughputResult:
    mean: float
    std: float
    windows: list[float]
    batch_size: int
    backend: str


def bench_throughput(config, batch_size=32, duration=5.0, n_windows=5, seed=0, dtype=np.float32, weights=None):
    """Steady-state eval-mode images/s, measured over ``n_windows`` windows after one warmup pass."""
    from dynamixer import kernels
    from dynamixer.mixer import build_model, model_forward

    if weights is None:
        weights = build_model(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((batch_size, config.in_chans, config.image_size, config.image_size)).astype(dtype)
    model_forward(images, weights, config)
    window = duration / max(n_windows, 1)
    rates = []
    for _ in range(max(n_windows, 5)):
        count = 0
        start = time.perf_counter()
        while True:
            model_forward(images, weights, config)
            count += batch_size
            elapsed = time.perf_counter() - start
            if elapsed >= window:
                break
        rates.append(count / elapsed)
    return ThroughputResult(float(np.mean(rates)), float(np.std(rates)), rates, batch_size, kernels.backend)
