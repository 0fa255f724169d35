"""Compiled vs numpy row kernels, per kernel and for a whole tiny-model step.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes are taken from the models that actually run: the softmax rows of a
DynaMixer-S first-stage op (N = 32), and layer-norm / GELU rows at D = 192
and the 3D = 576 MLP width.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from dynamixer import kernels
from dynamixer.config import model_preset
from dynamixer.mixer import build_model, model_loss, parameters
from dynamixer.tensor import Graph


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    # (batch 8, 32 rows, 8 segments, 32 x 32 logits)
    logits = rng.standard_normal((8 * 32, 8, 32, 32)).astype(dtype)
    probs = kernels.softmax_lastdim(logits)
    g_probs = rng.standard_normal(probs.shape).astype(dtype)
    tokens = rng.standard_normal((8, 32, 32, 192)).astype(dtype)
    gain = np.ones(192, dtype)
    bias = np.zeros(192, dtype)
    _, xhat, rstd = kernels.layer_norm(tokens, gain, bias, 1e-6)
    hidden = rng.standard_normal((8, 32, 32, 576)).astype(dtype)
    return {
        "softmax": lambda: kernels.softmax_lastdim(logits),
        "softmax_backward": lambda: kernels.softmax_lastdim_backward(probs, g_probs),
        "layer_norm": lambda: kernels.layer_norm(tokens, gain, bias, 1e-6),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(tokens, xhat, rstd, gain),
        "gelu": lambda: kernels.gelu(hidden),
        "gelu_backward": lambda: kernels.gelu_backward(hidden, hidden),
    }


def model_step_case():
    config = model_preset("tiny")
    weights = build_model(config, seed=0, dtype=np.float64)
    for p in parameters(weights):
        p.requires_grad = True
    rng = np.random.default_rng(0)
    images = rng.standard_normal((64, 3, 32, 32))
    labels = rng.integers(0, 10, 64)

    def step():
        with Graph() as tape:
            loss, _ = model_loss(images, labels, weights, config, "train", np.random.default_rng(0))
        tape.backward(loss)

    return step


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--json", help="write results here")
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    results = []
    for dtype in (np.float32, np.float64):
        for name in kernel_cases(dtype):
            row = {"case": name, "dtype": np.dtype(dtype).name}
            for backend in backends:
                with kernels.use_backend(backend):
                    row[backend] = best_of(kernel_cases(dtype)[name], args.repeat)
            results.append(row)
    row = {"case": "tiny_train_step_b64", "dtype": "float64"}
    for backend in backends:
        with kernels.use_backend(backend):
            row[backend] = best_of(model_step_case(), args.repeat)
    results.append(row)

    header = f"{'case':<22}{'dtype':<9}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for row in results:
        line = f"{row['case']:<22}{row['dtype']:<9}" + "".join(f"{row[b] * 1e3:>12.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
