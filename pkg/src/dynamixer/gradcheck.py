"""Central-difference verification of reverse-mode gradients."""
from dataclasses import dataclass

import numpy as np

from dynamixer.errors import ContractError
from dynamixer.tensor import Graph

REL_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst_param: int
    worst_index: int
    analytic: float
    numeric: float


def _scalar(t):
    if t.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {t.shape}")
    return float(t.data.reshape(()))


def grad_check_detailed(f, params, eps=1e-6, n_samples=200, seed=0):
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` (Tensors with
    ``requires_grad``) by closure. Up to ``n_samples`` coordinates are drawn
    without replacement across all parameters; fewer parameters than that
    means every coordinate is checked.
    """
    params = list(params)
    with Graph() as tape:
        loss = f()
    _scalar(loss)
    for p in params:
        p.grad = None
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if n_samples >= total else np.sort(rng.choice(total, n_samples, replace=False))

    worst = GradCheckResult(0.0, len(picks), -1, -1, 0.0, 0.0)
    for flat in picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[pi])
        flat_view = params[pi].data.flat
        orig = flat_view[idx]
        flat_view[idx] = orig + eps
        f_plus = _scalar(f())
        flat_view[idx] = orig - eps
        f_minus = _scalar(f())
        flat_view[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[pi].reshape(-1)[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
        if rel > worst.max_rel_error or worst.worst_param < 0:
            worst = GradCheckResult(rel, len(picks), pi, idx, a, numeric)
    return worst


def grad_check(f, params, eps=1e-6, n_samples=200, seed=0):
    """Maximum relative error between tape and finite-difference gradients."""
    return grad_check_detailed(f, params, eps, n_samples, seed).max_rel_error


# Operating point for the end-to-end check. At the 0.02 init scale many
# gradients sit near 1e-10, where central differences are pure rounding
# noise; redrawing weights at 0.2 keeps every coordinate well above it
# without saturating the softmaxes.
E2E_WEIGHT_STD = 0.2
E2E_BATCH = 2
E2E_SAMPLES = 1000


def end_to_end_check(config, seed=0, eps=1e-4, n_samples=E2E_SAMPLES, batch=E2E_BATCH):
    """Gradcheck the full training loss (eval mode) of ``config`` w.r.t. every parameter.

    Needs 64-bit mode. Weights are redrawn at std 0.2 (gains at 1 + 0.2 N(0, 1)).
    """
    from dynamixer.mixer import build_model, model_loss, named_parameters
    from dynamixer.tensor import Tensor, is_64bit

    if not is_64bit():
        raise ContractError("gradcheck requires 64-bit mode")
    weights = build_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 0x6C])
    params = []
    for name, t in named_parameters(weights):
        noise = E2E_WEIGHT_STD * rng.standard_normal(t.shape)
        t.data = 1.0 + noise if name.endswith("gain") else noise
        t.requires_grad = True
        params.append(t)
    shape = (batch, config.in_chans, config.image_size, config.image_size)
    images = Tensor(rng.standard_normal(shape), dtype=np.float64)
    labels = rng.integers(0, config.num_classes, batch)
    return grad_check_detailed(lambda: model_loss(images, labels, weights, config)[0], params, eps,
                               n_samples, seed)
