"""Desk-scale training: AdamW, warmup + cosine schedule, metrics and checkpoints."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from dynamixer.checkpoint import OptimizerState, load_checkpoint, save_checkpoint
from dynamixer.config import ModelConfig, TrainConfig
from dynamixer.data import iterate_batches
from dynamixer.errors import NumericError
from dynamixer.mixer import build_model, model_forward, model_loss, named_parameters
from dynamixer.tensor import Graph

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EVAL_BATCH = 256
TRAIN_EVAL_LIMIT = 10000
METRIC_FIELDS = ("epoch", "step", "lr", "train_loss", "val_top1", "train_top1")


class NumericAbort(NumericError):
    """Training hit a non-finite loss; ``checkpoint`` is the last good save (or None)."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def decays(name, tensor):
    """Weight decay applies to matrices only, never to biases or norm gains."""
    last = name.rsplit(".", 1)[-1]
    return tensor.ndim >= 2 and last not in ("bias", "gain")


def init_optimizer(named):
    return OptimizerState(
        step=0,
        m={name: np.zeros_like(t.data) for name, t in named},
        v={name: np.zeros_like(t.data) for name, t in named},
    )


def adamw_step(named, grads, state, lr, weight_decay, betas=BETAS, eps=ADAM_EPS):
    """One AdamW update in place. ``grads`` maps parameter name to gradient array."""
    for name, t in named:
        g = grads[name]
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in named:
        g = grads[name]
        if weight_decay and decays(name, t):
            t.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def warmup_steps(cfg: TrainConfig, steps_per_epoch):
    return int(round(cfg.warmup_epochs * steps_per_epoch))


def lr_schedule(step, total_steps, cfg: TrainConfig, steps_per_epoch):
    """Linear warmup from ``warmup_start_lr`` to ``base_lr``, then cosine decay to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = warmup_steps(cfg, steps_per_epoch)
    if step < warm:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step / warm
    span = total_steps - 1 - warm
    if span <= 0:
        return cfg.base_lr
    progress = (step - warm) / span
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


def predict(weights, config, images, batch_size=EVAL_BATCH):
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits = model_forward(images[start:start + batch_size], weights, config, mode="eval")
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def accuracy(weights, config, dataset, batch_size=EVAL_BATCH):
    return float(np.mean(predict(weights, config, dataset.images, batch_size) == dataset.labels))


def evaluate(checkpoint, dataset, batch_size=EVAL_BATCH):
    """Eval-mode top-1 accuracy of a checkpoint (path or loaded) on ``dataset``."""
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    return accuracy(ckpt.weights, ckpt.config, dataset, batch_size)


@dataclass
class TrainResult:
    weights: object
    optimizer: OptimizerState
    metrics: list = field(default_factory=list)
    checkpoint: str | None = None
    metrics_path: str | None = None

    @property
    def final_val_top1(self):
        return next(r["val_top1"] for r in reversed(self.metrics) if r["val_top1"] != "")

    @property
    def final_train_top1(self):
        return next(r["train_top1"] for r in reversed(self.metrics) if r["train_top1"] != "")


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_ds, val_ds, out_dir=None, augment=False,
          workers=0, dtype=None, log=None):
    """Train from scratch; returns weights, optimizer state and per-step metrics.

    One metrics row per optimizer step; ``val_top1`` and ``train_top1``
    (eval mode, first 10k training images) are filled on the last step of
    each epoch. With ``out_dir`` the metrics CSV and checkpoints are written
    there (``checkpoint_dir`` in the config overrides the checkpoint path).
    """
    model_cfg.validate()
    train_cfg.validate()
    weights = build_model(model_cfg, seed=train_cfg.seed, dtype=dtype)
    named = list(named_parameters(weights))
    opt = init_optimizer(named)
    drop_rng = np.random.default_rng([train_cfg.seed, 0xD209])

    steps_per_epoch = math.ceil(len(train_ds) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)

    ckpt_dir = train_cfg.checkpoint_dir or (os.path.join(out_dir, "checkpoints") if out_dir else None)
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    train_probe = train_ds.subset(slice(0, TRAIN_EVAL_LIMIT))

    rows, last_ckpt, step = [], None, 0
    for epoch in range(train_cfg.epochs):
        batches = iterate_batches(train_ds, train_cfg.batch_size, epoch, train_cfg.seed,
                                  shuffle=True, augment=augment, workers=workers)
        for images, labels in batches:
            if step >= total_steps:
                break
            lr = lr_schedule(step, total_steps, train_cfg, steps_per_epoch)
            with Graph() as tape:
                loss, _ = model_loss(images, labels, weights, model_cfg, "train", drop_rng,
                                     train_cfg.label_smoothing)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                if metrics_path:
                    write_metrics(metrics_path, rows)
                raise NumericAbort(f"non-finite loss at step {step}", last_ckpt)
            tape.backward(loss)
            adamw_step(named, {name: t.grad for name, t in named}, opt, lr, train_cfg.weight_decay)
            rows.append({"epoch": epoch, "step": step, "lr": lr, "train_loss": loss_value,
                         "val_top1": "", "train_top1": ""})
            step += 1
        if rows and rows[-1]["epoch"] == epoch:
            rows[-1]["val_top1"] = accuracy(weights, model_cfg, val_ds)
            rows[-1]["train_top1"] = accuracy(weights, model_cfg, train_probe)
            if log:
                r = rows[-1]
                log(f"epoch {epoch} step {r['step']} loss {r['train_loss']:.4f} "
                    f"train_top1 {r['train_top1']:.4f} val_top1 {r['val_top1']:.4f}")
        finished = step >= total_steps or epoch == train_cfg.epochs - 1
        if ckpt_dir and ((epoch + 1) % train_cfg.checkpoint_every == 0 or finished):
            name = "final.ckpt" if finished else f"epoch_{epoch + 1:03d}.ckpt"
            last_ckpt = save_checkpoint(os.path.join(ckpt_dir, name), weights, model_cfg, train_cfg, opt,
                                        {"epoch": epoch, "step": step})
        if finished:
            break
    if metrics_path:
        write_metrics(metrics_path, rows)
    return TrainResult(weights, opt, rows, last_ckpt, metrics_path)
