"""Datasets: CIFAR-10 binary batches, a synthetic separable corpus, batching."""
from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass

import numpy as np

from dynamixer.config import CIFAR10_MEAN, CIFAR10_STD
from dynamixer.errors import DataFormatError

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_PER_FILE = 10000


@dataclass
class Dataset:
    images: np.ndarray  # (B, C, H, W), already normalized
    labels: np.ndarray  # (B,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index):
        return Dataset(self.images[index], self.labels[index], self.split, self.num_classes)


def read_cifar_file(path, expected_records=None):
    """Raw ``(uint8 images (n, 3, 32, 32), labels (n,))`` from one binary batch."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"CIFAR-10 file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    n = raw.size // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DataFormatError(f"{path}: expected {expected_records} records, found {n}")
    records = raw.reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    return records[:, 1:].reshape(n, 3, 32, 32), labels


def normalize(pixels, mean, std, dtype=np.float64):
    x = pixels.astype(dtype) / 255.0
    mean = np.asarray(mean, dtype=dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=dtype).reshape(1, -1, 1, 1)
    return (x - mean) / std


def load_cifar10(directory, mean=CIFAR10_MEAN, std=CIFAR10_STD, dtype=np.float64, records_per_file=CIFAR_PER_FILE):
    """Train (50k) and val (10k) splits from the standard binary distribution."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    parts = [read_cifar_file(os.path.join(directory, name), records_per_file) for name in CIFAR_TRAIN_FILES]
    train_px = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    val_px, val_y = read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE), records_per_file)
    return (
        Dataset(normalize(train_px, mean, std, dtype), train_y, "train"),
        Dataset(normalize(val_px, mean, std, dtype), val_y, "val"),
    )


def synth_dataset(n, grid, classes, seed=0, image_size=32, channels=3, noise=0.1, intensity=1.0,
                  split="train", dtype=np.float64):
    """Class ``k`` lights up patch cell ``k`` (row-major on a grid x grid layout) over Gaussian noise."""
    if classes > grid * grid:
        raise ValueError(f"{classes} classes do not fit on a {grid}x{grid} patch grid")
    if image_size % grid:
        raise ValueError(f"image size {image_size} not divisible by grid {grid}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    cell = image_size // grid
    images = noise * rng.standard_normal((n, channels, image_size, image_size))
    for i, k in enumerate(labels):
        r, c = divmod(int(k), grid)
        images[i, :, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] += intensity
    return Dataset(images.astype(dtype), labels, split, classes)


def augment_batch(images, rng, pad=4):
    """Random horizontal flip and ``pad``-pixel zero-pad random crop."""
    b, _, h, w = images.shape
    out = images.copy()
    flip = rng.random(b) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, b)
        dx = rng.integers(0, 2 * pad + 1, b)
        for i in range(b):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def _batch_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index])


def _assemble(dataset, order, start, batch_size, augment, seed, epoch, index):
    idx = order[start:start + batch_size]
    images = dataset.images[idx]
    if augment:
        images = augment_batch(images, _batch_rng(seed, epoch, index))
    return images, dataset.labels[idx]


def iterate_batches(dataset, batch_size, epoch, seed, shuffle=True, augment=False, workers=0, prefetch=4):
    """Yield ``(images, labels)`` mini-batches for one epoch.

    Shuffle order and per-batch augmentation are derived from
    ``(seed, epoch, batch index)`` only. With ``workers > 0`` batches are
    assembled on background threads into a bounded queue and still arrive
    in order.
    """
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    starts = list(range(0, n, batch_size))
    if workers <= 0:
        for i, start in enumerate(starts):
            yield _assemble(dataset, order, start, batch_size, augment, seed, epoch, i)
        return

    results = {}
    ready = threading.Condition()
    slots = threading.Semaphore(prefetch)
    jobs = queue.Queue()
    for i, start in enumerate(starts):
        jobs.put((i, start))
    stop = threading.Event()

    def worker():
        # Slot first, then job: jobs are claimed in index order, so the batch
        # the consumer waits for always holds a slot.
        while True:
            slots.acquire()
            if stop.is_set():
                return
            try:
                i, start = jobs.get_nowait()
            except queue.Empty:
                slots.release()
                return
            batch = _assemble(dataset, order, start, batch_size, augment, seed, epoch, i)
            with ready:
                results[i] = batch
                ready.notify_all()

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
    for t in threads:
        t.start()
    try:
        for i in range(len(starts)):
            with ready:
                while i not in results:
                    ready.wait()
                batch = results.pop(i)
            slots.release()
            yield batch
    finally:
        stop.set()
        for _ in threads:
            slots.release()


def load_datasets(data_cfg, model_cfg, dtype=np.float64):
    """Train and val splits described by a data config.

    The synthetic corpus lights up cells of the first-stage patch grid, one
    class per cell; train and val use seeds ``seed`` and ``seed + 1``.
    """
    if data_cfg.kind == "cifar10":
        if not data_cfg.dir:
            raise FileNotFoundError("data.dir must point at the CIFAR-10 binary batches")
        return load_cifar10(data_cfg.dir, data_cfg.mean, data_cfg.std, dtype)
    grid = model_cfg.grids[0]
    common = dict(grid=grid, classes=model_cfg.num_classes, image_size=model_cfg.image_size,
                  channels=model_cfg.in_chans, noise=data_cfg.noise, dtype=dtype)
    return (
        synth_dataset(data_cfg.n_train, seed=data_cfg.seed, split="train", **common),
        synth_dataset(data_cfg.n_val, seed=data_cfg.seed + 1, split="val", **common),
    )
