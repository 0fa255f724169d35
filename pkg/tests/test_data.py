import numpy as np
import pytest

from dynamixer.config import CIFAR10_MEAN, CIFAR10_STD, DataConfig, model_preset
from dynamixer.data import (
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    Dataset,
    augment_batch,
    iterate_batches,
    load_cifar10,
    load_datasets,
    normalize,
    read_cifar_file,
    synth_dataset,
)
from dynamixer.errors import DataFormatError


def write_records(path, labels, rng):
    pixels = rng.integers(0, 256, (len(labels), 3072), dtype=np.uint8)
    raw = np.concatenate([np.asarray(labels, np.uint8)[:, None], pixels], axis=1)
    raw.tofile(path)
    return pixels


def fake_cifar(tmp_path, rng, per_file=6):
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        write_records(tmp_path / name, rng.integers(0, 10, per_file), rng)
    return tmp_path


def test_read_record_layout(tmp_path, rng):
    pixels = write_records(tmp_path / "b.bin", [3, 9], rng)
    images, labels = read_cifar_file(tmp_path / "b.bin")
    assert labels.tolist() == [3, 9]
    assert images.shape == (2, 3, 32, 32)
    # planes are R, G, B, each row-major 32x32
    assert images[1, 1, 0, 5] == pixels[1, 1024 + 5]
    assert images[0, 2, 31, 31] == pixels[0, 3071]


def test_truncated_file(tmp_path, rng):
    write_records(tmp_path / "b.bin", [1, 2], rng)
    raw = np.fromfile(tmp_path / "b.bin", dtype=np.uint8)
    raw[:-10].tofile(tmp_path / "b.bin")
    with pytest.raises(DataFormatError, match="multiple of the 3073"):
        read_cifar_file(tmp_path / "b.bin")


def test_wrong_record_count_and_label(tmp_path, rng):
    write_records(tmp_path / "b.bin", [1, 2], rng)
    with pytest.raises(DataFormatError, match="expected 3 records"):
        read_cifar_file(tmp_path / "b.bin", expected_records=3)
    write_records(tmp_path / "c.bin", [11], rng)
    with pytest.raises(DataFormatError, match="out of range"):
        read_cifar_file(tmp_path / "c.bin")


def test_missing_file_names_it(tmp_path, rng):
    fake_cifar(tmp_path, rng)
    (tmp_path / "data_batch_3.bin").unlink()
    with pytest.raises(FileNotFoundError, match="data_batch_3.bin"):
        load_cifar10(tmp_path, records_per_file=6)


def test_load_cifar_splits(tmp_path, rng):
    fake_cifar(tmp_path, rng)
    train, val = load_cifar10(tmp_path, records_per_file=6)
    assert len(train) == 30 and len(val) == 6
    assert train.split == "train" and val.split == "val"
    assert train.images.shape == (30, 3, 32, 32)


def test_normalization_applied_once():
    pixels = np.full((1, 3, 2, 2), 255, np.uint8)
    x = normalize(pixels, CIFAR10_MEAN, CIFAR10_STD)
    np.testing.assert_allclose(x[0, :, 0, 0], (1 - np.array(CIFAR10_MEAN)) / np.array(CIFAR10_STD))
    # uniform pixels normalized with their own statistics have mean near 0
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (200, 3, 8, 8), dtype=np.uint8)
    mean = px.mean(axis=(0, 2, 3)) / 255
    std = (px / 255).std(axis=(0, 2, 3))
    assert np.abs(normalize(px, mean, std).mean(axis=(0, 2, 3))).max() < 0.05


def test_synth_dataset_properties():
    ds = synth_dataset(103, grid=4, classes=10, seed=7)
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.max() - counts.min() <= 1
    again = synth_dataset(103, grid=4, classes=10, seed=7)
    np.testing.assert_array_equal(ds.images, again.images)
    # noise-free samples are separable by the argmax over patch cells
    clean = synth_dataset(50, grid=4, classes=10, seed=1, noise=0.0)
    cells = clean.images.mean(axis=1).reshape(50, 4, 8, 4, 8).mean(axis=(2, 4)).reshape(50, 16)
    assert (cells.argmax(axis=1) == clean.labels).all()


def test_same_class_differs_only_in_noise():
    ds = synth_dataset(40, grid=4, classes=10, seed=3, noise=0.1)
    a, b = np.flatnonzero(ds.labels == 4)[:2]
    diff = ds.images[a] - ds.images[b]
    assert abs(diff.std() - 0.1 * np.sqrt(2)) < 0.01
    assert abs(diff.mean()) < 0.01


def test_synth_rejects_too_many_classes():
    with pytest.raises(ValueError):
        synth_dataset(10, grid=2, classes=5)


def test_dataset_label_range():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 10])
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3, 4, 4)), [0])


def test_augment_flip_and_crop():
    img = np.arange(2 * 3 * 32 * 32, dtype=float).reshape(2, 3, 32, 32)
    out = augment_batch(img, np.random.default_rng(0))
    assert out.shape == img.shape
    out_noflip = augment_batch(img, np.random.default_rng(0), pad=0)
    for i in range(2):
        assert np.array_equal(out_noflip[i], img[i]) or np.array_equal(out_noflip[i], img[i, :, :, ::-1])


def test_batches_cover_epoch_and_depend_on_seed():
    ds = synth_dataset(50, grid=4, classes=10, seed=0)
    batches = list(iterate_batches(ds, 16, epoch=0, seed=1))
    assert [len(b[1]) for b in batches] == [16, 16, 16, 2]
    assert sorted(np.concatenate([b[1] for b in batches]).tolist()) == sorted(ds.labels.tolist())
    other = list(iterate_batches(ds, 16, epoch=1, seed=1))
    assert not np.array_equal(batches[0][1], other[0][1])


@pytest.mark.parametrize("workers", [1, 3])
def test_threaded_batches_identical(workers):
    ds = synth_dataset(70, grid=4, classes=10, seed=0)
    serial = list(iterate_batches(ds, 8, epoch=2, seed=5, augment=True))
    threaded = list(iterate_batches(ds, 8, epoch=2, seed=5, augment=True, workers=workers, prefetch=2))
    assert len(serial) == len(threaded)
    for (a, la), (b, lb) in zip(serial, threaded):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)


def test_threaded_iterator_abandoned_early():
    ds = synth_dataset(64, grid=4, classes=10, seed=0)
    it = iterate_batches(ds, 4, epoch=0, seed=0, workers=2, prefetch=1)
    next(it)
    it.close()


def test_load_datasets_synthetic():
    train, val = load_datasets(DataConfig(n_train=30, n_val=20), model_preset("tiny"))
    assert train.images.shape == (30, 3, 32, 32) and len(val) == 20
    assert not np.array_equal(train.images[:20], val.images)
