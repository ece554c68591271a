"""Tests for the synthetic generator and the IDX reader."""

import gzip
import struct

import numpy as np
import pytest

from spankey.data import (
    MNIST_FILES,
    Dataset,
    gen_synthetic,
    load_mnist,
    load_synthetic,
    mnist_available,
    parse_idx,
    save_synthetic,
)
from spankey.errors import ConfigError, IdxFormatError


def idx_images(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape
    return struct.pack(">IIII", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()


def idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x801, labels.size) + labels.astype(np.uint8).tobytes()


#####################################
# Synthetic blobs
#####################################


def test_synthetic_is_seeded():
    a_train, a_test = gen_synthetic(n=200, d=8, C=3, seed=1)
    b_train, b_test = gen_synthetic(n=200, d=8, C=3, seed=1)
    assert np.array_equal(a_train.inputs, b_train.inputs)
    assert np.array_equal(a_test.labels, b_test.labels)
    c_train, _ = gen_synthetic(n=200, d=8, C=3, seed=2)
    assert not np.array_equal(a_train.inputs, c_train.inputs)


def test_synthetic_split_and_balance():
    train, test = gen_synthetic(n=4000, d=32, C=5, seed=0)
    assert len(train) == 3200
    assert len(test) == 800
    counts = train.class_counts() + test.class_counts()
    assert counts.tolist() == [800] * 5
    assert train.split_tag == "train" and test.split_tag == "test"


def test_default_blobs_are_nearly_separable():
    train, test = gen_synthetic(seed=0)
    means = np.array([train.inputs[train.labels == c].mean(axis=0) for c in range(train.C)])
    dist = ((test.inputs[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    assert (dist.argmin(axis=1) == test.labels).mean() >= 0.95


@pytest.mark.parametrize(
    "kwargs",
    [{"C": 1}, {"d": 3, "C": 5}, {"n": 6, "C": 5}, {"separation": -1.0}],
)
def test_synthetic_rejects_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        gen_synthetic(**kwargs)


def test_synthetic_file_round_trip(tmp_path):
    train, test = gen_synthetic(n=100, d=6, C=2, seed=3)
    path = tmp_path / "blobs.npz"
    save_synthetic(train, test, path)
    loaded_train, loaded_test = load_synthetic(path)
    assert np.array_equal(loaded_train.inputs, train.inputs)
    assert np.array_equal(loaded_test.labels, test.labels)
    assert loaded_train.C == 2


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ConfigError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]), 2)
    with pytest.raises(ConfigError):
        Dataset(np.zeros((1, 2)), np.array([0]), 2, "valid")


#####################################
# IDX
#####################################


def test_single_pixel_image():
    parsed = parse_idx(idx_images(np.array([[[7]]])))
    assert parsed.shape == (1, 1, 1)
    assert parsed.dtype == np.uint8
    assert parsed[0, 0, 0] == 7


def test_label_file():
    parsed = parse_idx(idx_labels(np.array([3, 1, 4])))
    assert parsed.tolist() == [3, 1, 4]


def test_every_truncation_is_rejected():
    data = idx_images(np.arange(8).reshape(2, 2, 2))
    for cut in range(len(data)):
        with pytest.raises(IdxFormatError):
            parse_idx(data[:cut])


def test_trailing_bytes_are_rejected():
    with pytest.raises(IdxFormatError):
        parse_idx(idx_labels(np.array([1, 2])) + b"\x00")


def test_bad_magic_is_rejected():
    with pytest.raises(IdxFormatError):
        parse_idx(struct.pack(">II", 0x802, 1) + b"\x00")


def test_oversized_dimensions_are_rejected():
    with pytest.raises(IdxFormatError):
        parse_idx(struct.pack(">IIII", 0x803, 65536, 65536, 65536))


@pytest.fixture
def fake_mnist(tmp_path):
    rng = np.random.default_rng(0)
    for (images_name, labels_name), n in zip(MNIST_FILES.values(), (6, 4)):
        images = rng.integers(0, 256, size=(n, 28, 28))
        labels = np.arange(n) % 10
        (tmp_path / images_name).write_bytes(idx_images(images))
        with gzip.open(tmp_path / f"{labels_name}.gz", "wb") as fh:
            fh.write(idx_labels(labels))
    return tmp_path


def test_load_mnist_scales_and_flattens(fake_mnist):
    assert mnist_available(fake_mnist)
    train, test = load_mnist(fake_mnist)
    assert train.inputs.shape == (6, 784)
    assert test.inputs.shape == (4, 784)
    assert train.inputs.min() >= 0.0 and train.inputs.max() <= 1.0
    assert train.C == 10


def test_mnist_missing_files(tmp_path):
    assert not mnist_available(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
