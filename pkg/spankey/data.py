"""
data.py - datasets for the lab.

Two sources:
- gen_synthetic: Gaussian blobs, one fixed draw split 80/20;
- MNIST read from IDX files (optionally gzipped) in a local directory.

Synthetic splits can be saved to a versioned .npz for exact reruns.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import gzip
import pathlib
import struct
from dataclasses import dataclass

# Import external packages
import numpy as np

# Import functions from local modules
from spankey.errors import ConfigError, IdxFormatError
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

SYNTHETIC_DEFAULTS = {"n": 4000, "d": 32, "C": 5, "separation": 6.0}
TRAIN_FRACTION = 0.8

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 2**31

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_CLASSES = 10

SYNTHETIC_FORMAT_VERSION = 1


#####################################
# Dataset
#####################################


@dataclass
class Dataset:
    """Inputs (n, d) in float64, integer labels in [0, C)."""

    inputs: np.ndarray
    labels: np.ndarray
    C: int
    split_tag: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ConfigError(f"dataset inputs must be a non-empty (n, d) matrix, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(f"{self.inputs.shape[0]} inputs but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.C:
            raise ConfigError(f"labels must lie in [0, {self.C})")
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigError("dataset inputs contain non-finite values")
        if self.split_tag not in ("train", "test"):
            raise ConfigError(f"split_tag must be train or test, got {self.split_tag!r}")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.C)


#####################################
# Synthetic Blobs
#####################################


def gen_synthetic(
    n: int = SYNTHETIC_DEFAULTS["n"],
    d: int = SYNTHETIC_DEFAULTS["d"],
    C: int = SYNTHETIC_DEFAULTS["C"],
    separation: float = SYNTHETIC_DEFAULTS["separation"],
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """
    Gaussian blobs with unit covariance.

    Class means are uniform on the sphere of radius `separation`; labels
    are balanced and shuffled; the first 80% of the draw is train.
    """
    if C < 2 or d < C:
        raise ConfigError(f"gen_synthetic needs C >= 2 and d >= C, got C={C}, d={d}")
    if n < 2 * C or separation < 0:
        raise ConfigError(f"gen_synthetic needs n >= 2C and separation >= 0, got n={n}, separation={separation}")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((C, d))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % C)
    inputs = means[labels] + rng.standard_normal((n, d))
    n_train = int(round(TRAIN_FRACTION * n))
    train = Dataset(inputs[:n_train], labels[:n_train], C, "train")
    test = Dataset(inputs[n_train:], labels[n_train:], C, "test")
    logger.info(f"Synthetic blobs: n={n} d={d} C={C} separation={separation} seed={seed}")
    return train, test


def save_synthetic(train: Dataset, test: Dataset, path: pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        version=np.array(SYNTHETIC_FORMAT_VERSION),
        C=np.array(train.C),
        train_inputs=train.inputs,
        train_labels=train.labels,
        test_inputs=test.inputs,
        test_labels=test.labels,
    )
    logger.info(f"Saved synthetic splits to {path}")


def load_synthetic(path: pathlib.Path) -> tuple[Dataset, Dataset]:
    with np.load(pathlib.Path(path)) as archive:
        version = int(archive["version"])
        if version != SYNTHETIC_FORMAT_VERSION:
            raise ConfigError(f"unsupported synthetic file version {version}")
        C = int(archive["C"])
        train = Dataset(archive["train_inputs"], archive["train_labels"], C, "train")
        test = Dataset(archive["test_inputs"], archive["test_labels"], C, "test")
    return train, test


#####################################
# IDX / MNIST
#####################################


def _idx_error(msg: str):
    logger.error(msg)
    raise IdxFormatError(msg)


def parse_idx(data: bytes) -> np.ndarray:
    """
    Parse an IDX unsigned-byte file (images 0x00000803 or labels 0x00000801).

    Returns:
        uint8 array with the header's dimensions.
    """
    if len(data) < 4:
        _idx_error(f"IDX header truncated: {len(data)} bytes")
    # Magic number: big-endian, type byte 0x08 (unsigned byte), then ndim
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        _idx_error(f"bad IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        _idx_error(f"IDX dimension header truncated: {len(data)} of {header_len} bytes")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    # Guard the element count before trusting the header
    total = 1
    for dim in dims:
        total *= dim
        if total > MAX_IDX_ELEMENTS:
            _idx_error(f"IDX dimensions {dims} overflow the element limit")
    # The payload must match the header exactly
    payload = len(data) - header_len
    if payload < total:
        _idx_error(f"IDX payload truncated: {payload} of {total} bytes")
    if payload > total:
        _idx_error(f"IDX payload has {payload - total} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims).copy()


def _read_idx_file(directory: pathlib.Path, name: str) -> np.ndarray:
    plain = directory / name
    gz = directory / f"{name}.gz"
    if plain.exists():
        return parse_idx(plain.read_bytes())
    if gz.exists():
        with gzip.open(gz, "rb") as fh:
            return parse_idx(fh.read())
    raise FileNotFoundError(f"neither {plain} nor {gz} exists")


def load_mnist(directory: pathlib.Path) -> tuple[Dataset, Dataset]:
    """Read MNIST train/test, scale pixels to [0, 1] and flatten to 784."""
    directory = pathlib.Path(directory)
    splits = []
    for tag, (images_name, labels_name) in MNIST_FILES.items():
        images = _read_idx_file(directory, images_name)
        labels = _read_idx_file(directory, labels_name)
        if images.shape[0] != labels.shape[0]:
            _idx_error(f"{tag}: {images.shape[0]} images but {labels.shape[0]} labels")
        inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        splits.append(Dataset(inputs, labels, MNIST_CLASSES, tag))
        logger.info(f"Loaded MNIST {tag}: {inputs.shape[0]} x {inputs.shape[1]}")
    return splits[0], splits[1]


def mnist_available(directory: pathlib.Path) -> bool:
    directory = pathlib.Path(directory)
    names = [name for pair in MNIST_FILES.values() for name in pair]
    return all((directory / n).exists() or (directory / f"{n}.gz").exists() for n in names)
