"""
Data Fetcher Module
Reads MNIST IDX files and turns digits into ROI target images
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

import config

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
RAW_SIDE = 28
PIXEL_MAX = 255.0


class IdxFormatError(ValueError):
    """Malformed IDX file"""


def _read_bytes(path: str) -> bytes:
    with open(path, 'rb') as f:
        data = f.read()
    # gzip member header
    if data[:2] == b'\x1f\x8b':
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, path: str, expected_magic: int) -> Tuple[int, Tuple[int, ...], np.ndarray]:
    """Validate an IDX header and return (count, item shape, payload bytes)"""
    n_dims = 3 if expected_magic == IMAGE_MAGIC else 1
    header_size = 4 + 4 * n_dims
    if len(data) < header_size:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(data)}, "
                             f"need {header_size} bytes")

    magic = struct.unpack('>I', data[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, "
                             f"expected 0x{expected_magic:08x}")

    dims = struct.unpack(f'>{n_dims}I', data[4:header_size])
    count, item_shape = dims[0], tuple(dims[1:])
    item_size = int(np.prod(item_shape)) if item_shape else 1
    expected = header_size + count * item_size
    if len(data) < expected:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(data)}, header announces "
                             f"{count} items ({expected} bytes)")
    if len(data) > expected:
        logger.warning(f"{path}: {len(data) - expected} trailing bytes ignored")

    payload = np.frombuffer(data, dtype=np.uint8, count=count * item_size, offset=header_size)
    return count, item_shape, payload


def load_idx_images(path: str) -> np.ndarray:
    """(count, rows, cols) uint8 images"""
    count, (rows, cols), payload = _parse_idx(_read_bytes(path), path, IMAGE_MAGIC)
    return payload.reshape(count, rows, cols)


def load_idx_labels(path: str) -> np.ndarray:
    """(count,) uint8 labels"""
    _, _, payload = _parse_idx(_read_bytes(path), path, LABEL_MAGIC)
    return payload.copy()


def load_mnist(images_path: str, labels_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a pair of IDX files (plain or gzipped).

    Returns:
        (images (M, 28, 28) uint8, labels (M,) int64)

    Raises:
        IdxFormatError: bad magic, truncated file or image/label count mismatch
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"Count mismatch: {images.shape[0]} images in {images_path}, "
                             f"{labels.shape[0]} labels in {labels_path}")
    logger.info(f"Loaded {images.shape[0]} images of {images.shape[1]}x{images.shape[2]} "
                f"from {os.path.basename(images_path)}")
    return images, labels.astype(np.int64)


def to_target_image(raw: np.ndarray, max_scattering: float = config.RCS_FACTOR) -> np.ndarray:
    """
    28x28 digit -> 30x30 target image, flattened row-major.

    Zero-pads one pixel per side and maps 255 to max_scattering (4*pi*S^2/lambda^2).
    Accepts a (B, 28, 28) stack as well.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-2:] != (RAW_SIDE, RAW_SIDE):
        raise ValueError(f"Expected 28x28 images, got shape {raw.shape}")
    pad = [(0, 0)] * (raw.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(raw, pad) * (max_scattering / PIXEL_MAX)
    return padded.reshape(raw.shape[:-2] + (-1,))


@dataclass
class Dataset:
    """
    Raw digits with 0-based labels.

    Images stay as uint8 until a batch is requested; target images are
    produced with to_target_image and max_scattering.
    """
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    max_scattering: float = config.RCS_FACTOR

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"Labels must lie in [0, {self.n_classes - 1}]")

    def __len__(self):
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Tuple[np.ndarray, int]:
        return to_target_image(self.images[index], self.max_scattering), int(self.labels[index])

    def targets(self, indices: Sequence[int]) -> np.ndarray:
        """(len(indices), N_i) target images"""
        return to_target_image(self.images[np.asarray(indices, dtype=np.int64)], self.max_scattering)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.n_classes, self.max_scattering)

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
        """Index arrays of consecutive mini-batches; the last one may be short"""
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield order[start:start + batch_size]

    def split(self, rho: float = 1.0, val_fraction: float = config.VALIDATION_FRACTION,
              seed: int = 0) -> Tuple['Dataset', 'Dataset']:
        """
        Seed-deterministic train/validation split of a rho-fraction pool.

        The pool is a prefix of a seeded permutation; its first val_fraction
        share is the validation set, the rest the training set.
        """
        if not 0 < rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {rho}")
        if not 0 <= val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {val_fraction}")

        order = np.random.default_rng([seed, config.STREAM_SPLIT]).permutation(len(self))
        pool = order[:max(1, int(round(rho * len(self))))]
        n_val = int(round(val_fraction * len(pool)))
        train, val = self.subset(pool[n_val:]), self.subset(pool[:n_val])
        logger.info(f"Split pool of {len(pool)} (rho={rho}): {len(train)} train, {len(val)} validation")
        return train, val


def select_classes(images: np.ndarray, labels: np.ndarray, classes: Optional[Sequence[int]] = None,
                   limit: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Keep the listed digits (remapped to 0..len(classes)-1 in the given order)
    and at most `limit` samples, in file order.
    """
    if classes:
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes):
            raise ValueError(f"Duplicate classes in {classes}")
        remap = np.full(max(int(labels.max(initial=0)), max(classes)) + 1, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        keep = np.flatnonzero(remap[labels] >= 0)
        images, labels, n_classes = images[keep], remap[labels[keep]], len(classes)
    else:
        n_classes = 10
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels, n_classes


class DataFetcher:
    """
    Locates the four MNIST files in a data directory (plain or .gz) and
    builds train/test datasets.
    """

    def __init__(self, data_dir: str, max_scattering: float = config.RCS_FACTOR):
        self.data_dir = data_dir
        self.max_scattering = max_scattering
        logger.info(f"DataFetcher initialized for {data_dir}")

    def path(self, key: str) -> str:
        base = os.path.join(self.data_dir, config.MNIST_FILES[key])
        for candidate in (base, base + '.gz'):
            if os.path.exists(candidate):
                return candidate
        raise FileNotFoundError(f"MNIST file {config.MNIST_FILES[key]} not found in {self.data_dir}")

    def load(self, split: str, classes: Optional[Sequence[int]] = None,
             limit: Optional[int] = None) -> Dataset:
        """split is 'train' or 'test'"""
        try:
            images, labels = load_mnist(self.path(f'{split}_images'), self.path(f'{split}_labels'))
        except (OSError, IdxFormatError) as e:
            logger.error(f"Error loading MNIST {split} split: {e}")
            raise
        images, labels, n_classes = select_classes(images, labels, classes, limit)
        return Dataset(images, labels, n_classes, self.max_scattering)

    def prepare(self, classes: Optional[Sequence[int]] = None, train_limit: Optional[int] = None,
                test_limit: Optional[int] = None) -> Tuple[Dataset, Dataset]:
        train = self.load('train', classes, train_limit)
        test = self.load('test', classes, test_limit)
        logger.info(f"MNIST ready: {len(train)} train / {len(test)} test, {train.n_classes} classes")
        return train, test
