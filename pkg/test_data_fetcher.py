"""
Tests for MNIST IDX ingestion, target-image conversion and dataset splits
"""

import gzip
import math
import os
import struct

import numpy as np
import pytest

import config
from data_fetcher import (DataFetcher, Dataset, IdxFormatError, load_mnist, select_classes,
                          to_target_image)


def idx_bytes(magic, dims, payload):
    return struct.pack('>I', magic) + struct.pack(f'>{len(dims)}I', *dims) + bytes(payload)


def write_pair(directory, images, labels, prefix='train', gz=False):
    names = {'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
             'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')}[prefix]
    blobs = (idx_bytes(0x803, images.shape, images.tobytes()),
             idx_bytes(0x801, labels.shape, labels.astype(np.uint8).tobytes()))
    paths = []
    for name, blob in zip(names, blobs):
        path = os.path.join(directory, name + ('.gz' if gz else ''))
        with open(path, 'wb') as f:
            f.write(gzip.compress(blob) if gz else blob)
        paths.append(path)
    return paths


def sample_digits(count, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
    labels = np.arange(count) % 10
    return images, labels


@pytest.mark.parametrize("gz", [False, True])
def test_load_mnist_plain_and_gzipped(tmp_path, gz):
    images, labels = sample_digits(12)
    image_path, label_path = write_pair(str(tmp_path), images, labels, gz=gz)
    loaded_images, loaded_labels = load_mnist(image_path, label_path)
    np.testing.assert_array_equal(loaded_images, images)
    np.testing.assert_array_equal(loaded_labels, labels)
    assert loaded_labels.dtype == np.int64


def test_bad_magic_rejected(tmp_path):
    images, labels = sample_digits(12)
    image_path, label_path = write_pair(str(tmp_path), images, labels)
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_mnist(label_path, label_path)


def test_truncated_file_reports_offset(tmp_path):
    images, labels = sample_digits(3)
    image_path, label_path = write_pair(str(tmp_path), images, labels)
    with open(image_path, 'rb') as f:
        data = f.read()
    with open(image_path, 'wb') as f:
        f.write(data[:-100])
    with pytest.raises(IdxFormatError, match=f"byte offset {len(data) - 100}"):
        load_mnist(image_path, label_path)


def test_count_mismatch_rejected(tmp_path):
    images, _ = sample_digits(4)
    image_path, _ = write_pair(str(tmp_path), images, np.zeros(4, dtype=np.int64))
    other = tmp_path / "other"
    other.mkdir()
    _, label_path = write_pair(str(other), images[:3], np.zeros(3, dtype=np.int64))
    with pytest.raises(IdxFormatError, match="Count mismatch"):
        load_mnist(image_path, label_path)


def test_to_target_image_pads_and_scales():
    raw = np.zeros((28, 28), dtype=np.uint8)
    raw[0, 0] = 255
    image = to_target_image(raw)
    assert image.shape == (900,)
    # row 1, column 1 of the padded 30x30 grid
    assert image[31] == pytest.approx(4 * math.pi)
    assert np.count_nonzero(image) == 1
    np.testing.assert_array_equal(to_target_image(np.zeros((28, 28))), np.zeros(900))


def test_to_target_image_mean_matches_scaled_raw_mean():
    raw, _ = sample_digits(1, seed=3)
    expected = raw[0].mean() * (4 * math.pi / 255) * (784 / 900)
    assert to_target_image(raw[0]).mean() == pytest.approx(expected, rel=1e-12)
    assert to_target_image(raw).shape == (1, 900)


def test_to_target_image_rejects_wrong_size():
    with pytest.raises(ValueError):
        to_target_image(np.zeros((30, 30)))


def indexed_dataset(count=100, n_classes=10):
    images = np.zeros((count, 28, 28), dtype=np.uint8)
    images[:, 0, 0] = np.arange(count)
    return Dataset(images, np.arange(count) % n_classes, n_classes)


def test_split_is_disjoint_sized_and_deterministic():
    data = indexed_dataset()
    train, val = data.split(rho=0.5, val_fraction=0.1, seed=4)
    assert len(train) == 45 and len(val) == 5
    train_ids = set(train.images[:, 0, 0].tolist())
    val_ids = set(val.images[:, 0, 0].tolist())
    assert not train_ids & val_ids

    again, _ = data.split(rho=0.5, val_fraction=0.1, seed=4)
    np.testing.assert_array_equal(again.images, train.images)
    other, _ = data.split(rho=0.5, val_fraction=0.1, seed=5)
    assert not np.array_equal(other.images, train.images)


def test_split_rejects_bad_fractions():
    data = indexed_dataset(10)
    with pytest.raises(ValueError):
        data.split(rho=0.0)
    with pytest.raises(ValueError):
        data.split(val_fraction=1.0)


def test_batches_cover_every_index_once():
    data = indexed_dataset(10)
    batches = list(data.batches(4))
    assert [len(b) for b in batches] == [4, 4, 2]
    np.testing.assert_array_equal(np.concatenate(batches), np.arange(10))


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 28, 28), dtype=np.uint8), np.array([0, 3]), n_classes=3)


def test_select_classes_remaps_in_given_order():
    images, labels = sample_digits(30)
    kept_images, kept_labels, n_classes = select_classes(images, labels, classes=[7, 3])
    assert n_classes == 2
    assert set(kept_labels.tolist()) == {0, 1}
    np.testing.assert_array_equal(kept_images[kept_labels == 0], images[labels == 7])
    _, limited, _ = select_classes(images, labels, limit=5)
    assert len(limited) == 5


def test_data_fetcher_prepare(tmp_path):
    images, labels = sample_digits(20)
    write_pair(str(tmp_path), images, labels, 'train', gz=True)
    write_pair(str(tmp_path), images[:10], labels[:10], 'test')
    train, test = DataFetcher(str(tmp_path)).prepare(classes=[0, 1], train_limit=3)
    assert len(train) == 3 and len(test) == 2
    assert train.n_classes == 2


def test_data_fetcher_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        DataFetcher(str(tmp_path)).load('train')


@pytest.mark.slow
@pytest.mark.skipif(not os.getenv('MNIST_DATA_DIR'), reason="MNIST_DATA_DIR not set")
def test_full_mnist_counts():
    train, test = DataFetcher(os.environ['MNIST_DATA_DIR']).prepare()
    assert len(train) == 60000 and len(test) == 10000
    assert train.n_classes == 10
    assert train.targets([0]).max() <= config.RCS_FACTOR
