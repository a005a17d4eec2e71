"""
Tests for parameter checkpoints and run manifests
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from checkpoint_manager import (CheckpointError, CheckpointManager, content_hash, decode_params,
                                encode_params, file_hash, load_checkpoint, save_checkpoint)
from recognizer import RecognizerParams


def sample_params() -> RecognizerParams:
    rng = np.random.default_rng(0)
    tensors = {'cla_w1': rng.normal(size=(8, 4)), 'cla_b1': rng.normal(size=4),
               'cla_w2': rng.normal(size=(4, 3)), 'cla_b2': rng.normal(size=3),
               'lisp_angles': rng.uniform(0, 6, size=(2, 4))}
    return RecognizerParams('lisp', tensors, input_scale=123.5, n_steps=2)


def test_checkpoint_preserves_everything(tmp_path):
    params = sample_params()
    path = str(tmp_path / "model.bin")
    digest = save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert digest == file_hash(path)
    assert (loaded.method, loaded.input_scale, loaded.n_steps, loaded.phase_mode) == ('lisp', 123.5, 2, 'cossin')
    assert sorted(loaded.tensors) == sorted(params.tensors)
    for name, value in params.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], value)


def test_encoding_is_independent_of_insertion_order():
    params = sample_params()
    reordered = RecognizerParams('lisp', dict(reversed(list(params.tensors.items()))),
                                 input_scale=123.5, n_steps=2)
    assert encode_params(params) == encode_params(reordered)


def test_content_hash_matches_git_blob_hash():
    assert content_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_corrupt_checkpoints_rejected():
    data = encode_params(sample_params())
    with pytest.raises(CheckpointError, match="magic"):
        decode_params(b"X" + data[1:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_params(data[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_params(data + b"\0")


def test_second_save_backs_up_previous_file(tmp_path):
    path = str(tmp_path / "model.bin")
    save_checkpoint(sample_params(), path)
    save_checkpoint(sample_params(), path)
    backups = [name for name in os.listdir(tmp_path) if '_backup_' in name]
    assert len(backups) == 1


def test_manager_writes_metrics_and_manifest(tmp_path):
    manager = CheckpointManager(str(tmp_path / "run"))
    checkpoint = manager.path('checkpoint.bin')
    manager.save_params(sample_params())
    metrics = manager.save_metrics(pd.DataFrame({'epoch': [1, 2], 'val_eta': [0.5, 0.75]}))
    manifest = manager.save_manifest({'method': 'lisp', 'k': 2}, inputs=[], outputs=[checkpoint, metrics])

    with open(manager.path('manifest.json')) as f:
        on_disk = json.load(f)
    assert on_disk['config'] == {'method': 'lisp', 'k': 2}
    assert [entry['sha1'] for entry in on_disk['outputs']] == [file_hash(checkpoint), file_hash(metrics)]
    assert manifest['config_hash'] == content_hash(json.dumps({'k': 2, 'method': 'lisp'}).encode())
    assert manager.load_params().method == 'lisp'
