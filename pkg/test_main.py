"""
Tests for the command-line surface
"""

import json
import os

import config
from main import build_parser, main


def write_scene(tmp_path):
    path = tmp_path / "scene.env"
    path.write_text("RIS_ROWS=2\nRIS_COLS=2\nROI_SIDE_VOXELS=3\nN_TX=2\nN_RX=2\n")
    return str(path)


def test_parser_defaults():
    args = build_parser().parse_args(['train', '--out', 'x'])
    assert args.command == 'train'
    assert args.method == 'adaptive'
    assert args.k == config.DEFAULT_K
    assert args.lr == config.LEARNING_RATE
    assert args.checkpoint is None


def test_parser_sweep_and_repeated_checkpoints():
    args = build_parser().parse_args(['sweep', '--methods', 'lisp,random', '--ks', '1,3', '--resume'])
    assert args.methods == 'lisp,random' and args.resume
    args = build_parser().parse_args(['se-table', '--checkpoint', 'a.bin', '--checkpoint', 'b.bin'])
    assert args.checkpoint == ['a.bin', 'b.bin']
    assert args.mu == 1


def test_dump_channel_writes_matrices_and_manifest(tmp_path):
    out = tmp_path / "run"
    scene = write_scene(tmp_path)
    assert main(['dump-channel', '--scene', scene, '--out', str(out), '--data-dir', '']) == 0
    written = sorted(os.listdir(out / "channels"))
    assert 'H_ris_tx.csv' in written and 'pilots.csv' in written
    with open(out / config.MANIFEST_FILE) as f:
        manifest = json.load(f)
    assert manifest['config']['scene']['ris_rows'] == 2
    assert manifest['inputs'][0]['path'] == scene
    assert len(manifest['outputs']) == len(written)


def test_se_table_without_data_uses_empty_roi(tmp_path):
    out = tmp_path / "run"
    scene = write_scene(tmp_path)
    assert main(['se-table', '--scene', scene, '--out', str(out), '--data-dir', '',
                 '--ris-sizes', '1,2', '--k', '2']) == 0
    lines = (out / config.SE_TABLE_FILE).read_text().strip().splitlines()
    assert lines[0] == 'ris_size,se_com,se_sen,se_avg,se_loss_percent'
    assert len(lines) == 3


def test_train_without_data_fails_cleanly(tmp_path):
    assert main(['train', '--out', str(tmp_path / "run"), '--data-dir', '']) == 1
