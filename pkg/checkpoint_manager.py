"""
Checkpoint Manager Module
Versioned binary parameter checkpoints, metrics CSV and run manifests
"""

import hashlib
import json
import logging
import os
import shutil
import struct
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import config
from recognizer import RecognizerParams

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file"""


def content_hash(data: bytes) -> str:
    """Git-style blob hash: sha1(b"blob <len>\\0" + data)"""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path: str) -> str:
    with open(path, 'rb') as f:
        return content_hash(f.read())


def encode_params(params: RecognizerParams) -> bytes:
    """
    Serialize parameters.

    Layout: magic, u32 version, u32 header length + JSON header, u32 tensor
    count, then per tensor u16 name length, name, u8 ndim, u32 dims and
    little-endian float64 data. Tensors are written in name order.
    """
    header = json.dumps({'method': params.method, 'phase_mode': params.phase_mode,
                         'input_scale': params.input_scale, 'n_steps': params.n_steps},
                        sort_keys=True).encode('utf-8')
    parts = [config.CHECKPOINT_MAGIC, struct.pack('<I', config.CHECKPOINT_VERSION),
             struct.pack('<I', len(header)), header, struct.pack('<I', len(params.tensors))]

    for name in sorted(params.tensors):
        value = np.ascontiguousarray(params.tensors[name], dtype='<f8')
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<B', value.ndim) + struct.pack(f'<{value.ndim}I', *value.shape))
        parts.append(value.tobytes(order='C'))
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"Checkpoint truncated at byte offset {len(self.data)} "
                                  f"(needed {size} bytes at {self.offset})")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_params(data: bytes) -> RecognizerParams:
    """Inverse of encode_params"""
    reader = _Reader(data)
    magic = reader.take(len(config.CHECKPOINT_MAGIC))
    if magic != config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad checkpoint magic {magic!r}")
    (version,) = reader.unpack('<I')
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    (header_len,) = reader.unpack('<I')
    header = json.loads(reader.take(header_len).decode('utf-8'))
    (count,) = reader.unpack('<I')

    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').reshape(shape).astype(np.float64)

    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes in checkpoint")
    return RecognizerParams(header['method'], tensors, float(header['input_scale']),
                            header['phase_mode'], int(header['n_steps']))


def backup_file(path: str) -> Optional[str]:
    """Copy an existing file aside with a timestamp suffix"""
    if not os.path.exists(path):
        return None
    root, ext = os.path.splitext(path)
    backup = f"{root}_backup_{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}{ext}"
    shutil.copy2(path, backup)
    logger.info(f"Existing {os.path.basename(path)} backed up to {backup}")
    return backup


def save_checkpoint(params: RecognizerParams, path: str) -> str:
    """Write params to path, backing up any previous file; returns the content hash"""
    data = encode_params(params)
    backup_file(path)
    with open(path, 'wb') as f:
        f.write(data)
    digest = content_hash(data)
    logger.info(f"Checkpoint saved to {path} ({len(params.tensors)} tensors, {digest[:12]})")
    return digest


def load_checkpoint(path: str) -> RecognizerParams:
    try:
        with open(path, 'rb') as f:
            params = decode_params(f.read())
    except (OSError, CheckpointError) as e:
        logger.error(f"Error loading checkpoint {path}: {e}")
        raise
    logger.info(f"Checkpoint loaded from {path}: method={params.method}")
    return params


class CheckpointManager:
    """
    Owns the output directory of a run: checkpoint, metrics CSV and manifest.
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        logger.info(f"CheckpointManager initialized in {out_dir}")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def save_params(self, params: RecognizerParams, name: str = config.CHECKPOINT_FILE) -> str:
        return save_checkpoint(params, self.path(name))

    def load_params(self, name: str = config.CHECKPOINT_FILE) -> RecognizerParams:
        return load_checkpoint(self.path(name))

    def save_metrics(self, history: pd.DataFrame, name: str = config.METRICS_FILE) -> str:
        path = self.path(name)
        history.to_csv(path, index=False)
        logger.info(f"Metrics ({len(history)} epochs) written to {path}")
        return path

    def save_manifest(self, resolved_config: Dict, inputs: Sequence[str] = (),
                      outputs: Sequence[str] = (), name: str = config.MANIFEST_FILE) -> Dict:
        """
        JSON manifest with the resolved configuration and content hashes of
        every input file, every output file and the configuration itself.
        """
        config_bytes = json.dumps(resolved_config, sort_keys=True, default=str).encode('utf-8')
        manifest = {
            'created': datetime.now().isoformat(),
            'config': resolved_config,
            'config_hash': content_hash(config_bytes),
            'inputs': self._hashes(inputs),
            'outputs': self._hashes(outputs),
        }
        path = self.path(name)
        backup_file(path)
        with open(path, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        logger.info(f"Run manifest written to {path}")
        return manifest

    @staticmethod
    def _hashes(paths: Sequence[str]) -> List[Dict]:
        entries = []
        for path in paths:
            if path and os.path.isfile(path):
                entries.append({'path': path, 'sha1': file_hash(path)})
        return entries
