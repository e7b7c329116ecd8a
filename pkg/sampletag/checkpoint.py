"""Versioned little-endian binary checkpoints.

Layout::

    magic        8 bytes  b"SMPLTAG\\0"
    version      u16
    header_len   u32, then header_len bytes of canonical YAML {model: ModelConfig, tags: [...]}
    count        u32
    per tensor:  name_len u16, name (utf-8), ndim u8, dims u32 * ndim,
                 crc32 u32 of the raw data, raw float32 data
"""
import os
import struct
import zlib

import numpy as np
import structlog
import yaml

from sampletag.config import ModelConfig
from sampletag.errors import CorruptCheckpointError
from sampletag.utils import format_file_size

logger = structlog.get_logger(__name__)

MAGIC = b"SMPLTAG\0"
VERSION = 1


def _tensors(net):
    out = {name: param.value for name, param in net.named_parameters().items()}
    out.update(net.named_buffers())
    return out


def save_checkpoint(net, path):
    """Write every parameter and running statistic; replaces ``path`` atomically."""
    header = yaml.safe_dump({'model': vars(net.config).copy(), 'tags': net.tags},
                            sort_keys=True, allow_unicode=True).encode('utf-8')
    tensors = _tensors(net)
    chunks = [MAGIC, struct.pack('<HI', VERSION, len(header)), header, struct.pack('<I', len(tensors))]
    for name, array in tensors.items():
        raw = np.ascontiguousarray(array, dtype='<f4').tobytes()
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(struct.pack('<I', zlib.crc32(raw)))
        chunks.append(raw)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as fh:
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp_path, path)
    logger.debug('checkpoint_saved', path=str(path), size=format_file_size(os.path.getsize(path)))
    return path


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, {name: float32 array}) with full validation."""
    try:
        with open(path, 'rb') as fh:
            data = fh.read()
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(data, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a sampletag checkpoint")
    version, header_len = reader.unpack('<HI')
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = yaml.safe_load(reader.take(header_len).decode('utf-8'))
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header: {e}") from e
    (count,) = reader.unpack('<I')
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8', errors='replace')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        (crc,) = reader.unpack('<I')
        raw = reader.take(4 * int(np.prod(shape, dtype=np.int64)))
        if zlib.crc32(raw) != crc:
            raise CorruptCheckpointError(f"{path}: checksum mismatch for {name}")
        tensors[name] = np.frombuffer(raw, dtype='<f4').reshape(shape).astype(np.float32)
    if reader.pos != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - reader.pos} trailing bytes")
    return header, tensors


def load_checkpoint(path):
    """Rebuild the saved network (eval mode) bit-exactly."""
    from sampletag.model import build

    header, tensors = read_checkpoint(path)
    try:
        config = ModelConfig(**header['model'])
    except (TypeError, KeyError) as e:
        raise CorruptCheckpointError(f"{path}: header does not describe a model: {e}") from e
    net = build(config, np.random.default_rng(0), tags=header.get('tags'))
    params = net.named_parameters()
    buffers = net.named_buffers()
    expected = set(params) | set(buffers)
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CorruptCheckpointError(f"{path}: tensor set mismatch (missing {missing}, extra {extra})")
    for name, array in tensors.items():
        target = params[name].value if name in params else buffers[name]
        if target.shape != array.shape:
            raise CorruptCheckpointError(f"{path}: {name} has shape {array.shape}, expected {target.shape}")
        target[...] = array
    return net.eval()


def inspect_checkpoint(path):
    """List (name, shape, size) of every tensor plus the header."""
    header, tensors = read_checkpoint(path)
    rows = [{'name': name, 'shape': tuple(array.shape), 'size': int(array.size)}
            for name, array in tensors.items()]
    return header, rows
