"""
PVEC binary container.

Layout (all little-endian):
    magic b"PVEC" | version u16 | block count u32
    per block: name length u16 | UTF-8 name | ndim u8 | dims u32 * ndim | float64 payload
    trailer: CRC32 (u32) of every payload byte, in block order
"""

import logging
import os
import struct
import zlib

import numpy as np

from errors import FormatError
from models.param_vector import ParamVector

logger = logging.getLogger(__name__)

MAGIC = b"PVEC"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHI")
_NAME_LEN = struct.Struct("<H")
_NDIM = struct.Struct("<B")
_DIM = struct.Struct("<I")
_CRC = struct.Struct("<I")


def serialize(vector: ParamVector) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(vector))]
    crc = 0
    for name, values in vector:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"Block name too long: {name[:32]}...")
        if values.ndim > 0xFF:
            raise FormatError(f"Block '{name}' has too many dimensions")
        payload = values.astype("<f8").tobytes(order="C")
        crc = zlib.crc32(payload, crc)
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_NDIM.pack(values.ndim))
        parts.extend(_DIM.pack(d) for d in values.shape)
        parts.append(payload)
    parts.append(_CRC.pack(crc))
    return b"".join(parts)


def _take(data: bytes, offset: int, count: int) -> bytes:
    if offset + count > len(data):
        raise FormatError(f"Truncated payload at offset {offset}")
    return data[offset:offset + count]


def deserialize(data: bytes) -> ParamVector:
    if len(data) < _HEADER.size:
        raise FormatError("Truncated header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {version}")

    offset = _HEADER.size
    items = []
    crc = 0
    for _ in range(count):
        (name_len,) = _NAME_LEN.unpack(_take(data, offset, _NAME_LEN.size))
        offset += _NAME_LEN.size
        try:
            name = _take(data, offset, name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"Block name is not UTF-8: {e}") from e
        offset += name_len
        (ndim,) = _NDIM.unpack(_take(data, offset, _NDIM.size))
        offset += _NDIM.size
        dims = []
        for _ in range(ndim):
            (d,) = _DIM.unpack(_take(data, offset, _DIM.size))
            dims.append(d)
            offset += _DIM.size
        n_bytes = 8 * int(np.prod(dims, dtype=np.int64))
        payload = _take(data, offset, n_bytes)
        offset += n_bytes
        crc = zlib.crc32(payload, crc)
        items.append((name, np.frombuffer(payload, dtype="<f8").reshape(dims)))

    (expected,) = _CRC.unpack(_take(data, offset, _CRC.size))
    offset += _CRC.size
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after checksum")
    if expected != crc:
        raise FormatError(f"Checksum mismatch: stored {expected:#010x}, computed {crc:#010x}")
    return ParamVector.from_items(items)


def encoded_size(vector: ParamVector) -> int:
    """Byte length serialize() will produce."""
    body = sum(
        _NAME_LEN.size + len(name.encode("utf-8")) + _NDIM.size + _DIM.size * values.ndim
        + 8 * values.size
        for name, values in vector
    )
    return _HEADER.size + body + _CRC.size


def save_pvec(vector: ParamVector, path: str) -> None:
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(serialize(vector))
        logger.debug(f"Wrote {len(vector)} blocks to {path}")
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise


def load_pvec(path: str) -> ParamVector:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Failed to read {path}: {e}")
        raise
    return deserialize(data)
