#!/usr/bin/env python3

import logging
import os
import struct

import numpy as np

from ._alignment import SharedStack
from ._exceptions import H2TuneFormatError

_LOGGER = logging.getLogger(__name__)

MAGIC = b"H2TN"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
_FLOAT = np.dtype("<f8")


def serialize_stack(stack: SharedStack) -> bytes:
    """Encode a stack as magic, version, depth, rank and little-endian float64 entries."""
    header = _HEADER.pack(MAGIC, VERSION, stack.depth, stack.rank)
    return header + np.ascontiguousarray(stack.layers, dtype=_FLOAT).tobytes()


def deserialize_stack(data: bytes) -> SharedStack:
    """Decode a stack produced by :func:`serialize_stack`."""
    data = bytes(data)
    if data[: len(MAGIC)] != MAGIC[: len(data)]:
        raise H2TuneFormatError(f"Bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < _HEADER.size:
        raise H2TuneFormatError(
            f"Truncated header of {len(data)} bytes, expected {_HEADER.size}", offset=len(data)
        )

    _, version, depth, rank = _HEADER.unpack_from(data)
    if version != VERSION:
        raise H2TuneFormatError(f"Unsupported version {version}, expected {VERSION}", offset=4)
    if depth < 1:
        raise H2TuneFormatError("Stack depth must be positive", offset=5)
    if rank < 1:
        raise H2TuneFormatError("Stack rank must be positive", offset=9)

    expected = _HEADER.size + depth * rank * rank * _FLOAT.itemsize
    if len(data) < expected:
        raise H2TuneFormatError(
            f"Truncated payload of {len(data)} bytes, expected {expected}", offset=len(data)
        )
    if len(data) > expected:
        raise H2TuneFormatError(
            f"{len(data) - expected} trailing bytes after the payload", offset=expected
        )

    values = np.frombuffer(data, dtype=_FLOAT, offset=_HEADER.size)
    return SharedStack(values.astype(np.float64).reshape(depth, rank, rank))


def write_stack(path: str, stack: SharedStack) -> None:
    """Serialize a stack into a file, creating parent directories."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    _LOGGER.debug("Writing stack of depth %d and rank %d to %r", stack.depth, stack.rank, path)
    with open(path, "wb") as f:
        f.write(serialize_stack(stack))


def read_stack(path: str) -> SharedStack:
    """Deserialize a stack from a file."""
    with open(path, "rb") as f:
        return deserialize_stack(f.read())
