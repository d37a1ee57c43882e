"""VGPT binary tensor files and small JSON helpers.

Layout: the four magic bytes ``VGPT``, a little-endian u32 ``ndim``, ``ndim``
little-endian u32 dimensions, then the row-major float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VGPT"


class FormatError(ValueError):
    pass


def encode_vgpt(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_vgpt(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not a VGPT tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * ndim
    if len(buf) < head:
        raise FormatError("truncated VGPT header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != head + 4 * count:
        raise FormatError(f"VGPT payload size {len(buf) - head} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=head).reshape(shape).astype(np.float32)


def save_tensor(path, array) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_vgpt(array))


def load_tensor(path) -> np.ndarray:
    return decode_vgpt(Path(path).read_bytes())


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
