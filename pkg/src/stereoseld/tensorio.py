"""Flat binary tensor files and named-tensor checkpoints.

Single-tensor file layout (all integers little-endian uint32 unless noted):

    magic "SELDTNSR" (8 bytes) | version | dtype code | ndim | dims... | raw payload

Named-tensor (checkpoint) layout:

    magic "SELDCKPT" (8 bytes) | version | count
    then per entry: name_len | name utf-8 | dtype code | ndim | dims... | raw payload

dtype codes: 0 float64, 1 float32, 2 uint8, 3 int64. Payloads are contiguous
C-order little-endian. Writes go to a temp file in the same directory and are
renamed into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC_TENSOR = b"SELDTNSR"
MAGIC_CKPT = b"SELDCKPT"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_DTYPE_TO_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1,
                  np.dtype(np.uint8): 2, np.dtype(np.int64): 3}


class FormatError(ValueError):
    """Raised when a file does not match the expected layout."""


def _encode_array(arr: np.ndarray) -> bytes:
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _DTYPE_TO_CODE[dtype]
    head = struct.pack("<II", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    return head + payload


def _decode_array(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    code, ndim = struct.unpack_from("<II", buf, offset)
    offset += 8
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", buf, offset) if ndim else ()
    offset += 4 * ndim
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    offset += count * dtype.itemsize
    return arr.copy(), offset


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr: np.ndarray) -> None:
    blob = MAGIC_TENSOR + struct.pack("<I", VERSION) + _encode_array(np.asarray(arr))
    _atomic_write(Path(path), blob)


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC_TENSOR:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    arr, _ = _decode_array(buf, 12)
    return arr


def save_named(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC_CKPT, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(_encode_array(np.asarray(arr)))
    _atomic_write(Path(path), b"".join(parts))


def load_named(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC_CKPT:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = _decode_array(buf, offset)
        out[name] = arr
    return out
