"""Reader and writer for the NPY v1.0 container, restricted to C-order ``<f4``.

Tensors are plain ``numpy.ndarray`` objects. Writing always emits float32;
reading returns a float32 array whose bytes equal the file payload.
"""

from __future__ import annotations

import ast
import os
import struct
from pathlib import Path

import numpy as np

from netlens.errors import FormatError, LengthError, UnsupportedError
from netlens.fsutil import atomic_write_bytes

MAGIC = b"\x93NUMPY"
VERSION = b"\x01\x00"
ALIGN = 64
_PREAMBLE = len(MAGIC) + len(VERSION) + 2


def _shape_repr(shape: tuple[int, ...]) -> str:
    if len(shape) == 1:
        return f"({shape[0]},)"
    return "(" + ", ".join(str(s) for s in shape) + ")"


def header_bytes(shape: tuple[int, ...]) -> bytes:
    """Full header, magic through the terminating newline, padded to 64 bytes."""
    text = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % _shape_repr(shape)
    total = _PREAMBLE + len(text) + 1
    text += " " * (-total % ALIGN) + "\n"
    return MAGIC + VERSION + struct.pack("<H", len(text)) + text.encode("latin1")


def npy_bytes(t) -> bytes:
    arr = np.asarray(t)
    shape = tuple(int(s) for s in arr.shape)
    if not shape or any(s < 1 for s in shape):
        raise LengthError(f"tensor shape {shape} has no elements; every extent must be >= 1")
    data = np.ascontiguousarray(arr, dtype="<f4")
    return header_bytes(shape) + data.tobytes(order="C")


def write_npy(t, path: str | os.PathLike) -> None:
    try:
        atomic_write_bytes(path, npy_bytes(t))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def parse_npy(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < _PREAMBLE or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{name}: not an NPY file (bad magic)")
    if raw[6:8] != VERSION:
        raise FormatError(f"{name}: unsupported NPY version {raw[6]}.{raw[7]}")
    (hlen,) = struct.unpack("<H", raw[8:10])
    end = _PREAMBLE + hlen
    if len(raw) < end:
        raise LengthError(f"{name}: truncated header")
    try:
        header = ast.literal_eval(raw[_PREAMBLE:end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{name}: unparseable header") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{name}: header must hold exactly descr, fortran_order, shape")
    if header["descr"] != "<f4":
        raise UnsupportedError(f"{name}: dtype {header['descr']!r} unsupported, need '<f4'")
    if header["fortran_order"] is not False:
        raise UnsupportedError(f"{name}: Fortran-ordered arrays unsupported")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) for s in shape):
        raise FormatError(f"{name}: malformed shape {shape!r}")
    if not shape or any(s < 1 for s in shape):
        raise LengthError(f"{name}: shape {shape} has no elements")
    count = int(np.prod(shape))
    payload = raw[end:]
    if len(payload) != 4 * count:
        raise LengthError(f"{name}: payload is {len(payload)} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def read_npy(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return parse_npy(path.read_bytes(), str(path))
