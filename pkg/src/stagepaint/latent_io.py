"""Binary latent blobs.

Layout (version 1, all integers little-endian)::

    offset  size  field
    0       4     magic b"SPLT"
    4       2     format version (uint16) = 1
    6       1     dtype kind: b"f" float, b"i" signed int
    7       1     element width in bytes (4 or 8)
    8       4     ndim (uint32)
    12      4*nd  dims (uint32 each)
    ...           values, row-major, little-endian
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"SPLT"
VERSION = 1
_HEADER = struct.Struct("<4sHcBI")


def encode_latent(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    kind = arr.dtype.kind
    if kind not in "fi" or arr.dtype.itemsize not in (4, 8):
        raise ContractError(f"unsupported latent dtype {arr.dtype}")
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = _HEADER.pack(MAGIC, VERSION, kind.encode(), arr.dtype.itemsize, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(le).tobytes()


def decode_latent(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ContractError("latent blob truncated before header end")
    magic, version, kind, width, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContractError(f"bad latent blob magic {magic!r}")
    if version != VERSION:
        raise ContractError(f"unsupported latent blob version {version}")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    dtype = np.dtype(f"<{kind.decode()}{width}")
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) - off != count * width:
        raise ContractError("latent blob payload size does not match its header")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


def write_latent(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_latent(arr))


def read_latent(path: str | Path) -> np.ndarray:
    return decode_latent(Path(path).read_bytes())


def digest(arr: np.ndarray) -> str:
    """sha256 over the little-endian float64 bytes of ``arr``."""
    data = np.ascontiguousarray(np.asarray(arr, dtype="<f8")).tobytes()
    return hashlib.sha256(data).hexdigest()
