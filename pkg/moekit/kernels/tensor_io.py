"""
Binary tensor files.

Layout: magic ``HXT1``, u32 LE rank (2 or 3), rank x u64 LE dims, then the
dims-product float64 LE payload.
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from moekit.core.errors import (
    DimensionOverflowError,
    MalformedHeaderError,
    NonFiniteError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

MAGIC = b"HXT1"
MAX_ELEMENTS = 1 << 40
_PAYLOAD_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


def encode_tensor(t) -> bytes:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ShapeMismatchError(f"only rank 2 or 3 tensors are stored, got {arr.ndim}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("refusing to store NaN or Inf values")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.astype(_PAYLOAD_DTYPE, copy=False).tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise MalformedHeaderError("missing HXT1 magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank not in (2, 3):
        raise MalformedHeaderError(f"unsupported rank {rank}")
    dims_end = 8 + 8 * rank
    if len(blob) < dims_end:
        raise MalformedHeaderError("truncated dimension block")
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)

    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"dims {dims} describe {count} elements")

    payload = blob[dims_end:]
    if len(payload) != count * _PAYLOAD_DTYPE.itemsize:
        raise MalformedHeaderError(
            f"dims {dims} need {count} values, payload holds "
            f"{len(payload) / _PAYLOAD_DTYPE.itemsize:g}"
        )
    arr = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(dims).astype(np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("payload contains NaN or Inf")
    return arr


def tensor_write(path: PathLike, t) -> None:
    blob = encode_tensor(t)
    Path(path).write_bytes(blob)
    logger.debug("wrote %d bytes to %s", len(blob), path)


def tensor_read(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
