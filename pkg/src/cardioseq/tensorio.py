"""Raw tensor file format.

Layout, all integers little-endian:

    offset  size  field
    0       4     magic "CSTN"
    4       4     format version (currently 1), u32
    8       4     rank, u32
    12      8*r   extents, u64 each
    ...     1     precision tag, u8: 1 = uint8, 4 = float32, 8 = float64
    ...     n     buffer, C-contiguous

Used for fixtures, exported label volumes (`.seg`, tag 1), and the entries
inside checkpoint containers.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CSTN"
VERSION = 1

_TAG_TO_DTYPE = {
    1: np.dtype("<u1"),
    4: np.dtype("<f4"),
    8: np.dtype("<f8"),
}
_DTYPE_TO_TAG = {
    np.dtype(np.uint8): 1,
    np.dtype(np.float32): 4,
    np.dtype(np.float64): 8,
}


class TensorFormatError(ValueError):
    """The byte stream is not a valid raw tensor record."""


def encode_array(arr: np.ndarray) -> bytes:
    if np.asarray(arr).ndim == 0:
        raise TensorFormatError("rank-0 arrays are not representable")
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    tag = _DTYPE_TO_TAG.get(arr.dtype)
    if tag is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; "
                                "use uint8, float32 or float64")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<B", tag)
    return head + arr.tobytes()


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decodes one record starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[offset:offset + 4]!r}")
    offset += 4
    if len(buf) < offset + 8:
        raise TensorFormatError("truncated header")
    version, rank = struct.unpack_from("<II", buf, offset)
    offset += 8
    if version != VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if rank == 0 or len(buf) < offset + 8 * rank + 1:
        raise TensorFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    tag = buf[offset]
    offset += 1
    dtype = _TAG_TO_DTYPE.get(tag)
    if dtype is None:
        raise TensorFormatError(f"unknown precision tag {tag}")
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise TensorFormatError(f"truncated payload: need {nbytes} bytes, "
                                f"have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + nbytes


def write_tensor(arr: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_array(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_array(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor")
    return arr
