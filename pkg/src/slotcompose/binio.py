"""Little-endian binary array records shared by the dataset and checkpoint formats.

Record layout (all integers little-endian):
    rank      u8
    dims      rank * u32
    dtype     u8 (see DTYPE_CODES)
    data      raw C-order array bytes, little-endian
"""

import struct

import numpy as np

from .errors import FormatError

DTYPE_CODES = {
    np.dtype("uint8"): 1,
    np.dtype("int32"): 2,
    np.dtype("int64"): 3,
    np.dtype("float32"): 4,
    np.dtype("float64"): 5,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

MAX_RANK = 8


def write_array(f, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in DTYPE_CODES:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"array rank {arr.ndim} exceeds format limit {MAX_RANK}")
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(struct.pack("<B", DTYPE_CODES[arr.dtype]))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def read_array(f):
    rank = struct.unpack("<B", _read_exact(f, 1, "array rank"))[0]
    if rank > MAX_RANK:
        raise FormatError(f"array rank {rank} exceeds format limit {MAX_RANK}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "array dims"))
    code = struct.unpack("<B", _read_exact(f, 1, "array dtype"))[0]
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = _read_exact(f, count * dtype.itemsize, "array data")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=count)
    return arr.astype(dtype, copy=True).reshape(dims)


def write_named_array(f, name, arr):
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise FormatError("array name too long")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    write_array(f, arr)


def read_named_array(f):
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
    name = _read_exact(f, name_len, "name").decode("utf-8")
    return name, read_array(f)
