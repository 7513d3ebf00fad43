"""Writer for the PTNS tensor format the core pipeline consumes.

Layout (little-endian): magic "PTNS", u32 version (1), u8 dtype code
(0=f32, 1=f64, 2=u8, 3=i64), u8 ndim, ndim u64 dims, row-major payload.
Implemented here against the published format so the extractor stays
decoupled from the core package; the test suite validates the output
through posekit's own reader.
"""

import struct

import numpy as np

_MAGIC = b"PTNS"
_VERSION = 1
_CODES = {"f4": 0, "f8": 1, "u1": 2, "i8": 3}
_HEADER = struct.Struct("<4sIBB")


def write_tensor(path: str, tensor: np.ndarray) -> None:
    arr = np.ascontiguousarray(tensor)
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 8:
        raise ValueError("tensors must have 1..8 dimensions")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, _CODES[key], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))
