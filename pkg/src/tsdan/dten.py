"""Reader/writer for the ``.dten`` binary tensor container.

Layout (all little-endian)::

    b"DTEN" | u16 version (=1) | u16 rank | rank x u32 extents | f32 payload
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTEN"
VERSION = 1


class DtenError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise DtenError("not a .dten payload (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise DtenError(f"unsupported .dten version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != 4 * count:
        raise DtenError(f"payload holds {(len(buf) - offset) // 4} values, header says {count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def save(path, array):
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
