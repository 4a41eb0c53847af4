"""Binary array container shared by checkpoints and probe parameters.

Layout (little-endian): ``b"RCL1"``, version u16, then records of
(name length u16, name bytes UTF-8, rank u8, extents u32 x rank, float32
payload). The final record is always ``meta.end`` (rank 0), so a file cut
at a record boundary is still detected as truncated.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import IoError, VersionMismatch

MAGIC = b"RCL1"
VERSION = 1
END = "meta.end"


def write_arrays(path, arrays) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    items = list(arrays.items()) + [(END, np.zeros((), dtype=np.float32))]
    for name, value in items:
        value = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_arrays(path) -> "OrderedDict[str, np.ndarray]":
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from None
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise IoError(f"{path}: not an RCL1 container")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: container version {version}, expected {VERSION}")
    pos = 6
    out = OrderedDict()
    try:
        while True:
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise struct.error("short name")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(raw):
                raise struct.error("short payload")
            value = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            if name == END:
                break
            out[name] = value.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as exc:
        raise IoError(f"{path}: truncated or corrupt container ({exc})") from None
    if pos != len(raw):
        raise IoError(f"{path}: trailing bytes after end record")
    return out
