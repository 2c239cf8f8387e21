"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PWFN"  u32 version  u32 record_count
    record_count × { u32 name_len, name (utf-8), u8 dtype, u8 rank,
                     rank × u32 dim, raw little-endian payload }

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8 (used for JSON blobs).
The reader parses the whole file before returning anything, so a damaged
file never yields partial state.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"PWFN"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    dt = arr.dtype
    for code, ref in _DTYPES.items():
        if dt.kind == ref.kind and dt.itemsize == ref.itemsize:
            return code
    raise CheckpointError(f"unsupported dtype {dt} for checkpoint record")


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}, file has {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader knows {VERSION})")
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"record '{name}': unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        payload = take(n * dtype.itemsize)
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last record")
    return records


def write_records(path: Union[str, Path], records: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_records(records))
    tmp.replace(path)
    return path


def read_records(path: Union[str, Path]) -> dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())
