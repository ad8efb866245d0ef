"""Binary tensor-record format.

Layout: the magic bytes ``RPCM1\\n`` followed by records of

    u32 LE name length | UTF-8 name | u32 LE rank | rank x u32 LE dims |
    prod(dims) little-endian float32 values, row-major

until end of file. A truncated record is a format error.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import ParamSet, Tensor

MAGIC = b"RPCM1\n"


def encode_records(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise FormatError("bad magic")
    out: dict[str, np.ndarray] = {}
    pos, end = len(MAGIC), len(blob)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise FormatError("truncated record")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("record name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        vals = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        if name in out:
            raise FormatError(f"duplicate record {name!r}")
        out[name] = vals.astype(np.float32)
    return out


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_records(arrays))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())


def save_params(path: str | Path, params: ParamSet) -> None:
    save_arrays(path, {name: t.data for name, t in params.items()})


def load_params(path: str | Path) -> ParamSet:
    return ParamSet({name: Tensor(arr.astype(np.float64)) for name, arr in load_arrays(path).items()})
