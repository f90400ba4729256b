"""Binary parameter container.

Layout (all integers little-endian)::

    b"DTIR"  u32 version=1  u32 entry_count
    entry*:  u32 name_len  name(utf-8)  u8 dtype(0=f32)  u32 rank  u32 dim*rank  f32 payload
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CrcMismatch, MalformedContainer
from .model import ParamStore

MAGIC = b"DTIR"
VERSION = 1
DTYPE_F32 = 0


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise MalformedContainer("missing DTIR header")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise MalformedContainer("container truncated")
        out = body[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise MalformedContainer(f"unsupported format version {version}")
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            dtype, rank = struct.unpack("<BI", take(5))
            if dtype != DTYPE_F32:
                raise MalformedContainer(f"{name}: unknown dtype code {dtype}")
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            n = int(np.prod(dims, dtype=np.int64))
            payload = take(4 * n)
            if name in state:
                raise MalformedContainer(f"duplicate entry {name!r}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    except UnicodeDecodeError as exc:
        raise MalformedContainer("entry name is not UTF-8") from exc
    if pos != len(body):
        raise MalformedContainer(f"{len(body) - pos} trailing bytes after the last entry")
    if zlib.crc32(body) != crc:
        raise CrcMismatch(f"crc32 {zlib.crc32(body):08x} != stored {crc:08x}")
    return state


def save_checkpoint(params: ParamStore | Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    state = params.state() if isinstance(params, ParamStore) else params
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(state))
    os.replace(tmp, path)


def load_state(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path: str | os.PathLike, template: ParamStore | None = None) -> ParamStore | dict:
    """Load into a copy of ``template`` (shape-checked), or return the raw state."""
    state = load_state(path)
    if template is None:
        return state
    out = template.copy()
    out.load_state(state, strict=True)
    return out
