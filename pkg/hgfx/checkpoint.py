"""HGFX checkpoint format.

    magic "HGFX" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u64 dims |
                float32 little-endian values, row-major

All integers are little-endian.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from hgfx.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"HGFX"
VERSION = 1


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(value)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError("checkpoint is truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise DataError("not an HGFX checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")

    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n_values = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n_values), dtype="<f4")
        state[name] = values.reshape(dims).astype(np.float32)
    if pos != len(view):
        raise DataError(f"{len(view) - pos} trailing bytes after the last tensor")
    return state


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(state))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("wrote %d tensors to %s", len(state), path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
