"""Binary checkpoint format shared by backbone and MTP weights.

Layout (all little-endian)::

    b"MTPV1"
    u32 x 7          ModelConfig fields in declaration order
    repeated until EOF:
        u16          name length in bytes
        bytes        UTF-8 name
        u64          element count
        f32 x count  raw values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MTPV1"
HEADER_FIELDS = 7


def write_checkpoint(path: str | Path, header: tuple[int, ...], blocks: dict[str, np.ndarray]) -> None:
    if len(header) != HEADER_FIELDS:
        raise CheckpointError(f"header needs {HEADER_FIELDS} fields, got {len(header)}")
    parts = [MAGIC, struct.pack("<" + "I" * HEADER_FIELDS, *header)]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f4").ravel()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", data.size))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[tuple[int, ...], dict[str, np.ndarray]]:
    """Return ``(header, blocks)``; block arrays are flat float32."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    hsize = 4 * HEADER_FIELDS
    if len(buf) < off + hsize:
        raise CheckpointError(f"{path}: truncated header")
    header = struct.unpack_from("<" + "I" * HEADER_FIELDS, buf, off)
    off += hsize
    blocks: dict[str, np.ndarray] = {}
    while off < len(buf):
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (count,) = struct.unpack_from("<Q", buf, off)
            off += 8
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt block table at byte {off}") from exc
        end = off + 4 * count
        if end > len(buf):
            raise CheckpointError(f"{path}: block {name!r} runs past end of file")
        blocks[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
        off = end
    return tuple(header), blocks


def unflatten(blocks: dict[str, np.ndarray], shapes: dict[str, tuple[int, ...]], prefix: str = "") -> dict[str, np.ndarray]:
    """Reshape flat blocks by name, checking that every expected block exists."""
    out = {}
    for name, shape in shapes.items():
        key = prefix + name
        if key not in blocks:
            raise CheckpointError(f"missing block {key!r}")
        flat = blocks[key]
        if flat.size != int(np.prod(shape)):
            raise CheckpointError(f"block {key!r} has {flat.size} values, expected shape {shape}")
        out[name] = flat.reshape(shape).copy()
    return out
