"""Flat binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"MVCK"
    version u32      currently 1
    count   u32
    entry*  count times:
        param_id u32
        name_len u16, name utf-8
        rank     u8, dims u32 * rank
        data     float64 little-endian, C order

Entries are written in ascending ParamId order; loading is strict about
names, ids and shapes so a checkpoint can only be applied to the model
layout that produced it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ParamId, ParameterStore

MAGIC = b"MVCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CheckpointEntry:
    param_id: ParamId
    name: str
    array: np.ndarray


def save_checkpoint(path: str | Path, store: ParameterStore) -> None:
    chunks: list[bytes] = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(store))]
    for pid, name, t in store.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<IH", pid, len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> list[CheckpointEntry]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    entries: list[CheckpointEntry] = []
    for _ in range(count):
        pid, name_len = struct.unpack_from("<IH", blob, off)
        off += 6
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        entries.append(CheckpointEntry(pid, name, arr.astype(np.float64)))
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return entries


def apply_checkpoint(store: ParameterStore, entries: list[CheckpointEntry]) -> None:
    if len(entries) != len(store):
        raise CheckpointError(
            f"checkpoint holds {len(entries)} params, model has {len(store)}"
        )
    by_id = {pid: (name, t) for pid, name, t in store.items()}
    for e in entries:
        if e.param_id not in by_id:
            raise CheckpointError(f"unknown param id {e.param_id} ({e.name})")
        name, t = by_id[e.param_id]
        if name != e.name:
            raise CheckpointError(f"param {e.param_id}: name {e.name!r} != model {name!r}")
        if t.data.shape != e.array.shape:
            raise CheckpointError(
                f"param {e.name}: shape {e.array.shape} != model {t.data.shape}"
            )
        t.data = np.ascontiguousarray(e.array, dtype=np.float64)


def diff_checkpoints(a: str | Path, b: str | Path) -> list[tuple[ParamId, str]]:
    """Ids/names whose raw bytes differ between two checkpoints of one model."""
    ea, eb = load_checkpoint(a), load_checkpoint(b)
    if len(ea) != len(eb):
        raise CheckpointError("checkpoints hold different parameter counts")
    changed: list[tuple[ParamId, str]] = []
    for x, y in zip(ea, eb):
        if x.param_id != y.param_id or x.name != y.name or x.array.shape != y.array.shape:
            raise CheckpointError(f"checkpoints disagree on layout at id {x.param_id}")
        if x.array.tobytes() != y.array.tobytes():
            changed.append((x.param_id, x.name))
    return changed
