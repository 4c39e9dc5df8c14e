"""Checkpoint container: round trips, strict layout checks, diffing."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from markvlm.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    apply_checkpoint,
    diff_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from markvlm.tensor import ParameterStore, Tensor


def _store(values) -> ParameterStore:
    store = ParameterStore()
    for name, arr in values:
        store.register(name, Tensor(np.asarray(arr, dtype=np.float64)))
    return store


def _demo_store() -> ParameterStore:
    rng = np.random.default_rng(3)
    return _store(
        [
            ("enc.w", rng.normal(size=(3, 4))),
            ("enc.b", np.zeros(4)),
            ("head.scale", np.array(2.5)),
        ]
    )


def test_round_trip_preserves_everything(tmp_path):
    store = _demo_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    entries = load_checkpoint(path)
    assert [(e.param_id, e.name) for e in entries] == [
        (0, "enc.w"),
        (1, "enc.b"),
        (2, "head.scale"),
    ]
    for (pid, name, t), e in zip(store.items(), entries):
        assert e.array.shape == t.data.shape
        np.testing.assert_array_equal(e.array, t.data)


def test_apply_restores_bytes(tmp_path):
    store = _demo_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    original = {name: t.data.tobytes() for _, name, t in store.items()}
    for _, _, t in store.items():
        t.data = t.data + 1.0
    apply_checkpoint(store, load_checkpoint(path))
    assert {name: t.data.tobytes() for _, name, t in store.items()} == original


def test_param_ids_stable_across_save_load(tmp_path):
    store = _demo_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    rebuilt = _demo_store()
    apply_checkpoint(rebuilt, load_checkpoint(path))
    assert store.names() == rebuilt.names()
    assert [pid for pid, _, _ in rebuilt.items()] == [pid for pid, _, _ in store.items()]


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "future.ckpt"
    path.write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION + 1, 0))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    store = _demo_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_apply_rejects_renamed_param(tmp_path):
    store = _demo_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    other = _store(
        [
            ("enc.w", np.zeros((3, 4))),
            ("enc.bias", np.zeros(4)),
            ("head.scale", np.array(0.0)),
        ]
    )
    with pytest.raises(CheckpointError, match="name"):
        apply_checkpoint(other, load_checkpoint(path))


def test_apply_rejects_shape_change(tmp_path):
    store = _demo_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    other = _store(
        [
            ("enc.w", np.zeros((4, 3))),
            ("enc.b", np.zeros(4)),
            ("head.scale", np.array(0.0)),
        ]
    )
    with pytest.raises(CheckpointError, match="shape"):
        apply_checkpoint(other, load_checkpoint(path))


def test_diff_reports_exactly_the_changed_params(tmp_path):
    store = _demo_store()
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, store)
    save_checkpoint(b, store)
    assert diff_checkpoints(a, b) == []

    store.tensor("enc.b").data = store.tensor("enc.b").data + 1e-12
    save_checkpoint(b, store)
    assert diff_checkpoints(a, b) == [(1, "enc.b")]


def test_diff_rejects_mismatched_layouts(tmp_path):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, _demo_store())
    save_checkpoint(b, _store([("x", np.zeros(1))]))
    with pytest.raises(CheckpointError):
        diff_checkpoints(a, b)
