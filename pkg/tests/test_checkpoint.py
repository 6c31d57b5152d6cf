"""Checkpoint container: bit-exact round trips and clean failure modes."""

import struct

import numpy as np
import pytest

from catanet import network
from catanet.checkpoint import (
    MAGIC,
    CheckpointError,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
)
from catanet.network import CATANet
from conftest import tiny_config


@pytest.fixture
def trained_ish_model(rng):
    model = CATANet(tiny_config(), seed=5)
    # make the banks look trained so the buffers travel too
    for bank in model.banks:
        bank.centers = rng.standard_normal(bank.centers.shape).astype(np.float32)
        bank.initialized = True
    return model


class TestRoundTrip:
    def test_tensors_bit_exact(self, trained_ish_model, tmp_path):
        p = tmp_path / "m.ckpt"
        checkpoint_save(trained_ish_model, p)
        loaded = checkpoint_load(p)
        assert loaded.config == trained_ish_model.config
        for name, node in trained_ish_model.params.items():
            assert np.array_equal(loaded.params[name].value, node.value), name
        for a, b in zip(loaded.banks, trained_ish_model.banks):
            assert a.initialized
            assert np.array_equal(a.centers, b.centers)

    def test_save_load_save_byte_identical(self, trained_ish_model, tmp_path):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        checkpoint_save(trained_ish_model, p1)
        checkpoint_save(checkpoint_load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_bit_identical_after_round_trip(self, trained_ish_model, tmp_path, rng):
        img = rng.random((3, 8, 8), dtype=np.float32)
        before = network.forward(img, trained_ish_model).value
        p = tmp_path / "m.ckpt"
        checkpoint_save(trained_ish_model, p)
        after = network.forward(img, checkpoint_load(p)).value
        assert np.array_equal(before, after)

    def test_uninitialized_banks_stay_uninitialized(self, tmp_path):
        model = CATANet(tiny_config(), seed=1)
        p = tmp_path / "m.ckpt"
        checkpoint_save(model, p)
        loaded = checkpoint_load(p)
        assert not any(b.initialized for b in loaded.banks)


class TestFailureModes:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_load(p)

    def test_unknown_version(self, trained_ish_model, tmp_path):
        blob = bytearray(checkpoint_bytes(trained_ish_model))
        blob[4:8] = struct.pack("<I", 99)
        p = tmp_path / "v.ckpt"
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(p)

    def test_truncated_payload(self, trained_ish_model, tmp_path):
        blob = checkpoint_bytes(trained_ish_model)
        p = tmp_path / "t.ckpt"
        p.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "h.ckpt"
        p.write_bytes(MAGIC + b"\x01")
        with pytest.raises(CheckpointError):
            checkpoint_load(p)

    def test_shape_table_inconsistency(self, trained_ish_model, tmp_path):
        blob = checkpoint_bytes(trained_ish_model)
        # shrink the declared payload length so the last entry points past it
        idx = blob.rfind(struct.pack("<Q", _payload_len(trained_ish_model)))
        bad = blob[:idx] + struct.pack("<Q", 8) + blob[idx + 8 : idx + 8 + 8]
        p = tmp_path / "s.ckpt"
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            checkpoint_load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            checkpoint_load(tmp_path / "absent.ckpt")


def _payload_len(model) -> int:
    total = sum(p.value.size for p in model.params.values())
    total += sum(b.centers.size for b in model.banks if b.initialized)
    return 4 * total
