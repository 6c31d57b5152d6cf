"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"CATA"
    version u32      currently 1
    cfg_len u32      followed by cfg_len bytes of "key=value" lines (utf-8)
    n_entry u32
    entry * n_entry:
        name_len u16, name bytes (utf-8)
        dtype    u8   0 = float32
        kind     u8   0 = parameter, 1 = buffer (token centers)
        ndim     u8
        dims     u32 * ndim
        offset   u64  byte offset into the payload
    payload_len u64
    payload     float32 little-endian, entries back to back

Round trips are bit-exact, including the center buffers; uninitialized
center banks are simply absent from the table.
"""

from __future__ import annotations

import dataclasses
import io
import struct

import numpy as np

from .network import CATANet, ModelConfig

MAGIC = b"CATA"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


def _config_to_text(config: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items())


def _config_from_text(text: str) -> ModelConfig:
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kwargs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        if key not in fields:
            raise CheckpointError(f"unknown config key {key!r} in checkpoint")
        kwargs[key] = float(raw) if fields[key] == "float" else int(raw)
    try:
        return ModelConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad config block: {e}") from e


def checkpoint_bytes(model: CATANet) -> bytes:
    """Serialize a model (weights, initialized center banks, config)."""
    entries = []
    payload = io.BytesIO()
    for name, node in model.params.items():
        entries.append((name, 0, node.value))
    for i, bank in enumerate(model.banks):
        if bank.initialized:
            entries.append((f"rg{i}.tab.centers", 1, bank.centers))

    table = io.BytesIO()
    offset = 0
    for name, kind, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode("utf-8")
        table.write(struct.pack("<H", len(nb)))
        table.write(nb)
        table.write(struct.pack("<BBB", 0, kind, arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        table.write(struct.pack("<Q", offset))
        payload.write(raw)
        offset += len(raw)

    cfg = _config_to_text(model.config).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", len(entries)))
    out.write(table.getvalue())
    out.write(struct.pack("<Q", offset))
    out.write(payload.getvalue())
    return out.getvalue()


def checkpoint_save(model: CATANet, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def checkpoint_load(path) -> CATANet:
    """Rebuild a model from a checkpoint; fails cleanly, never half-loaded."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.read(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = _config_from_text(r.read(cfg_len).decode("utf-8"))
    (n_entries,) = r.unpack("<I")
    table = []
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.read(name_len).decode("utf-8")
        dtype, kind, ndim = r.unpack("<BBB")
        if dtype != 0:
            raise CheckpointError(f"unknown dtype tag {dtype} for {name!r}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        table.append((name, kind, shape, offset))
    (payload_len,) = r.unpack("<Q")
    payload = r.read(payload_len)

    model = CATANet(config, init="zeros")
    seen = set()
    for name, kind, shape, offset in table:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * size
        if end > payload_len:
            raise CheckpointError(f"entry {name!r} points past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        arr = arr.reshape(shape).astype(np.float32)
        if kind == 0:
            node = model.params.get(name)
            if node is None:
                raise CheckpointError(f"checkpoint has unknown parameter {name!r}")
            if node.value.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: file {arr.shape}, model {node.value.shape}"
                )
            node.value = arr
        elif kind == 1:
            idx = _bank_index(name, len(model.banks))
            if model.banks[idx].centers.shape != arr.shape:
                raise CheckpointError(f"center shape mismatch for {name!r}")
            model.banks[idx].centers = arr
            model.banks[idx].initialized = True
        else:
            raise CheckpointError(f"unknown entry kind {kind} for {name!r}")
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    return model


def _bank_index(name: str, n_banks: int) -> int:
    if not (name.startswith("rg") and name.endswith(".tab.centers")):
        raise CheckpointError(f"unknown buffer entry {name!r}")
    try:
        idx = int(name[2 : -len(".tab.centers")])
    except ValueError:
        raise CheckpointError(f"unknown buffer entry {name!r}") from None
    if not (0 <= idx < n_banks):
        raise CheckpointError(f"buffer {name!r} out of range for {n_banks} groups")
    return idx
