"""Versioned binary checkpoints.

Layout (all integers little-endian):
  magic "EMSE" | u32 version | u32 json length | config JSON (UTF-8)
  u32 tensor count, then per tensor:
  u16 name length | name UTF-8 | u32 ndim | ndim x u64 extents | f32 values

Values are stored as 32-bit floats, so a float32 module round-trips
bit-identically; float64 parameters are quantized on save.
"""

import json

import numpy as np

from .errors import InputError

MAGIC = b"EMSE"
VERSION = 1


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise InputError(f"checkpoint truncated while reading {what}")
    return buf


def save_checkpoint(path, module, config=None):
    """Write all named parameters of a module plus a JSON-serializable config."""
    blob = json.dumps(config or {}, sort_keys=True).encode()
    entries = list(module.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([VERSION, len(blob)], dtype="<u4").tobytes())
        fh.write(blob)
        fh.write(np.array([len(entries)], dtype="<u4").tobytes())
        for name, p in entries:
            raw = name.encode()
            fh.write(np.array([len(raw)], dtype="<u2").tobytes())
            fh.write(raw)
            fh.write(np.array([p.ndim], dtype="<u4").tobytes())
            fh.write(np.array(p.shape, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return (config dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise InputError(f"{path} is not a checkpoint file")
        version, blob_len = np.frombuffer(_read_exact(fh, 8, "header"), dtype="<u4")
        if version != VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        config = json.loads(_read_exact(fh, int(blob_len), "config").decode())
        count = int(np.frombuffer(_read_exact(fh, 4, "tensor count"), dtype="<u4")[0])
        tensors = {}
        for _ in range(count):
            name_len = int(np.frombuffer(_read_exact(fh, 2, "name length"), dtype="<u2")[0])
            name = _read_exact(fh, name_len, "name").decode()
            ndim = int(np.frombuffer(_read_exact(fh, 4, "ndim"), dtype="<u4")[0])
            shape = tuple(np.frombuffer(_read_exact(fh, 8 * ndim, "extents"), dtype="<u8").astype(int))
            n = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(_read_exact(fh, 4 * n, f"values of {name}"), dtype="<f4")
            tensors[name] = values.reshape(shape).copy()
        if fh.read(1):
            raise InputError("trailing bytes after last tensor")
    return config, tensors


def restore_module(module, tensors):
    """Assign stored values into a compatibly shaped module, by name."""
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise InputError(f"checkpoint/module mismatch; missing={missing} extra={extra}")
    for name, p in params.items():
        stored = tensors[name]
        if stored.shape != p.data.shape:
            raise InputError(f"shape mismatch for {name}: {stored.shape} vs {p.data.shape}")
        p.data[...] = stored.astype(p.data.dtype)
