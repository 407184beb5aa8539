"""Checkpoint container: little-endian "CMDC" files.

Layout: magic, version u32, hierarchy fingerprint u64, JSON-encoded
architecture config block, then a named float32 tensor table.  An
optional optimizer section (step count + moment tensors) follows.
Round-trips are bitwise: tensors are stored as raw float32.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CMDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: dict
    fingerprint: int
    optimizer: dict | None = None
    optimizer_t: int = 0


def _write_tensor_table(fh, tensors):
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes())


def _read_tensor_table(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        buf = fh.read(4 * size)
        if len(buf) != 4 * size:
            raise CheckpointError(f"truncated tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out


def save_checkpoint(path, config, params, fingerprint, optimizer=None,
                    optimizer_t=0):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", fingerprint & 0xFFFFFFFFFFFFFFFF))
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_tensor_table(fh, params)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", optimizer_t))
            _write_tensor_table(fh, optimizer)


def load_checkpoint(path, expect_fingerprint=None) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} unsupported "
                f"(expected {VERSION}); refusing to guess the layout")
        (fingerprint,) = struct.unpack("<Q", fh.read(8))
        (blen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(blen).decode("utf-8"))
        params = _read_tensor_table(fh)
        flag = fh.read(1)
        optimizer = None
        opt_t = 0
        if flag and flag[0] == 1:
            (opt_t,) = struct.unpack("<Q", fh.read(8))
            optimizer = _read_tensor_table(fh)
    if (expect_fingerprint is not None
            and fingerprint != expect_fingerprint & 0xFFFFFFFFFFFFFFFF):
        raise CheckpointError(
            f"{path}: checkpoint was built on a different hierarchy "
            f"(fingerprint {fingerprint:#x} != expected "
            f"{expect_fingerprint:#x}); rebuild or pass the matching mesh")
    return Checkpoint(version, config, params, fingerprint, optimizer, opt_t)


def model_report(params, scope="dec."):
    """Parameter count and serialized byte size of one model scope."""
    scoped = {k: v for k, v in params.items() if k.startswith(scope)}
    if not scoped:
        raise CheckpointError(f"no parameters under scope {scope!r}")
    count = int(sum(v.size for v in scoped.values()))
    buf = io.BytesIO()
    _write_tensor_table(buf, scoped)
    return count, buf.getbuffer().nbytes
