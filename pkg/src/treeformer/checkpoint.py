"""Binary checkpoint persistence.

Layout (all integers little-endian):
  header: u32 format version, 32-byte config digest, u64 step, u32 record count
  record: u32 name length, utf-8 name, u32 rank, u64 extent per axis,
          float32 payload

Float payloads round-trip bit-exactly.  Writes go through a temp file and
an atomic rename.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

FORMAT_VERSION = 1
_DIGEST_BYTES = 32


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    step: int
    config_digest: bytes


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    if len(checkpoint.config_digest) != _DIGEST_BYTES:
        raise ValueError(f"config digest must be {_DIGEST_BYTES} bytes")
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(checkpoint.config_digest)
        fh.write(struct.pack("<QI", checkpoint.step, len(checkpoint.params)))
        for name, value in checkpoint.params.items():
            raw = name.encode("utf-8")
            # ascontiguousarray would promote rank-0 values to rank 1
            arr = np.asarray(value, dtype="<f4", order="C")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(os.fspath(path), "rb") as fh:
        version = struct.unpack("<I", fh.read(4))[0]
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        digest = fh.read(_DIGEST_BYTES)
        step, count = struct.unpack("<QI", fh.read(12))
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<I", fh.read(4))[0]
            name = fh.read(name_len).decode("utf-8")
            rank = struct.unpack("<I", fh.read(4))[0]
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
            params[name] = data.astype(np.float32)
    return Checkpoint(params=params, step=step, config_digest=digest)


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Per-parameter arithmetic mean (accumulated in float64); step = max."""
    if not checkpoints:
        raise ValueError("cannot average zero checkpoints")
    names = set(checkpoints[0].params)
    for ckpt in checkpoints[1:]:
        if set(ckpt.params) != names:
            raise ValueError("checkpoints disagree on parameter names")
        for name in names:
            if ckpt.params[name].shape != checkpoints[0].params[name].shape:
                raise ValueError(f"checkpoints disagree on shape of {name}")
    k = len(checkpoints)
    averaged = {
        name: (
            sum(c.params[name].astype(np.float64) for c in checkpoints) / k
        ).astype(np.float32)
        for name in checkpoints[0].params
    }
    return Checkpoint(
        params=averaged,
        step=max(c.step for c in checkpoints),
        config_digest=checkpoints[0].config_digest,
    )


def list_checkpoints(directory) -> List[str]:
    """Checkpoint files in ``directory`` sorted by ascending step."""
    directory = os.fspath(directory)
    if not os.path.isdir(directory):
        return []
    names = [n for n in os.listdir(directory) if n.startswith("step_") and n.endswith(".ckpt")]
    return [os.path.join(directory, n) for n in sorted(names)]
