"""Binary tensor files and parameter-set checkpoints.

Tensor file layout (little-endian): magic ``AGET``, u32 rank, u64 per-dim
sizes, then the float64 payload in row-major order. A checkpoint directory
holds one tensor file per named parameter plus ``manifest.json`` mapping
name -> file -> shape, alongside the serialized model config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AGET"


class CheckpointError(RuntimeError):
    pass


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return tensor_from_bytes(blob, str(path))


def tensor_from_bytes(blob: bytes, origin: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{origin}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    off = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    expect = off + 8 * count
    if len(blob) != expect:
        raise CheckpointError(f"{origin}: payload size {len(blob)} != expected {expect} for shape {dims}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
    return data.reshape(dims).copy()


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<I", arr.ndim)
    for d in arr.shape:
        head += struct.pack("<Q", d)
    return head + arr.tobytes()


def save_checkpoint(path, params, config: dict) -> None:
    """Write every parameter and a manifest under directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(sorted(params, key=lambda p: p.name)):
        fname = f"param_{i:04d}.bin"
        write_tensor(out / fname, p.value.data)
        entries.append({"name": p.name, "file": fname, "shape": list(p.value.shape)})
    manifest = {"params": entries, "config": config}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return (config dict, {name: ndarray}) from a checkpoint directory."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    tensors = {}
    for entry in manifest["params"]:
        arr = read_tensor(root / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"parameter {entry['name']}: shape {list(arr.shape)} != manifest {entry['shape']}")
        tensors[entry["name"]] = arr
    return manifest["config"], tensors
