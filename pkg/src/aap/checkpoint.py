"""Bit-exact checkpoint persistence for weights, masks and round metadata.

File layout: magic ``AAP1``, a little-endian uint32 header length, a UTF-8
JSON header (tensor names, shapes, dtypes, payload offsets, metadata), then
the raw tensor payloads. Tensors are stored little-endian; masks are stored
as packed bit vectors. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import ModelGraph

MAGIC = b"AAP1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    epoch: int
    round_index: int
    tensors: dict[str, np.ndarray]
    masks: dict[int, np.ndarray]
    meta: dict = field(default_factory=dict)


def _le_dtype(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr, dtype=dt)


def save(model: ModelGraph, trainer_state=None, meta: Optional[dict] = None,
         path=None, epoch: int = 0, round_index: int = 0) -> str:
    """Serialize model weights, masks and metadata; returns a content-hash id."""
    if path is None:
        raise ValueError("path required")
    tensors: dict[str, np.ndarray] = {}
    for i, p in sorted(model.params.items()):
        tensors[f"layer{i}.w"] = p["w"]
        tensors[f"layer{i}.b"] = p["b"]
    if trainer_state is not None:
        for i, v in sorted(trainer_state.velocity.items()):
            tensors[f"layer{i}.vel_w"] = v["w"]
            tensors[f"layer{i}.vel_b"] = v["b"]

    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = _le_dtype(arr)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "offset": len(payload),
                        "nbytes": len(raw)})
        payload += raw
    mask_entries = []
    for i, m in sorted(model.masks.items()):
        raw = np.packbits(m).tobytes()
        mask_entries.append({"layer": i, "count": int(m.size),
                             "offset": len(payload), "nbytes": len(raw)})
        payload += raw

    header = {
        "version": FORMAT_VERSION,
        "fingerprint": model.fingerprint(),
        "epoch": epoch,
        "round": round_index,
        "tensors": entries,
        "masks": mask_entries,
        "meta": meta or {},
    }
    hraw = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<I", len(hraw)) + hraw + bytes(payload)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(blob).hexdigest()


def read_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    return json.loads(raw[8:8 + hlen].decode())


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = p.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode())
    body = raw[8 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(body, dtype=np.dtype(e["dtype"]),
                            count=int(np.prod(e["shape"])) if e["shape"] else 1,
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    masks = {}
    for e in header["masks"]:
        packed = np.frombuffer(body, dtype=np.uint8, count=e["nbytes"], offset=e["offset"])
        masks[e["layer"]] = np.unpackbits(packed)[: e["count"]].astype(bool)
    return Checkpoint(header["fingerprint"], header["epoch"], header["round"],
                      tensors, masks, header.get("meta", {}))


def rollback(model: ModelGraph, ckpt: Checkpoint) -> ModelGraph:
    """Restore weights and masks from a checkpoint, in place."""
    if ckpt.fingerprint != model.fingerprint():
        raise FingerprintMismatchError(
            f"checkpoint fingerprint {ckpt.fingerprint} != model {model.fingerprint()}")
    for i, p in model.params.items():
        p["w"][...] = ckpt.tensors[f"layer{i}.w"]
        p["b"][...] = ckpt.tensors[f"layer{i}.b"]
    for i in model.masks:
        model.masks[i][...] = ckpt.masks[i]
    model.apply_masks()
    return model
