"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"BMCKPT\\x00\\x01"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: config, seed, metadata and one entry per array
              (name, dtype such as "<f4", shape, offset, nbytes)
    padding   zero bytes up to an 8-byte boundary
    blobs     raw little-endian array data at the recorded offsets
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init_params

MAGIC = b"BMCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, t in params.tensors().items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format": "blackmamba-checkpoint", "version": VERSION, "config": params.config.to_dict(),
                         "seed": params.seed, "metadata": metadata or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    pad = (-len(prefix)) % 8
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(prefix + b"\x00" * pad)
        for b in blobs:
            fh.write(b)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
    start = 8 + 12 + hlen
    return header, start + (-start) % 8


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    header, data_start = read_header(path)
    config = ModelConfig.from_dict(header["config"])
    params = init_params(config, header.get("seed", 0))
    tensors = params.tensors()
    listed = {e["name"] for e in header["tensors"]}
    if listed != set(tensors):
        missing = sorted(set(tensors) - listed)
        extra = sorted(listed - set(tensors))
        raise CheckpointError(f"{path}: array names disagree with config (missing {missing}, unexpected {extra})")
    raw = Path(path).read_bytes()
    for e in header["tensors"]:
        start = data_start + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        target = tensors[e["name"]]
        if tuple(e["shape"]) != target.shape:
            raise CheckpointError(f"{path}: {e['name']} has shape {e['shape']}, config expects {target.shape}")
        target.data = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return params, header.get("metadata", {})
