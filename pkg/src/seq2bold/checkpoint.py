"""Self-describing binary checkpoint container.

Layout, little-endian: magic "ALGC", u32 version (=1), u64 header length,
UTF-8 JSON header (sorted keys: config, meta, trainable, tensor index),
then raw float64 tensor payloads in index order. The encoding carries no
timestamps or environment state, so save -> load -> save reproduces the
file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError

MAGIC = b"ALGC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    trainable: list[str] | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.tensors)
    index = []
    offset = 0
    blobs = []
    for name in names:
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray promotes
        # them to 1-d, which would corrupt the index).
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64, order="C")
        blob = arr.tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f8", "offset": offset}
        )
        offset += len(blob)
        blobs.append(blob)
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "trainable": sorted(ckpt.trainable) if ckpt.trainable is not None else None,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file shorter than the checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_PREFIX.size :]
    if len(body) < header_len:
        raise TruncationError(f"{path}: header truncated")
    header = json.loads(body[:header_len].decode("utf-8"))
    payload = body[header_len:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        start = entry["offset"]
        chunk = payload[start : start + nbytes]
        if len(chunk) != nbytes:
            raise TruncationError(f"{path}: tensor {entry['name']!r} payload truncated")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    return Checkpoint(
        config=header["config"],
        tensors=tensors,
        meta=header["meta"],
        trainable=header["trainable"],
    )
