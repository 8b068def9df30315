"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"CDDCKPT\\0"
    offset 8   uint32    format version (currently 1)
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header, keys sorted:
                           {"config": {...}, "meta": {...}, "step": int,
                            "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    offset 16+H          tensor payloads, concatenated in header order, each the
                         row-major float64 ('<f8') values of that tensor

The same container holds teacher/student/slim models, optimizer momentum
(names prefixed ``opt/``), gallery queues (``queue/``) and dataset dumps.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CDDCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    config: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)


def dumps(ckpt):
    names = list(ckpt.tensors)
    arrays = [np.ascontiguousarray(ckpt.tensors[n], dtype="<f8") for n in names]
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "step": int(ckpt.step),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(raw)), raw]
    parts.extend(a.tobytes() for a in arrays)
    return b"".join(parts)


def loads(buf):
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(buf):
            raise CheckpointError(f"truncated payload for tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(
            np.float64
        )
        offset = end
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after payload")
    return Checkpoint(tensors, header.get("config", {}), header.get("step", 0), header.get("meta", {}))


def save(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
