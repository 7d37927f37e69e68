"""Versioned binary container for named float64 tensors plus a JSON header.

Layout::

    b"SIMMT-CKPT\\n"
    uint64 (little endian) header length H
    H bytes of UTF-8 JSON: {"format_version", "tensors": [{"name", "shape", "offset"}], ...}
    payload: every tensor as row-major little-endian float64, concatenated

Float payloads round-trip bit-exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SIMMT-CKPT\n"
FORMAT_VERSION = 1


def save_container(path, tensors: dict[str, np.ndarray], header: dict) -> None:
    index, offset = [], 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header, format_version=FORMAT_VERSION, tensors=index)
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f"{path}: corrupt checkpoint header ({err})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = off + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        if start + 8 * count > len(raw):
            raise DataError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                               offset=start).reshape(shape).astype(np.float64)
    return tensors, header
