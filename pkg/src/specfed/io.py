"""Versioned binary container for bank snapshots, checkpoints and datasets.

Layout (all integers little-endian)::

    8 bytes   magic  b"SPECFED\\0"
    4 bytes   schema version (uint32)
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header: {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    ...       raw array payloads, C order, offsets relative to the payload start

Output is a deterministic function of the inputs.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import SpecfedError

MAGIC = b"SPECFED\0"
SCHEMA_VERSION = 1


class ContainerError(SpecfedError):
    """The file is not a readable container of the expected kind and version."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": _jsonable(meta), "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", SCHEMA_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != SCHEMA_VERSION:
        raise ContainerError(f"{path}: unsupported schema version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ContainerError(f"{path}: expected a {expected_kind!r} container, found {header['kind']!r}")
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header["meta"], arrays
