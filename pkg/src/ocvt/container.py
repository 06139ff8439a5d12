"""Self-describing binary container for named numpy arrays.

One file = magic + JSON header + raw little-endian array payloads. The byte
layout is fully determined by the contents (sorted keys, no timestamps), so
identical arrays always serialize to identical bytes and file hashes are
stable across exports.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"OCVTREC1"


def _canonical_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return dt.str


def write_container(path, arrays: dict, meta: dict | None = None) -> bytes:
    """Serialize `arrays` (+ JSON-able `meta`) to `path`. Returns the bytes written."""
    entries = {}
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries[name] = {
            "dtype": _canonical_dtype(arr),
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload.extend(raw)
    header = json.dumps(
        {"arrays": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def read_container(path):
    """Load a container written by `write_container`. Returns (arrays, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an OCVT record container")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_start = len(MAGIC) + 4
    header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    base = header_start + header_len
    arrays = {}
    for name, entry in header["arrays"].items():
        raw = blob[base + entry["offset"] : base + entry["offset"] + entry["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
