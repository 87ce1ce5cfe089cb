"""Deterministic on-disk container for named arrays.

Layout: magic bytes, little-endian u64 length of a UTF-8 JSON manifest, the
manifest, then the raw little-endian array bytes back to back. No timestamps
or compression, so identical contents give identical files (the checkpoint
bit-reproducibility contract).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

CHECKPOINT_MAGIC = b"EVCK1\n"


def write_bundle(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        src = np.asarray(arrays[name])
        arr = np.ascontiguousarray(src)  # note: promotes 0-d to 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(src.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def read_bundle(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(magic):
        raise DataFormatError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)
    (mlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    manifest = json.loads(blob[pos : pos + mlen].decode("utf-8"))
    base = pos + mlen
    arrays = {}
    for e in manifest["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return manifest["meta"], arrays
