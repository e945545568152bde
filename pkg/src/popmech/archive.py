"""Single-file array archive: JSON header followed by raw little-endian float64 buffers.

Layout::

    8 bytes   magic  b"POPMECH\\x01"
    8 bytes   header length H (unsigned little-endian)
    H bytes   UTF-8 JSON header; header["arrays"] lists {"name", "shape"} in order
    ...       concatenated '<f8' buffers in the same order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"POPMECH\x01"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


def write_archive(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArchiveError(f"{path}: no such checkpoint") from None
    if raw[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a popmech archive (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported format version {header.get('format_version')}")
    arrays = {}
    off = 16 + hlen
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(raw):
            raise ArchiveError(f"{path}: truncated while reading {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    return header, arrays
