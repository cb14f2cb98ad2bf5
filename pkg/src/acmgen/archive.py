"""Named-tensor archive: a binary payload file plus a JSON manifest.

Layout of ``tensors.bin`` (all integers little-endian)::

    b"ACMT" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 ndim | ndim x u64 dim | float64 payload )

``manifest.json`` carries ``format_version`` and whatever metadata the caller
supplies.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = "v1"
MAGIC = b"ACMT"
TENSORS_FILE = "tensors.bin"
MANIFEST_FILE = "manifest.json"


class ArchiveError(RuntimeError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive")
    version, count = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = arr.astype(np.float64)
    return out


def save(directory, tensors: dict[str, np.ndarray], manifest: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensors(d / (TENSORS_FILE + ".tmp"), tensors)
    os.replace(d / (TENSORS_FILE + ".tmp"), d / TENSORS_FILE)
    body = dict(manifest)
    body["format_version"] = FORMAT_VERSION
    (d / (MANIFEST_FILE + ".tmp")).write_text(json.dumps(body, indent=1, sort_keys=True))
    os.replace(d / (MANIFEST_FILE + ".tmp"), d / MANIFEST_FILE)
    return d


def load(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    if not (d / MANIFEST_FILE).exists():
        raise ArchiveError(f"{d}: no {MANIFEST_FILE}")
    manifest = json.loads((d / MANIFEST_FILE).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"{d}: format_version {manifest.get('format_version')!r} != {FORMAT_VERSION!r}")
    return read_tensors(d / TENSORS_FILE), manifest
