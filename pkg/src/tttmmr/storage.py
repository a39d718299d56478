"""Manifest + float64 blob container used for datasets and checkpoints.

Layout::

    MAGIC (8 bytes) | manifest length (uint64 LE) | manifest (UTF-8 JSON) | blobs

Blobs are little-endian float64, concatenated; the manifest records the
offset (in float64 elements, relative to the blob region) and the length of
each one.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTTMMR\x00\x01"


class ContainerError(ValueError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_container(path, manifest: dict, blobs: list) -> None:
    """Write ``manifest`` and ``blobs`` (arrays) to ``path``.

    ``manifest["blobs"]`` is filled in with ``[offset, length]`` pairs.
    """
    offsets = []
    pos = 0
    for b in blobs:
        n = int(np.asarray(b).size)
        offsets.append([pos, n])
        pos += n
    manifest = dict(manifest, blobs=offsets, blob_dtype="<f8")
    head = dumps_json(manifest).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_container(path):
    """Return ``(manifest, [flat float64 arrays])``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt manifest") from exc
    body = np.frombuffer(raw, dtype="<f8", offset=16 + n)
    blobs = []
    for off, length in manifest["blobs"]:
        if off + length > body.size:
            raise ContainerError(f"{path}: truncated blob region")
        blobs.append(body[off : off + length].astype(np.float64))
    return manifest, blobs
