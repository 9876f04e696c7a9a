"""Versioned binary blob format used for training checkpoints.

Layout: 8-byte magic, u64 little-endian header length, JSON header
(metadata plus an array table with name/dtype/shape/offset), then the raw
little-endian array payloads back to back. Writes are atomic and loads are
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"FINCKPT1"
FORMAT_VERSION = 1


def save_blob(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        table.append(
            {"name": name, "dtype": "f8", "shape": list(arr.shape), "offset": len(payload), "nbytes": arr.nbytes}
        )
        payload += arr.tobytes()
    header = json.dumps(
        {"format": "finid-checkpoint", "version": FORMAT_VERSION, "meta": meta, "arrays": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))
    os.replace(tmp, path)


def load_blob(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"trainer: checkpoint not found: {path}") from None
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"trainer: {path} is not a finid checkpoint")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + header_len
    if header_end > len(raw):
        raise CheckpointError(f"trainer: {path} is truncated (header)")
    try:
        header = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"trainer: {path} has a corrupt header") from None
    if header.get("format") != "finid-checkpoint":
        raise CheckpointError(f"trainer: {path} has unknown format tag {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"trainer: {path} is version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    arrays: dict[str, np.ndarray] = {}
    payload = raw[header_end:]
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"trainer: {path} is truncated (array {entry['name']!r})")
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f8").reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float64)
    return header["meta"], arrays


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
