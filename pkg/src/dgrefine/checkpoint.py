"""Single-file binary checkpoint archive.

Layout: 4-byte magic, uint32 little-endian header length, UTF-8 JSON header,
raw payload. The header records the archive kind, a format version, arbitrary
JSON metadata, the dtype/shape/offset of every array (stored row-major,
little-endian), and a SHA-256 over the payload. Round-trips are bit-exact;
the hash is verified on load and a truncated or bit-flipped file raises
before any array is returned.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError

MAGIC = b"DGRF"


def save_archive(
    path: str | Path,
    kind: str,
    version: int,
    arrays: dict[str, np.ndarray],
    meta: dict,
) -> None:
    """Write arrays + metadata to `path` atomically (temp file then rename)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,  # includes endianness, e.g. "<f4"
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "kind": kind,
        "version": version,
        "meta": meta,
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    tmp.replace(path)


def load_archive(
    path: str | Path, kind: str, version: int
) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive written by `save_archive`, verifying kind, version, hash."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint archive")
    (header_len,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[8 : 8 + header_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc

    if header.get("kind") != kind:
        raise CorruptCheckpointError(
            f"{path}: archive kind {header.get('kind')!r}, expected {kind!r}"
        )
    if header.get("version") != version:
        raise CheckpointVersionError(kind, header.get("version"), version)

    payload = data[8 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CorruptCheckpointError(
            f"{path}: payload hash mismatch (file truncated or corrupted)"
        )

    arrays = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        buf = payload[start : start + n]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]
