"""Binary container: length-prefixed JSON manifest, float64 blocks, checksum.

Layout:
    [u64 little-endian: manifest byte length]
    [manifest: UTF-8 JSON, canonical form]
    [blocks: concatenated little-endian float64 arrays, in manifest order]
    [u64 little-endian checksum: first 8 bytes of SHA-256 over everything above]

The manifest carries a ``blocks`` list of {"name", "shape"} entries so the
payload can be sliced back exactly. Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataIOError

_LEN = struct.Struct("<Q")


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def write_container(path, manifest: dict, blocks: dict[str, np.ndarray]) -> None:
    """Write manifest plus named float64 blocks; insertion order is kept."""
    header = dict(manifest)
    header["blocks"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in blocks.items()
    ]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += _LEN.pack(len(header_bytes))
    body += header_bytes
    for arr in blocks.values():
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += _checksum(bytes(body))
    Path(path).write_bytes(bytes(body))


def read_container(path, expected_kind: str | None = None,
                   expected_version: int | None = None
                   ) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; returns (manifest, blocks)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _LEN.size + 8:
        raise DataIOError(f"{path}: truncated file ({len(raw)} bytes)")
    payload, stored = raw[:-8], raw[-8:]
    if _checksum(payload) != stored:
        raise DataIOError(f"{path}: checksum failure")
    (header_len,) = _LEN.unpack(payload[: _LEN.size])
    header_end = _LEN.size + header_len
    if header_end > len(payload):
        raise DataIOError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(payload[_LEN.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIOError(f"{path}: corrupt manifest: {exc}") from exc
    if expected_kind is not None and manifest.get("kind") != expected_kind:
        raise DataIOError(
            f"{path}: expected kind {expected_kind!r}, found {manifest.get('kind')!r}"
        )
    if expected_version is not None and manifest.get("schema_version") != expected_version:
        raise DataIOError(
            f"{path}: schema version mismatch: expected {expected_version}, "
            f"found {manifest.get('schema_version')}"
        )
    blocks: dict[str, np.ndarray] = {}
    offset = header_end
    for entry in manifest.get("blocks", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * n
        if end > len(payload):
            raise DataIOError(f"{path}: truncated block {entry['name']!r}")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape)
        blocks[entry["name"]] = arr.astype(np.float64, copy=True)
        offset = end
    if offset != len(payload):
        raise DataIOError(f"{path}: {len(payload) - offset} trailing bytes after blocks")
    return manifest, blocks
