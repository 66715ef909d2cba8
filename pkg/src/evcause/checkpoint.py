"""Single-file checkpoint format: JSON manifest plus packed float64 arrays.

Layout: 4-byte magic, little-endian uint32 format version, little-endian
uint64 manifest length, the UTF-8 JSON manifest, then every parameter array
concatenated as little-endian float64 in manifest order. Round trips are
bit-exact, so saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"EVCK"
FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(path, kind: str, config: dict, arrays: dict[str, np.ndarray]):
    names = sorted(arrays)
    params = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        params.append({"name": name, "shape": list(arr.shape), "offset": offset,
                       "count": int(arr.size)})
        offset += arr.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "params": params,
        "payload_count": offset,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (manifest, arrays); raises CheckpointError naming the bad section."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    (manifest_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + manifest_len:
        raise CheckpointError(f"{path}: truncated in section 'manifest'")
    try:
        manifest = json.loads(raw[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None
    payload = raw[16 + manifest_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.get("params", []):
        name = entry["name"]
        start = entry["offset"] * 8
        end = start + entry["count"] * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated in section {name!r}")
        flat = np.frombuffer(payload[start:end], dtype="<f8")
        arrays[name] = flat.reshape(entry["shape"]).astype(np.float64)
    expected = manifest.get("payload_count", 0) * 8
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {expected}"
        )
    return manifest, arrays
