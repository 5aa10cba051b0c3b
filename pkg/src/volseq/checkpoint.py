"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"VSQCKPT\\0"
    8       4     uint32 format version
    12      8     uint64 manifest length n
    20      n     UTF-8 JSON manifest
    20+n    p     payload: float64 little-endian tensors, back to back
    end-32  32    SHA-256 of every preceding byte

The manifest lists each tensor as ``{"name", "shape", "offset", "count"}``
with offsets in bytes from the start of the payload, plus the architecture
id, the scale profile, and an echo of the training configuration.  See
``docs/checkpoint-format.md``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError, SchemaError, VersionError, WriteError
from .model import ModelSpec, Profile, build_architecture

MAGIC = b"VSQCKPT\0"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
_HEAD = struct.Struct("<8sIQ")
_DIGEST = 32


def encode_checkpoint(spec: ModelSpec, train_config: dict | None = None, version: int = FORMAT_VERSION) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, arr in spec.named_params():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "architecture": spec.arch.value,
        "profile": spec.profile.as_dict(),
        "dropout_rate": spec.dropout_rate,
        "train_config": train_config or {},
        "tensors": tensors,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    body = _HEAD.pack(MAGIC, version, len(text)) + text + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(spec: ModelSpec, path, train_config: dict | None = None) -> None:
    blob = encode_checkpoint(spec, train_config)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise WriteError(f"cannot write checkpoint {path}: {exc}") from exc


def read_manifest(blob: bytes) -> tuple[dict, bytes]:
    """Verify ``blob`` and return ``(manifest, payload)``."""
    if len(blob) < _HEAD.size + _DIGEST or blob[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic or too short)")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch; file is corrupt")
    _, version, n = _HEAD.unpack_from(body)
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(f"checkpoint format version {version} is not supported (known: {SUPPORTED_VERSIONS})")
    try:
        manifest = json.loads(body[_HEAD.size : _HEAD.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc
    return manifest, body[_HEAD.size + n :]


def decode_checkpoint(blob: bytes) -> tuple[ModelSpec, dict]:
    manifest, payload = read_manifest(blob)
    for key in ("architecture", "profile", "tensors"):
        if key not in manifest:
            raise SchemaError(f"checkpoint manifest lacks {key!r}")
    spec = build_architecture(manifest["architecture"], 0, Profile.from_dict(manifest["profile"]))
    spec.dropout_rate = float(manifest.get("dropout_rate", spec.dropout_rate))
    entries = {}
    for t in manifest["tensors"]:
        if t["name"] in entries:
            raise SchemaError(f"tensor {t['name']!r} appears twice")
        entries[t["name"]] = t
    expected = spec.state_dict()
    missing = sorted(set(expected) - set(entries))
    extra = sorted(set(entries) - set(expected))
    if missing:
        raise SchemaError(f"checkpoint is missing tensors: {', '.join(missing)}")
    if extra:
        raise SchemaError(f"checkpoint has unknown tensors: {', '.join(extra)}")
    for name, arr in expected.items():
        t = entries[name]
        if tuple(t["shape"]) != arr.shape or t["count"] != arr.size:
            raise SchemaError(f"tensor {name} has shape {t['shape']}, expected {list(arr.shape)}")
        end = t["offset"] + 8 * t["count"]
        if end > len(payload):
            raise SchemaError(f"tensor {name} runs past the end of the payload")
        arr[...] = np.frombuffer(payload, dtype="<f8", count=t["count"], offset=t["offset"]).reshape(arr.shape)
    return spec, manifest.get("train_config", {})


def load_checkpoint(path) -> ModelSpec:
    return load_checkpoint_with_config(path)[0]


def load_checkpoint_with_config(path) -> tuple[ModelSpec, dict]:
    return decode_checkpoint(Path(path).read_bytes())
