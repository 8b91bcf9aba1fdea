"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"FVITACKP"
    u32 header length | header JSON (utf-8, sorted keys) | u32 crc32(header)
    for each blob, in sorted name order:
        u64 byte length | float32 data | u32 crc32(data)

The header lists every blob's name, shape and byte length, so truncation and
single-byte corruption are both detected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigHashMismatch, IntegrityError, SchemaVersionError
from .io import atomic_write_bytes

SCHEMA = "fvita-ckpt-1"
MAGIC = b"FVITACKP"


@dataclass
class Checkpoint:
    params: dict  # name -> float32 ndarray
    metadata: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def module_blobs(prefix: str, module) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype("<f4")
            for k, v in module.state_dict().items()}


def load_module(module, blobs: dict) -> None:
    import torch

    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in blobs.items()}
    module.load_state_dict(state)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    arrays = [np.ascontiguousarray(ckpt.params[n], dtype="<f4") for n in names]
    header = {
        "schema": SCHEMA,
        "metadata": ckpt.metadata,
        "blobs": [{"name": n, "shape": list(a.shape), "nbytes": a.nbytes} for n, a in zip(names, arrays)],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes, struct.pack("<I", zlib.crc32(hbytes))]
    for a in arrays:
        data = a.tobytes()
        parts += [struct.pack("<Q", len(data)), data, struct.pack("<I", zlib.crc32(data))]
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    def take(pos, n, what):
        if pos + n > len(buf):
            raise IntegrityError(f"{source}: truncated while reading {what}")
        return buf[pos:pos + n], pos + n

    magic, pos = take(0, len(MAGIC), "magic")
    if magic != MAGIC:
        raise IntegrityError(f"{source}: not a checkpoint file")
    raw, pos = take(pos, 4, "header length")
    (hlen,) = struct.unpack("<I", raw)
    hbytes, pos = take(pos, hlen, "header")
    raw, pos = take(pos, 4, "header checksum")
    if struct.unpack("<I", raw)[0] != zlib.crc32(hbytes):
        raise IntegrityError(f"{source}: header checksum mismatch")
    header = json.loads(hbytes)
    if header.get("schema") != SCHEMA:
        raise SchemaVersionError(f"{source}: checkpoint schema {header.get('schema')!r}, expected {SCHEMA!r}")
    params = {}
    for entry in header["blobs"]:
        name = entry["name"]
        raw, pos = take(pos, 8, f"length of {name}")
        (n,) = struct.unpack("<Q", raw)
        if n != entry["nbytes"]:
            raise IntegrityError(f"{source}: blob {name} length {n} != declared {entry['nbytes']}")
        data, pos = take(pos, n, f"blob {name}")
        raw, pos = take(pos, 4, f"checksum of {name}")
        if struct.unpack("<I", raw)[0] != zlib.crc32(data):
            raise IntegrityError(f"{source}: checksum mismatch in blob {name}")
        params[name] = np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).copy()
    if pos != len(buf):
        raise IntegrityError(f"{source}: {len(buf) - pos} trailing bytes")
    return Checkpoint(params, header["metadata"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expected_config_hash: str | None = None, force: bool = False) -> Checkpoint:
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    stored = ckpt.metadata.get("config_hash")
    if expected_config_hash is not None and stored != expected_config_hash and not force:
        raise ConfigHashMismatch(f"{path}: config hash {stored} does not match {expected_config_hash}; "
                                 "pass force=True (--force) to load anyway")
    return ckpt
