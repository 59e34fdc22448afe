"""VIAC checkpoint files: a flat list of named float32 tensors.

Layout (little-endian): magic ``VIAC``, u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, u32 dims, float32 payload.
Integer metadata (step counter, config hash words) ride along as tensors under
``meta.*``; every value stored there is an integer below 2**16 so float32
holds it exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VIAC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:32]


def _hash_words(h: str) -> np.ndarray:
    return np.array([int(h[i:i + 4], 16) for i in range(0, 32, 4)], dtype=np.float32)


def _words_hash(w: np.ndarray) -> str:
    return "".join(f"{int(v):04x}" for v in w)


def _int_words(n: int) -> np.ndarray:
    return np.array([(n >> s) & 0xFFFF for s in (48, 32, 16, 0)], dtype=np.float32)


def _words_int(w: np.ndarray) -> int:
    out = 0
    for v in w:
        out = (out << 16) | int(v)
    return out


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported VIAC version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(blob):
                raise CheckpointError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
            pos += size
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after {count} tensors")
    return out


def save(path, tensors: dict[str, np.ndarray], step: int, cfg_hash: str,
         config: dict | None = None) -> None:
    """Write the VIAC file and, when given, the resolved config as ``<path>.json``."""
    path = Path(path)
    payload = dict(tensors)
    payload["meta.step"] = _int_words(step)
    payload["meta.config_hash"] = _hash_words(cfg_hash)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(payload))
    tmp.replace(path)
    if config is not None:
        side = sidecar(path)
        tmp = side.with_name(side.name + ".tmp")
        tmp.write_text(json.dumps(dict(config=config, config_hash=cfg_hash, step=step),
                                  indent=1, sort_keys=True))
        tmp.replace(side)


def load(path, expect_hash: str | None = None):
    """Returns ``(tensors, step, config_hash)``."""
    tensors = decode(Path(path).read_bytes())
    try:
        step = _words_int(tensors.pop("meta.step"))
        h = _words_hash(tensors.pop("meta.config_hash"))
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks {e.args[0]}") from None
    if expect_hash is not None and h != expect_hash:
        raise ConfigMismatchError(f"checkpoint config hash {h} does not match {expect_hash}")
    return tensors, step, h


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_config(path) -> dict:
    side = sidecar(path)
    if not side.exists():
        raise CheckpointError(f"missing config sidecar {side}")
    return json.loads(side.read_text())["config"]
