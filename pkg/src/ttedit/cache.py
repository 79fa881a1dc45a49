"""Versioned binary container for inversion caches and toy weights.

Layout (all integers little-endian)::

    b"BRTC"              magic
    u32                  format version
    u32                  header length in bytes
    header               UTF-8 JSON, sorted keys; lists payload arrays in order
    u64                  payload length in bytes
    payload              concatenated little-endian float32 arrays
    u64                  checksum: first 8 bytes of BLAKE2b(payload)

The header is parsed and validated before the payload is touched.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone.base import TextEmbedding
from .diffusion import Trajectory
from .errors import CacheChecksumError, CacheError, CacheMagicError, CacheTruncatedError, CacheVersionError
from .ttis import FineTunedSchedule, InversionMode

MAGIC = b"BRTC"
FORMAT_VERSION = 1

KIND_INVERSION = "inversion"
KIND_WEIGHTS = "toy-weights"


def checksum(payload: bytes) -> int:
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def pack(kind: str, meta: dict, arrays: dict) -> bytes:
    """Serialize ``arrays`` (name -> array-like) with a JSON ``meta`` header."""
    specs, chunks = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        specs.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(header)),
        header,
        struct.pack("<Q", len(payload)),
        payload,
        struct.pack("<Q", checksum(payload)),
    ])


def unpack(data: bytes, expect_kind: Optional[str] = None):
    """Inverse of :func:`pack`; returns ``(kind, meta, arrays)``."""
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CacheMagicError("not a cache container (bad magic)")
    raw = buf.read(4)
    if len(raw) < 4:
        raise CacheTruncatedError("container truncated inside the version field")
    (version,) = struct.unpack("<I", raw)
    if version != FORMAT_VERSION:
        raise CacheVersionError(
            f"container format version {version} is not supported (expected {FORMAT_VERSION}); "
            "re-run `invert` to regenerate it"
        )
    raw = buf.read(4)
    if len(raw) < 4:
        raise CacheTruncatedError("container truncated inside the header length")
    (header_len,) = struct.unpack("<I", raw)
    raw = buf.read(header_len)
    if len(raw) < header_len:
        raise CacheTruncatedError("container truncated inside the header")
    try:
        header = json.loads(raw.decode())
        kind, meta, specs = header["kind"], header["meta"], header["arrays"]
        sizes = [4 * int(np.prod(s["shape"], dtype=np.int64)) for s in specs]
    except (ValueError, KeyError, TypeError) as exc:
        raise CacheError(f"unreadable container header: {exc}") from exc
    if expect_kind is not None and kind != expect_kind:
        raise CacheError(f"expected a {expect_kind!r} container, found {kind!r}")

    raw = buf.read(8)
    if len(raw) < 8:
        raise CacheTruncatedError("container truncated before the payload")
    (payload_len,) = struct.unpack("<Q", raw)
    if payload_len != sum(sizes):
        raise CacheError("payload length disagrees with the header")
    payload = buf.read(payload_len)
    tail = buf.read(8)
    if len(payload) < payload_len or len(tail) < 8:
        raise CacheTruncatedError(f"payload truncated ({len(payload)} of {payload_len} bytes)")
    (stored,) = struct.unpack("<Q", tail)
    if stored != checksum(payload):
        raise CacheChecksumError("payload checksum mismatch")
    if buf.read(1):
        raise CacheError("trailing bytes after checksum")

    arrays, offset = {}, 0
    for spec, size in zip(specs, sizes):
        arrays[spec["name"]] = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset).reshape(spec["shape"])
        offset += size
    return kind, meta, arrays


@dataclass
class CacheFile:
    """Everything ``edit`` and ``reconstruct`` need from an ``invert`` run."""

    prompt: str
    mode: InversionMode
    sampler: dict
    optimizer: dict
    backbone: dict
    seed: int
    inversion: Trajectory
    initial: Trajectory
    schedule: FineTunedSchedule
    phi_cond: TextEmbedding
    image: np.ndarray  # original uint8 RGB
    extra: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.schedule)

    def to_bytes(self) -> bytes:
        meta = {
            "prompt": self.prompt,
            "mode": InversionMode(self.mode).value,
            "steps": self.steps,
            "embedding_shape": list(self.phi_cond.shape),
            "latent_shape": list(self.inversion.z_0.shape),
            "sampler": self.sampler,
            "optimizer": self.optimizer,
            "backbone": self.backbone,
            "seed": self.seed,
            "inversion_guidance": self.inversion.guidance_scale,
            "extra": self.extra,
        }
        arrays = {
            "inversion": self.inversion.stacked().numpy(),
            "initial": self.initial.stacked().numpy(),
            "schedule": torch.stack([e.tokens for e in self.schedule.embeddings]).numpy(),
            "per_step_loss": np.asarray(self.schedule.per_step_loss),
            "iterations": np.asarray(self.schedule.iterations_used),
            "fixed": self.schedule.fixed.tokens.numpy(),
            "phi_cond": self.phi_cond.tokens.numpy(),
            "image": self.image.astype(np.float32),
        }
        return pack(KIND_INVERSION, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CacheFile":
        _, meta, a = unpack(data, KIND_INVERSION)
        tensor = lambda x: torch.from_numpy(np.array(x, dtype=np.float32))
        mode = InversionMode(meta["mode"])
        schedule = FineTunedSchedule(
            embeddings=[TextEmbedding(tensor(e)) for e in a["schedule"]],
            per_step_loss=[float(v) for v in a["per_step_loss"]],
            iterations_used=[int(v) for v in a["iterations"]],
            mode=mode,
            fixed=TextEmbedding(tensor(a["fixed"]), is_null=mode == InversionMode.TARGET_TEXT),
        )
        guidance = meta["sampler"].get("guidance_scale", 7.5)
        return cls(
            prompt=meta["prompt"],
            mode=mode,
            sampler=meta["sampler"],
            optimizer=meta["optimizer"],
            backbone=meta["backbone"],
            seed=meta["seed"],
            inversion=Trajectory([tensor(z) for z in a["inversion"]], meta["inversion_guidance"], "inversion"),
            initial=Trajectory([tensor(z) for z in a["initial"]], guidance, "initial"),
            schedule=schedule,
            phi_cond=TextEmbedding(tensor(a["phi_cond"])),
            image=np.round(a["image"]).astype(np.uint8),
            extra=meta.get("extra", {}),
        )


def write_cache(cache: CacheFile, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = cache.to_bytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_cache(path) -> CacheFile:
    return CacheFile.from_bytes(Path(path).read_bytes())


def cache_dir() -> Path:
    """Default location for trained toy weights; ``TTEDIT_CACHE_DIR`` overrides it."""
    env = os.environ.get("TTEDIT_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "ttedit"
