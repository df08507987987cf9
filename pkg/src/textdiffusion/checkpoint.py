"""Single-file binary checkpoints.

Layout: magic, u32 format version, length-prefixed JSON metadata (schedule
spec, model config, optimizer scalars, RNG states, user metadata), a tensor
section of key/shape/float64-data records, and a trailing CRC32 of everything
before it. All integers little-endian. Loading verifies magic, version, and
checksum, so truncation or bit corruption raises CheckpointError instead of
silently restoring garbage.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .autodiff import Tensor
from .denoiser import Denoiser, ModelConfig
from .embedding import EmbeddingTable
from .exceptions import CheckpointError
from .objectives import AdamW
from .schedules import Schedule, schedule_from_spec

MAGIC = b"TXDF\x00CKP"
VERSION = 1


def _pack_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key], dtype="<f8")
        kb = key.encode()
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def _unpack_tensors(r: _Reader) -> dict[str, np.ndarray]:
    count = r.unpack("<I")
    out = {}
    for _ in range(count):
        key = r.take(r.unpack("<H")).decode()
        ndim = r.unpack("<B")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        out[key] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
    return out


def _write(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_b = json.dumps(meta, sort_keys=True).encode()
    body = (MAGIC + struct.pack("<I", VERSION)
            + struct.pack("<Q", len(meta_b)) + meta_b
            + _pack_tensors(tensors))
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.unpack("<Q")).decode())
    return meta, _unpack_tensors(r)


def _rng_state(rng: np.random.Generator | None):
    if rng is None:
        return None
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st.get("has_uint32", 0),
            "uinteger": st.get("uinteger", 0)}


def _restore_rng(state) -> np.random.Generator | None:
    if state is None:
        return None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }
    return rng


def save_params(path, params: dict[str, Tensor], metadata: dict) -> None:
    """Save a bare parameter dict (classifiers, teachers) in the same
    container format."""
    _write(path, {"user": metadata or {}},
           {k: p.data for k, p in params.items()})


def load_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, tensors = _read(path)
    return meta.get("user", {}), tensors


def save_checkpoint(
    path,
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched: Schedule,
    optimizer: AdamW | None = None,
    rng: np.random.Generator | None = None,
    metadata: dict | None = None,
) -> None:
    cfg = denoiser.cfg
    meta = {
        "schedule": sched.spec(),
        "model": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        "vocab_size": table.vocab_size,
        "sigma0": table.sigma0,
        "rng": _rng_state(rng),
        "user": metadata or {},
    }
    tensors = {f"model.{k}": p.data for k, p in denoiser.params.items()}
    tensors["embedding.E"] = table.E.data
    if optimizer is not None:
        meta["optimizer"] = {
            "iteration": optimizer.iteration,
            "lr": optimizer.lr,
            "betas": list(optimizer.betas),
            "weight_decay": optimizer.weight_decay,
            "eps": optimizer.eps,
            "total_iters": optimizer.total_iters,
        }
        for k, v in optimizer.m.items():
            tensors[f"opt.m.{k}"] = v
        for k, v in optimizer.v.items():
            tensors[f"opt.v.{k}"] = v
    _write(path, meta, tensors)


def load_checkpoint(path) -> dict:
    """Restore model, embeddings, schedule and (if saved) optimizer and RNG.

    Returns a dict with keys: denoiser, table, schedule, optimizer, rng,
    metadata. Parameters and optimizer moments are bit-exact copies."""
    meta, tensors = _read(path)
    sched = schedule_from_spec(meta["schedule"])
    cfg = ModelConfig(**meta["model"])
    denoiser = Denoiser(cfg, np.random.default_rng(0))
    for k, p in denoiser.params.items():
        saved = tensors.get(f"model.{k}")
        if saved is None or saved.shape != p.data.shape:
            raise CheckpointError(f"missing or mismatched parameter {k!r}")
        p.data = saved
    table = EmbeddingTable(meta["vocab_size"], cfg.embed_dim,
                           sigma0=meta["sigma0"],
                           rng=np.random.default_rng(0))
    table.E.data = tensors["embedding.E"]

    optimizer = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        params = dict(denoiser.params)
        params["embedding.E"] = table.E
        optimizer = AdamW(params, lr=o["lr"], betas=tuple(o["betas"]),
                          weight_decay=o["weight_decay"], eps=o["eps"],
                          total_iters=o["total_iters"])
        optimizer.load_state({
            "iteration": o["iteration"],
            "m": {k: tensors[f"opt.m.{k}"] for k in params},
            "v": {k: tensors[f"opt.v.{k}"] for k in params},
        })
    return {
        "denoiser": denoiser,
        "table": table,
        "schedule": sched,
        "optimizer": optimizer,
        "rng": _restore_rng(meta.get("rng")),
        "metadata": meta.get("user", {}),
    }
