"""Binary checkpoints: magic "SGNX", version, config snapshot, named
parameter and buffer tables (float32 little-endian), optional optimizer
state, and a trailing CRC32. Writes are atomic (temp file then rename)."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .model import SegModel, build_model
from .train import OptimState

MAGIC = b"SGNX"
VERSION = 1

_FLAG_OPTIM = 1


class CheckpointError(RuntimeError):
    pass


def _pack_array(out: bytearray, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    out += struct.pack("<H", len(nb))
    out += nb
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = 1
        for d in shape:
            count *= d
        data = np.frombuffer(self.take(count * 4), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def save_checkpoint(model: SegModel, path, optim: OptimState | None = None,
                    run_cfg: RunConfig | None = None) -> None:
    if run_cfg is None:
        run_cfg = RunConfig(model=model.cfg, seed=model.seed)
    out = bytearray()
    out += MAGIC
    flags = _FLAG_OPTIM if optim is not None else 0
    out += struct.pack("<IIQ", VERSION, flags, model.seed)
    cfg_bytes = serialize_config(run_cfg).encode("utf-8")
    out += struct.pack("<I", len(cfg_bytes))
    out += cfg_bytes
    params = model.parameters()
    out += struct.pack("<I", len(params))
    for e in params:
        _pack_array(out, e.name, e.tensor.data)
    buffers = model.buffers()
    out += struct.pack("<I", len(buffers))
    for b in buffers:
        _pack_array(out, b.name, b.array)
    if optim is not None:
        out += struct.pack("<Qddddd", optim.t, optim.betas[0], optim.betas[1],
                           optim.eps, optim.weight_decay, 0.0)
        for e in params:
            out += np.ascontiguousarray(optim.m[e.name], dtype="<f4").tobytes()
            out += np.ascontiguousarray(optim.v[e.name], dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)

    path = os.fspath(path)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


@dataclass
class LoadedCheckpoint:
    model: SegModel
    optim: OptimState | None
    run_cfg: RunConfig


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic bytes)")
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )
    r = _Reader(raw[:-4])
    r.take(4)  # magic
    version, flags, model_seed = r.unpack("<IIQ")
    if version != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}; this build reads version {VERSION}"
        )
    (cfg_len,) = r.unpack("<I")
    cfg_text = r.take(cfg_len).decode("utf-8")
    run_cfg = parse_config(cfg_text)

    model = build_model(run_cfg.model, int(model_seed))
    params = model.parameters()
    (n_params,) = r.unpack("<I")
    if n_params != len(params):
        raise CheckpointError(
            f"parameter table holds {n_params} entries, model expects {len(params)}"
        )
    for e in params:
        name, data = r.array()
        if name != e.name:
            raise CheckpointError(f"parameter order mismatch: {name!r} vs {e.name!r}")
        if data.shape != e.tensor.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {data.shape}, expected {e.tensor.data.shape}"
            )
        e.tensor.data[...] = data
    buffers = model.buffers()
    (n_buffers,) = r.unpack("<I")
    if n_buffers != len(buffers):
        raise CheckpointError(
            f"buffer table holds {n_buffers} entries, model expects {len(buffers)}"
        )
    for b in buffers:
        name, data = r.array()
        if name != b.name or data.shape != b.array.shape:
            raise CheckpointError(f"buffer table mismatch at {name!r}")
        b.array[...] = data

    optim = None
    if flags & _FLAG_OPTIM:
        t, b1, b2, eps, wd, _ = r.unpack("<Qddddd")
        optim = OptimState(betas=(b1, b2), eps=eps, weight_decay=wd, t=int(t))
        for e in params:
            size = e.tensor.data.size
            optim.m[e.name] = np.frombuffer(
                r.take(size * 4), dtype="<f4"
            ).reshape(e.tensor.data.shape).astype(np.float32)
            optim.v[e.name] = np.frombuffer(
                r.take(size * 4), dtype="<f4"
            ).reshape(e.tensor.data.shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} unexpected trailing bytes")
    return LoadedCheckpoint(model, optim, run_cfg)
