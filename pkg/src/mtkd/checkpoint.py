"""Self-describing binary checkpoints.

Layout (little-endian)::

    "MTLC"  u16 version
    section*            4-byte tag, u64 payload length, payload
    "END!"  u64 0

Sections: ``HEAD`` (JSON: config, epoch, gamma counters, extras), ``PARM`` and
``BUFS`` (tensor tables), ``OPTM`` (JSON scalars + moment tables), ``RNGS``
(JSON generator state) and an optional ``BEST`` holding a nested checkpoint.
A tensor table is ``u32 count`` followed by entries of
``u16 name length, name, u8 dtype tag, u8 ndim, u64 dims..., payload``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import HeaderError, ShapeError, TruncatedError, VersionError
from .model import ModelConfig, MultiTaskModel, buffer_shapes, init_model, param_shapes
from .optim import AdamState

MAGIC = b"MTLC"
FORMAT_VERSION = 1
_F64 = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict
    buffers: dict
    optimizer: Optional[AdamState] = None
    gamma_counts: dict = field(default_factory=dict)
    epoch: int = -1
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    best: Optional["Checkpoint"] = None
    version: int = FORMAT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    @classmethod
    def from_model(cls, model: MultiTaskModel, config: Optional[dict] = None, **kw) -> "Checkpoint":
        params, buffers = model.state_arrays()
        cfg = dict(config or {})
        cfg["model"] = model.cfg.to_dict()
        return cls(cfg, params, buffers, rng_state=_jsonable(model.rng.bit_generator.state), **kw)


def _jsonable(state: dict) -> dict:
    return json.loads(json.dumps(state))


def restore_model(ckpt: Checkpoint) -> MultiTaskModel:
    model = init_model(ckpt.model_config)
    load_into(model, ckpt)
    return model


def load_into(model: MultiTaskModel, ckpt: Checkpoint) -> None:
    """Copy parameters, buffers and dropout generator state into ``model``."""
    model.load_arrays(ckpt.params, ckpt.buffers)
    if ckpt.rng_state is not None:
        model.rng.bit_generator.state = ckpt.rng_state


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _write_table(buf: io.BytesIO, table: dict) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", _F64, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())


def _section(out: io.BytesIO, tag: bytes, payload: bytes) -> None:
    out.write(tag)
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", ckpt.version))
    _section(out, b"HEAD", _json_bytes({
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "gamma_counts": ckpt.gamma_counts,
        "extra": ckpt.extra,
    }))
    for tag, table in ((b"PARM", ckpt.params), (b"BUFS", ckpt.buffers)):
        buf = io.BytesIO()
        _write_table(buf, table)
        _section(out, tag, buf.getvalue())
    if ckpt.optimizer is not None:
        buf = io.BytesIO()
        scalars = _json_bytes(ckpt.optimizer.hyperparameters())
        buf.write(struct.pack("<I", len(scalars)))
        buf.write(scalars)
        _write_table(buf, ckpt.optimizer.m)
        _write_table(buf, ckpt.optimizer.v)
        _section(out, b"OPTM", buf.getvalue())
    if ckpt.rng_state is not None:
        _section(out, b"RNGS", _json_bytes(ckpt.rng_state))
    if ckpt.best is not None:
        _section(out, b"BEST", encode_checkpoint(ckpt.best))
    _section(out, b"END!", b"")
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.raw = raw
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(f"{self.what}: unexpected end of data")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_table(r: _Reader) -> dict:
    (count,) = r.unpack("<I")
    table = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        dtype, ndim = r.unpack("<BB")
        if dtype != _F64:
            raise HeaderError(f"{r.what}: unsupported dtype tag {dtype} for {name!r}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count_vals = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count_vals), dtype="<f8").astype(np.float64).reshape(shape)
        table[name] = data
    return table


def decode_checkpoint(raw: bytes, what: str = "checkpoint") -> Checkpoint:
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise HeaderError(f"{what}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{what}: checkpoint version {version}, expected {FORMAT_VERSION}")
    r = _Reader(raw, what)
    r.pos = 6
    sections: dict = {}
    while True:
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        if tag == b"END!":
            break
        sections[tag] = payload
    if b"HEAD" not in sections or b"PARM" not in sections or b"BUFS" not in sections:
        raise HeaderError(f"{what}: missing required section")
    try:
        head = json.loads(sections[b"HEAD"].decode())
    except ValueError as exc:
        raise HeaderError(f"{what}: malformed header ({exc})") from exc
    params = _read_table(_Reader(sections[b"PARM"], what))
    buffers = _read_table(_Reader(sections[b"BUFS"], what))
    optimizer = None
    if b"OPTM" in sections:
        o = _Reader(sections[b"OPTM"], what)
        (slen,) = o.unpack("<I")
        hp = json.loads(o.take(slen).decode())
        optimizer = AdamState(lr=hp["lr"], beta1=hp["beta1"], beta2=hp["beta2"], eps=hp["eps"], step=hp["step"],
                              m=_read_table(o), v=_read_table(o))
    rng_state = json.loads(sections[b"RNGS"].decode()) if b"RNGS" in sections else None
    best = decode_checkpoint(sections[b"BEST"], what + " (best)") if b"BEST" in sections else None
    ckpt = Checkpoint(
        config=head["config"],
        params=params,
        buffers=buffers,
        optimizer=optimizer,
        gamma_counts=head.get("gamma_counts", {}),
        epoch=head.get("epoch", -1),
        rng_state=rng_state,
        extra=head.get("extra", {}),
        best=best,
        version=version,
    )
    _check_shapes(ckpt, what)
    return ckpt


def _check_shapes(ckpt: Checkpoint, what: str) -> None:
    try:
        cfg = ckpt.model_config
    except (KeyError, TypeError) as exc:
        raise HeaderError(f"{what}: header lacks a model configuration") from exc
    for table, expected in ((ckpt.params, param_shapes(cfg)), (ckpt.buffers, buffer_shapes(cfg))):
        if set(table) != set(expected):
            raise ShapeError(f"{what}: tensor names disagree with the embedded configuration")
        for name, shape in expected.items():
            if tuple(table[name].shape) != tuple(shape):
                raise ShapeError(f"{what}: {name} has shape {table[name].shape}, config implies {shape}")


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
