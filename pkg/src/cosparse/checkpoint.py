"""Binary checkpoints: a JSON header plus float64 tensor records, sealed by SHA-256.

Layout (little-endian)::

    b"ECSP" | u32 version | u32 header_len | header JSON
    records: u8 kind | u16 name_len | name | u32 rows | u32 cols | rows*cols f64
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import Model, ModelConfig
from .trainer import AdamState

MAGIC = b"ECSP"
VERSION = 1
_DIGEST = 32
_PARAM, _BUFFER, _MOM_M, _MOM_V = 0, 1, 2, 3


class CorruptCheckpoint(ValueError):
    pass


def _record(kind: int, name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return struct.pack("<BH", kind, len(raw)) + raw + struct.pack("<II", *arr.shape) + arr.tobytes()


def to_bytes(model: Model, optimizer: AdamState | None = None) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "original_dims": model.original_dims,
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay, "t": optimizer.t},
    }
    parts = [(_PARAM, k, v) for k, v in model.params.items()]
    parts += [(_BUFFER, k, v) for k, v in model.buffers.items()]
    if optimizer is not None:
        parts += [(_MOM_M, k, v) for k, v in optimizer.m.items()]
        parts += [(_MOM_V, k, v) for k, v in optimizer.v.items()]
    header["records"] = len(parts)
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hj)) + hj + b"".join(_record(*p) for p in parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> tuple[Model, AdamState | None]:
    if len(data) < len(MAGIC) + 8 + _DIGEST or data[:4] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint (bad magic or truncated)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    pos = 12
    try:
        header = json.loads(body[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        stores: dict[int, dict[str, np.ndarray]] = {_PARAM: {}, _BUFFER: {}, _MOM_M: {}, _MOM_V: {}}
        for _ in range(header["records"]):
            kind, nlen = struct.unpack_from("<BH", body, pos)
            pos += 3
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", body, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(body):
                raise CorruptCheckpoint(f"record {name!r} runs past the end of the file")
            stores[kind][name] = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except (KeyError, struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CorruptCheckpoint("trailing bytes after the last record")
    model = Model(ModelConfig(**header["config"]), params=stores[_PARAM], buffers=stores[_BUFFER],
                  original_dims=header["original_dims"])
    opt = None
    if header["optimizer"] is not None:
        h = dict(header["optimizer"])
        t = h.pop("t")
        opt = AdamState(**h)
        opt.t = t
        opt.m, opt.v = stores[_MOM_M], stores[_MOM_V]
    return model, opt


def save(path, model: Model, optimizer: AdamState | None = None) -> str:
    """Write a checkpoint and return its SHA-256 hex digest."""
    data = to_bytes(model, optimizer)
    with open(path, "wb") as fh:
        fh.write(data)
    return data[-_DIGEST:].hex()


def load(path) -> tuple[Model, AdamState | None]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    return from_bytes(data)
