"""Versioned binary checkpoints.

Layout: magic ``b"JPCK"``, u16 version, u32 header length, a UTF-8 JSON
header, the raw little-endian tensor bytes in header order, and a trailing
CRC32 of everything before it. No timestamps are written, so saving the
same record twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.preprocess import PreprocessStats
from .errors import CheckpointError, ModeError
from .velocity import NetConfig, VelocityNet

MAGIC = b"JPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


@dataclass
class CheckpointRecord:
    net: VelocityNet
    stats: PreprocessStats
    train_config: dict
    epoch: int
    monitor: str
    monitor_value: float | None
    rng_digest: str
    # optional state needed to resume training exactly where it stopped
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    scheduler: dict | None = None
    rng_state: dict | None = None
    best_epoch: int | None = None
    best_value: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.net.config.mode


def rng_digest(rng: np.random.Generator) -> str:
    blob = json.dumps(rng.bit_generator.state, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, record: CheckpointRecord) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in record.net.params.items()]
    opt_meta = None
    if record.optimizer is not None:
        opt_meta = {"step": int(record.optimizer["step"])}
        tensors += [(f"adam_m/{k}", v) for k, v in record.optimizer["m"].items()]
        tensors += [(f"adam_v/{k}", v) for k, v in record.optimizer["v"].items()]
    layout = []
    offset = 0
    payload = []
    for name, arr in tensors:
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        layout.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": VERSION,
        "net_config": record.net.config.to_dict(),
        "stats": record.stats.to_dict(),
        "train_config": record.train_config,
        "epoch": record.epoch,
        "monitor": record.monitor,
        "monitor_value": record.monitor_value,
        "rng_digest": record.rng_digest,
        "optimizer": opt_meta,
        "scheduler": record.scheduler,
        "rng_state": record.rng_state,
        "best_epoch": record.best_epoch,
        "best_value": record.best_value,
        "extra": record.extra,
        "tensors": layout,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hdr)) + hdr + b"".join(payload)
    blob = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _require(header: dict, key: str):
    if key not in header:
        raise CheckpointError("missing from header", key)
    return header[key]


def load_checkpoint(path, expect_mode: str | None = None) -> CheckpointRecord:
    """Read a checkpoint; ``expect_mode`` ('generate'/'unfold') enforces the model variant."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc), "file") from exc
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError("file truncated", "prefix")
    magic, version, hdr_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", "magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})", "format_version")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if len(body) < _PREFIX.size + hdr_len:
        raise CheckpointError("file truncated inside header", "header")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated payload)", "crc32")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", "header") from exc
    if _require(header, "format_version") != VERSION:
        raise CheckpointError(f"header version {header['format_version']}", "format_version")

    data_start = _PREFIX.size + hdr_len
    arrays = {}
    for t in _require(header, "tensors"):
        start = data_start + t["offset"]
        if start + t["nbytes"] > len(body):
            raise CheckpointError("tensor data truncated", t["name"])
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if count * dt.itemsize != t["nbytes"]:
            raise CheckpointError("byte count does not match shape", t["name"])
        a = np.frombuffer(body, dt, count, start).reshape(t["shape"])
        arrays[t["name"]] = a.astype(dt.newbyteorder("="))

    try:
        net_config = NetConfig.from_dict(_require(header, "net_config"))
    except TypeError as exc:
        raise CheckpointError(str(exc), "net_config") from exc
    params = {}
    for name, shape in net_config.layer_shapes().items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError("parameter missing", key)
        if tuple(arrays[key].shape) != shape:
            raise CheckpointError(f"shape {arrays[key].shape} != {shape}", key)
        params[name] = arrays[key]
    net = VelocityNet(net_config, params)
    if expect_mode is not None and net.config.mode != expect_mode:
        raise ModeError(f"checkpoint holds a {net.config.mode!r} model, {expect_mode!r} required")

    try:
        stats = PreprocessStats.from_dict(_require(header, "stats"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc), "stats") from exc

    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = {
            "step": header["optimizer"]["step"],
            "m": {k: arrays[f"adam_m/{k}"] for k in params if f"adam_m/{k}" in arrays},
            "v": {k: arrays[f"adam_v/{k}"] for k in params if f"adam_v/{k}" in arrays},
        }
        for part in ("m", "v"):
            if len(optimizer[part]) != len(params):
                raise CheckpointError("incomplete optimizer moments", f"adam_{part}")
    return CheckpointRecord(
        net=net,
        stats=stats,
        train_config=_require(header, "train_config"),
        epoch=int(_require(header, "epoch")),
        monitor=_require(header, "monitor"),
        monitor_value=header.get("monitor_value"),
        rng_digest=_require(header, "rng_digest"),
        optimizer=optimizer,
        scheduler=header.get("scheduler"),
        rng_state=header.get("rng_state"),
        best_epoch=header.get("best_epoch"),
        best_value=header.get("best_value"),
        extra=header.get("extra") or {},
    )
