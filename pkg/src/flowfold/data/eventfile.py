"""Binary event files.

Little-endian layout::

    magic        4s   b"JPEV"
    version      u16
    flags        u16  bit 0: standardized space, bit 1: paired truth/detector columns
    n_features   u32
    n_events     u64
    has_stats    u8
    [n_stats u32, mean f64 x n_stats, std f64 x n_stats, scale f64]   if has_stats
    values       f32 x n_events x n_features, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import EventFileError
from .features import FeatureMatrix
from .preprocess import PreprocessStats

MAGIC = b"JPEV"
VERSION = 1
FLAG_STANDARDIZED = 1
FLAG_PAIRED = 2
_HEADER = struct.Struct("<4sHHIQB")


def save_events(path, data: FeatureMatrix, stats: PreprocessStats | None = None) -> None:
    flags = (FLAG_STANDARDIZED if data.space == "standardized" else 0) | (FLAG_PAIRED if data.paired else 0)
    parts = [_HEADER.pack(MAGIC, VERSION, flags, data.n_features, data.n_events, int(stats is not None))]
    if stats is not None:
        parts.append(struct.pack("<I", stats.n_features))
        parts.append(stats.mean.astype("<f8").tobytes())
        parts.append(stats.std.astype("<f8").tobytes())
        parts.append(struct.pack("<d", stats.scale))
    parts.append(np.ascontiguousarray(data.values, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for p in parts:
            fh.write(p)
    os.replace(tmp, path)


def load_events(path) -> tuple[FeatureMatrix, PreprocessStats | None]:
    """Read an event file; returns the matrix and any attached statistics."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise EventFileError(f"file too short for header ({len(blob)} bytes)", len(blob))
    magic, version, flags, n_feat, n_ev, has_stats = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise EventFileError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise EventFileError(f"unsupported format version {version}", 4)
    if flags & ~(FLAG_STANDARDIZED | FLAG_PAIRED):
        raise EventFileError(f"unknown flag bits {flags:#x}", 6)
    if n_feat == 0:
        raise EventFileError("feature count must be positive", 8)
    if has_stats not in (0, 1):
        raise EventFileError(f"invalid stats flag {has_stats}", 20)
    offset = _HEADER.size
    stats = None
    if has_stats:
        if len(blob) < offset + 4:
            raise EventFileError("truncated statistics block", len(blob))
        (n_stats,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need = 16 * n_stats + 8
        if len(blob) < offset + need:
            raise EventFileError("truncated statistics block", len(blob))
        mean = np.frombuffer(blob, "<f8", n_stats, offset).astype(np.float64)
        std = np.frombuffer(blob, "<f8", n_stats, offset + 8 * n_stats).astype(np.float64)
        (scale,) = struct.unpack_from("<d", blob, offset + 16 * n_stats)
        try:
            stats = PreprocessStats(mean, std, scale)
        except ValueError as exc:
            raise EventFileError(f"invalid statistics block: {exc}", offset) from exc
        offset += need
    expected = 4 * n_feat * n_ev
    available = len(blob) - offset
    if available != expected:
        if available % (4 * n_feat) == 0 and available > 0 and available // (4 * n_feat) != n_ev:
            msg = f"declared {n_ev} events but payload holds {available // (4 * n_feat)}"
        elif available % 4 == 0 and n_ev and (available // 4) % n_ev == 0:
            msg = f"declared {n_feat} features but payload has {available // 4 // n_ev} columns"
        else:
            msg = f"payload is {available} bytes, expected {expected}"
        raise EventFileError(msg, offset + min(available, expected))
    values = np.frombuffer(blob, "<f4", n_feat * n_ev, offset).reshape(n_ev, n_feat).astype(np.float32)
    space = "standardized" if flags & FLAG_STANDARDIZED else "physical"
    try:
        matrix = FeatureMatrix(values, space, paired=bool(flags & FLAG_PAIRED))
    except ValueError as exc:
        raise EventFileError(str(exc), offset) from exc
    return matrix, stats
