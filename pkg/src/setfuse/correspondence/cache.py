"""Versioned binary caches for matches and control maps.

Both cache kinds share one container: a little-endian header carrying
(format version, id pair, resolution, producer name, threshold/parameter)
followed by a flat payload. Match payloads are
``(src_row, src_col, dst_row, dst_col, confidence)`` records with 32-bit
integers and a 32-bit float; control payloads are two float32 planes
(depth, then edge). The version field lets producer backends change without
invalidating old runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .maps import CorrespondenceMap

MATCH_MAGIC = b"SFMC"
CONTROL_MAGIC = b"SFCC"
FORMAT_VERSION = 1

_HEADER_FIXED = struct.Struct("<4sIIIII")  # magic, version, id_a, id_b, H, W
_RECORD = np.dtype([
    ("src_row", "<i4"),
    ("src_col", "<i4"),
    ("dst_row", "<i4"),
    ("dst_col", "<i4"),
    ("confidence", "<f4"),
])


@dataclass(frozen=True)
class CacheHeader:
    magic: bytes
    version: int
    ids: tuple[int, int]
    resolution: tuple[int, int]
    producer: str
    parameter: float


def _write_header(fh, magic: bytes, ids, resolution, producer: str, parameter: float) -> None:
    fh.write(_HEADER_FIXED.pack(magic, FORMAT_VERSION, ids[0], ids[1], resolution[0], resolution[1]))
    name = producer.encode("utf-8")
    fh.write(struct.pack("<I", len(name)))
    fh.write(name)
    fh.write(struct.pack("<f", parameter))


def _read_header(fh, expected_magic: bytes) -> CacheHeader:
    raw = fh.read(_HEADER_FIXED.size)
    if len(raw) != _HEADER_FIXED.size:
        raise ValueError("truncated cache header")
    magic, version, id_a, id_b, h, w = _HEADER_FIXED.unpack(raw)
    if magic != expected_magic:
        raise ValueError(f"bad cache magic {magic!r}, expected {expected_magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported cache format version {version}")
    (name_len,) = struct.unpack("<I", fh.read(4))
    producer = fh.read(name_len).decode("utf-8")
    (parameter,) = struct.unpack("<f", fh.read(4))
    return CacheHeader(magic, version, (id_a, id_b), (h, w), producer, parameter)


def write_match_cache(
    path: str | Path, cmap: CorrespondenceMap, backend_name: str, threshold: float
) -> None:
    records = np.zeros(len(cmap), dtype=_RECORD)
    records["src_row"], records["src_col"] = cmap.src[:, 0], cmap.src[:, 1]
    records["dst_row"], records["dst_col"] = cmap.dst[:, 0], cmap.dst[:, 1]
    records["confidence"] = cmap.confidence
    with open(path, "wb") as fh:
        _write_header(fh, MATCH_MAGIC, cmap.pair, cmap.resolution, backend_name, threshold)
        fh.write(records.tobytes())


def read_match_cache(path: str | Path) -> tuple[CorrespondenceMap, CacheHeader]:
    with open(path, "rb") as fh:
        header = _read_header(fh, MATCH_MAGIC)
        payload = fh.read()
    if len(payload) % _RECORD.itemsize:
        raise ValueError(f"match cache payload is not a whole number of records: {path}")
    records = np.frombuffer(payload, dtype=_RECORD)
    cmap = CorrespondenceMap(
        pair=header.ids,
        resolution=header.resolution,
        src=np.stack([records["src_row"], records["src_col"]], axis=1),
        dst=np.stack([records["dst_row"], records["dst_col"]], axis=1),
        confidence=records["confidence"].copy(),
    )
    return cmap, header


def match_cache_name(pair: tuple[int, int]) -> str:
    return f"match_{pair[0]:03d}_{pair[1]:03d}.sfm"


def write_control_cache(
    path: str | Path,
    image_id: int,
    depth: np.ndarray,
    edge: np.ndarray,
    producer: str,
    parameter: float = 0.0,
) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    edge = np.ascontiguousarray(edge, dtype="<f4")
    if depth.shape != edge.shape or depth.ndim != 2:
        raise ValueError("depth and edge maps must be equal 2D shapes")
    with open(path, "wb") as fh:
        _write_header(fh, CONTROL_MAGIC, (image_id, image_id), depth.shape, producer, parameter)
        fh.write(depth.tobytes())
        fh.write(edge.tobytes())


def read_control_cache(path: str | Path) -> tuple[np.ndarray, np.ndarray, CacheHeader]:
    with open(path, "rb") as fh:
        header = _read_header(fh, CONTROL_MAGIC)
        payload = fh.read()
    h, w = header.resolution
    plane = h * w * 4
    if len(payload) != 2 * plane:
        raise ValueError(f"control cache payload size mismatch: {path}")
    depth = np.frombuffer(payload[:plane], dtype="<f4").reshape(h, w).copy()
    edge = np.frombuffer(payload[plane:], dtype="<f4").reshape(h, w).copy()
    return depth, edge, header


def control_cache_name(image_id: int) -> str:
    return f"control_{image_id:03d}.sfc"
