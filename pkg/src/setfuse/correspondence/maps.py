"""Partial 2D correspondence maps between image pairs.

A :class:`CorrespondenceMap` is a partial function from coordinates of image
``i`` to coordinates of image ``j`` on a fixed grid, with a confidence per
entry. Maps are the sole identification of shared content in the pipeline:
no masks, no manual supervision. All operations here are pure; each returns
a new map and never mutates its inputs.

Entries are kept in canonical order (lexicographic by source coordinate),
which makes map equality, serialization, and every downstream consumer
deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PixelMatch:
    """One correspondence: ``src`` in image i maps to ``dst`` in image j."""

    src: tuple[int, int]
    dst: tuple[int, int]
    confidence: float


def _as_coord_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int32).reshape(-1, 2)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Partial coordinate mapping between an ordered image pair.

    Invariants enforced at construction: at most one entry per source
    coordinate, all coordinates inside ``resolution``, confidences in [0, 1].
    """

    pair: tuple[int, int]
    resolution: tuple[int, int]
    src: np.ndarray
    dst: np.ndarray
    confidence: np.ndarray
    warning: str | None = None

    def __post_init__(self):
        src = _as_coord_array(self.src, "src")
        dst = _as_coord_array(self.dst, "dst")
        conf = np.asarray(self.confidence, dtype=np.float32).reshape(-1)
        if not (len(src) == len(dst) == len(conf)):
            raise ValueError("src, dst and confidence must have equal length")
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if len(src):
            for arr, label in ((src, "src"), (dst, "dst")):
                if arr.min() < 0 or arr[:, 0].max() >= h or arr[:, 1].max() >= w:
                    raise ValueError(f"{label} coordinates fall outside {self.resolution}")
            if conf.min() < 0.0 or conf.max() > 1.0:
                raise ValueError("confidences must lie in [0, 1]")
            # canonical order + partial-function check
            order = np.lexsort((src[:, 1], src[:, 0]))
            src, dst, conf = src[order].copy(), dst[order].copy(), conf[order].copy()
            if len(np.unique(src, axis=0)) != len(src):
                raise ValueError("duplicate source coordinates: map must be a partial function")
        for name, arr in (("src", src), ("dst", dst), ("confidence", conf)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_matches(
        cls,
        pair: tuple[int, int],
        resolution: tuple[int, int],
        matches: Iterable[PixelMatch],
        warning: str | None = None,
    ) -> "CorrespondenceMap":
        ms = list(matches)
        return cls(
            pair=pair,
            resolution=resolution,
            src=np.array([m.src for m in ms], dtype=np.int32).reshape(-1, 2),
            dst=np.array([m.dst for m in ms], dtype=np.int32).reshape(-1, 2),
            confidence=np.array([m.confidence for m in ms], dtype=np.float32),
            warning=warning,
        )

    @classmethod
    def empty(
        cls, pair: tuple[int, int], resolution: tuple[int, int], warning: str | None = None
    ) -> "CorrespondenceMap":
        return cls.from_matches(pair, resolution, [], warning=warning)

    def __len__(self) -> int:
        return len(self.src)

    def __iter__(self) -> Iterator[PixelMatch]:
        for s, d, c in zip(self.src, self.dst, self.confidence):
            yield PixelMatch((int(s[0]), int(s[1])), (int(d[0]), int(d[1])), float(c))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorrespondenceMap):
            return NotImplemented
        return (
            self.pair == other.pair
            and self.resolution == other.resolution
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.confidence, other.confidence)
        )

    @property
    def is_empty(self) -> bool:
        return len(self.src) == 0

    def domain(self) -> set[tuple[int, int]]:
        """The matched source coordinate set (C_i)."""
        return {(int(r), int(c)) for r, c in self.src}

    def as_dict(self) -> dict[tuple[int, int], tuple[int, int]]:
        return {
            (int(s[0]), int(s[1])): (int(d[0]), int(d[1]))
            for s, d in zip(self.src, self.dst)
        }

    def inverted(self) -> "CorrespondenceMap":
        """Swap source and destination roles, resolving destination collisions.

        The raw inverse of a non-injective map is not a function; collisions
        keep the highest-confidence entry (ties: lexicographic original
        source). Symmetrized maps invert losslessly.
        """
        order = _collision_priority(self.dst, self.confidence, self.src)
        _, first = np.unique(self.dst[order], axis=0, return_index=True)
        keep = order[np.sort(first)]
        return CorrespondenceMap(
            pair=(self.pair[1], self.pair[0]),
            resolution=self.resolution,
            src=self.dst[keep],
            dst=self.src[keep],
            confidence=self.confidence[keep],
        )


def _collision_priority(key_coords: np.ndarray, conf: np.ndarray, tiebreak: np.ndarray) -> np.ndarray:
    """Order entries so the winner of each key collision comes first.

    Priority: highest confidence, then lexicographic tiebreak coordinate.
    """
    return np.lexsort((tiebreak[:, 1], tiebreak[:, 0], -conf.astype(np.float64)))


def _dedupe_by(coords: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Indices (into the original arrays) keeping one entry per coordinate."""
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    _, first = np.unique(coords[order], axis=0, return_index=True)
    return order[np.sort(first)]


def rescale_map(cmap: CorrespondenceMap, target_res: tuple[int, int]) -> CorrespondenceMap:
    """Re-express a map on a different grid.

    Coordinates are scaled by (target_H/H, target_W/W) and rounded to the
    nearest cell. Sources colliding on one target cell keep the
    highest-confidence entry (ties: lexicographic source order).
    """
    th, tw = target_res
    if th < 1 or tw < 1:
        raise ValueError(f"target resolution must be positive, got {target_res}")
    if target_res == cmap.resolution:
        return CorrespondenceMap(cmap.pair, cmap.resolution, cmap.src, cmap.dst, cmap.confidence)
    h, w = cmap.resolution
    scale = np.array([th / h, tw / w], dtype=np.float64)
    src = np.clip(np.rint(cmap.src * scale), 0, [th - 1, tw - 1]).astype(np.int32)
    dst = np.clip(np.rint(cmap.dst * scale), 0, [th - 1, tw - 1]).astype(np.int32)
    order = _collision_priority(src, cmap.confidence, cmap.src)
    keep = _dedupe_by(src, order)
    return CorrespondenceMap(cmap.pair, target_res, src[keep], dst[keep], cmap.confidence[keep])


def subsample_matches(cmap: CorrespondenceMap, fraction: float, seed: int) -> CorrespondenceMap:
    """Keep round(fraction * |entries|) entries chosen uniformly under ``seed``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    m = len(cmap)
    k = int(np.rint(fraction * m))
    if k >= m:
        return cmap
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(m, size=k, replace=False))
    return CorrespondenceMap(
        cmap.pair, cmap.resolution, cmap.src[keep], cmap.dst[keep], cmap.confidence[keep]
    )


def symmetrize_map(
    map_ij: CorrespondenceMap, map_ji: CorrespondenceMap
) -> tuple[CorrespondenceMap, CorrespondenceMap]:
    """Reduce two opposite-direction maps to their mutually consistent subsets.

    An entry c -> c' of ``map_ij`` survives iff ``map_ji`` maps c' -> c. The
    outputs are exact inverses of each other on their domains, which is what
    the fusion equality invariants require.
    """
    if map_ij.resolution != map_ji.resolution:
        raise ValueError(
            f"resolution mismatch: {map_ij.resolution} vs {map_ji.resolution}"
        )
    if map_ij.pair != (map_ji.pair[1], map_ji.pair[0]):
        raise ValueError(f"maps must refer to opposite pair orders, got {map_ij.pair} and {map_ji.pair}")
    back = map_ji.as_dict()
    keep = [
        idx
        for idx, (s, d) in enumerate(zip(map_ij.src, map_ij.dst))
        if back.get((int(d[0]), int(d[1]))) == (int(s[0]), int(s[1]))
    ]
    keep = np.asarray(keep, dtype=np.int64)
    src, dst, conf = map_ij.src[keep], map_ij.dst[keep], map_ij.confidence[keep]
    out_ij = CorrespondenceMap(map_ij.pair, map_ij.resolution, src, dst, conf)
    # mirrored side carries map_ji's own confidences
    conf_ji = {tuple(s): float(c) for s, c in zip(map_ji.src, map_ji.confidence)}
    conf_back = np.array([conf_ji[(int(d[0]), int(d[1]))] for d in dst], dtype=np.float32)
    out_ji = CorrespondenceMap(map_ji.pair, map_ji.resolution, dst, src, conf_back)
    return out_ij, out_ji
