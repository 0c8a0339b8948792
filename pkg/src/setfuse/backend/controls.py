"""Depth/edge control extraction with a disk cache.

Extractors are pluggable clients; the package does not implement depth or
edge networks. Two dependency-free stand-ins (``luminance-depth``,
``sobel-edge``) keep mock runs self-contained; the production adapters
(DepthAnythingV2, HED) load lazily and raise a recoverable error naming the
missing extractor when their dependencies are absent.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ..correspondence.cache import control_cache_name, read_control_cache, write_control_cache
from ..errors import BackendUnavailable
from .base import ControlSignal

logger = logging.getLogger(__name__)


class ControlExtractor(Protocol):
    name: str

    def extract(self, image: np.ndarray) -> np.ndarray:
        """Image (H, W, 3) uint8 -> float32 map (H, W) in [0, 1]."""
        ...


def _gray(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) @ np.array([0.299, 0.587, 0.114], dtype=np.float32) / 255.0


class LuminanceDepth:
    """Pseudo-depth from smoothed luminance. Stand-in for a real depth network."""

    name = "luminance-depth"

    def __init__(self, radius: int = 2):
        self.radius = radius

    def extract(self, image: np.ndarray) -> np.ndarray:
        gray = _gray(image)
        k = 2 * self.radius + 1
        padded = np.pad(gray, self.radius, mode="edge")
        out = np.zeros_like(gray)
        for dr in range(k):
            for dc in range(k):
                out += padded[dr : dr + gray.shape[0], dc : dc + gray.shape[1]]
        return (out / (k * k)).astype(np.float32)


class SobelEdge:
    """Gradient-magnitude edges. Stand-in for an HED edge network."""

    name = "sobel-edge"

    def extract(self, image: np.ndarray) -> np.ndarray:
        gray = _gray(image)
        gx = np.zeros_like(gray)
        gy = np.zeros_like(gray)
        gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
        gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
        mag = np.hypot(gx, gy)
        peak = mag.max()
        return (mag / peak if peak > 0 else mag).astype(np.float32)


class DepthAnythingV2:
    """Adapter for a DepthAnythingV2 checkpoint via transformers."""

    name = "depth-anything-v2"

    def __init__(self, model_id: str | None = None, device: str = "cpu"):
        model_id = model_id or os.environ.get("SETFUSE_DEPTH_MODEL")
        if not model_id:
            raise BackendUnavailable(
                "extractor/depth-anything-v2",
                "set SETFUSE_DEPTH_MODEL to a DepthAnythingV2 checkpoint id or path",
            )
        try:
            from transformers import pipeline
        except ImportError as exc:
            raise BackendUnavailable(
                "extractor/depth-anything-v2", "the 'transformers' package is not installed"
            ) from exc
        try:
            self._pipe = pipeline("depth-estimation", model=model_id, device=device)
        except Exception as exc:
            raise BackendUnavailable(
                "extractor/depth-anything-v2", f"cannot load '{model_id}': {exc}"
            ) from exc

    def extract(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image

        result = self._pipe(Image.fromarray(np.asarray(image, dtype=np.uint8)))
        depth = np.asarray(result["depth"], dtype=np.float32)
        span = depth.max() - depth.min()
        return (depth - depth.min()) / span if span > 0 else np.zeros_like(depth)


class HedEdge:
    """Adapter for an HED edge detector via controlnet_aux."""

    name = "hed"

    def __init__(self, model_id: str | None = None, device: str = "cpu"):
        try:
            from controlnet_aux import HEDdetector
        except ImportError as exc:
            raise BackendUnavailable(
                "extractor/hed", "the 'controlnet_aux' package is not installed"
            ) from exc
        model_id = model_id or os.environ.get("SETFUSE_HED_MODEL", "lllyasviel/Annotators")
        try:
            self._det = HEDdetector.from_pretrained(model_id)
        except Exception as exc:
            raise BackendUnavailable("extractor/hed", f"cannot load '{model_id}': {exc}") from exc

    def extract(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image

        out = self._det(Image.fromarray(np.asarray(image, dtype=np.uint8)))
        return np.asarray(out.convert("L"), dtype=np.float32) / 255.0


def get_extractor(name: str) -> ControlExtractor:
    table = {
        "luminance-depth": LuminanceDepth,
        "sobel-edge": SobelEdge,
        "depth-anything-v2": DepthAnythingV2,
        "hed": HedEdge,
    }
    if name not in table:
        raise ValueError(f"unknown extractor '{name}' (options: {sorted(table)})")
    return table[name]()


def extract_controls(
    images: Sequence[np.ndarray],
    depth_extractor: ControlExtractor,
    edge_extractor: ControlExtractor,
    cache_dir: str | Path | None = None,
    weights: tuple[float, float] = (0.5, 0.5),
    strength: float = 1.0,
) -> list[ControlSignal]:
    """Per-image depth and edge maps, served from the disk cache when present.

    Cache entries carry the producing extractor names; an entry produced by a
    different extractor pair is recomputed rather than silently reused.
    """
    producer = f"{depth_extractor.name}+{edge_extractor.name}"
    signals: list[ControlSignal] = []
    for idx, image in enumerate(images):
        depth = edge = None
        path = Path(cache_dir) / control_cache_name(idx) if cache_dir is not None else None
        if path is not None and path.exists():
            cached_depth, cached_edge, header = read_control_cache(path)
            if header.producer == producer and header.resolution == np.asarray(image).shape[:2]:
                depth, edge = cached_depth, cached_edge
            else:
                logger.info("control cache %s stale (producer %s), recomputing", path, header.producer)
        if depth is None:
            depth = depth_extractor.extract(image)
            edge = edge_extractor.extract(image)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_control_cache(path, idx, depth, edge, producer)
        signals.append(
            ControlSignal(
                depth=depth,
                edge=edge,
                depth_weight=weights[0],
                edge_weight=weights[1],
                strength=strength,
            )
        )
    return signals
