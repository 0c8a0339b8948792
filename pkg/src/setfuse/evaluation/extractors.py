"""Feature extractors and foreground masks for the consistency metric.

The metric's extractor is deliberately a different client than the
pipeline's matcher, so the score stays independent of the matches the
method itself consumed. ``PatchStatsExtractor`` is the deterministic
desk-scale default; the DINOv3 adapter loads lazily for production scoring.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ..errors import BackendUnavailable


class FeatureExtractorClient(Protocol):
    name: str
    patch_size: int

    def extract(self, image: np.ndarray) -> np.ndarray:
        """Image (H, W, 3) uint8 -> patch features (Hp, Wp, D) float."""
        ...


class PatchStatsExtractor:
    """Patch descriptors from raw pixels: contrast-normalized gray + mean color."""

    def __init__(self, patch_size: int = 8):
        self.patch_size = patch_size
        self.name = f"patch-stats/{patch_size}"

    def extract(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        p = self.patch_size
        h, w = arr.shape[:2]
        gh, gw = h // p, w // p
        arr = arr[: gh * p, : gw * p]
        gray = arr @ np.array([0.299, 0.587, 0.114])
        cells = gray.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh, gw, p * p)
        cells = cells - cells.mean(axis=2, keepdims=True)
        norms = np.linalg.norm(cells, axis=2, keepdims=True)
        cells = cells / np.maximum(norms, 1e-8)
        color = arr.reshape(gh, p, gw, p, 3).mean(axis=(1, 3)) / 255.0
        return np.concatenate([cells, color], axis=2)


class DinoV3Extractor:
    """DINOv3 patch features via transformers; needs a checkpoint id."""

    def __init__(self, model_id: str | None = None, device: str = "cpu"):
        import os

        model_id = model_id or os.environ.get("SETFUSE_DINO_MODEL")
        if not model_id:
            raise BackendUnavailable(
                "extractor/dinov3", "set SETFUSE_DINO_MODEL to a DINOv3 checkpoint id or path"
            )
        try:
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise BackendUnavailable(
                "extractor/dinov3", "the 'transformers' package is not installed"
            ) from exc
        try:
            self._processor = AutoImageProcessor.from_pretrained(model_id)
            self._model = AutoModel.from_pretrained(model_id).to(device).eval()
        except Exception as exc:
            raise BackendUnavailable("extractor/dinov3", f"cannot load '{model_id}': {exc}") from exc
        self.patch_size = getattr(self._model.config, "patch_size", 16)
        self.name = f"dinov3/{model_id}"
        self._device = device

    def extract(self, image: np.ndarray) -> np.ndarray:
        import torch
        from PIL import Image

        with torch.no_grad():
            inputs = self._processor(images=Image.fromarray(image), return_tensors="pt").to(self._device)
            out = self._model(**inputs).last_hidden_state[0]
        h = inputs["pixel_values"].shape[2] // self.patch_size
        w = inputs["pixel_values"].shape[3] // self.patch_size
        tokens = out[-h * w :]  # strip cls/register tokens
        return tokens.reshape(h, w, -1).cpu().numpy().astype(np.float64)


class ForegroundMaskClient(Protocol):
    name: str

    def mask(self, image: np.ndarray) -> np.ndarray:
        """Image (H, W, 3) uint8 -> boolean foreground mask (H, W)."""
        ...


class LocalContrastMask:
    """Foreground as locally contrasted regions: cheap, deterministic stand-in
    for a real background-removal tool (the mask client is pluggable)."""

    name = "local-contrast"

    def __init__(self, window: int = 8, quantile: float = 0.5):
        self.window = window
        self.quantile = quantile

    def mask(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
        h, w = arr.shape
        k = self.window
        gh, gw = max(1, h // k), max(1, w // k)
        block = arr[: gh * k, : gw * k].reshape(gh, k, gw, k)
        std = block.std(axis=(1, 3))
        threshold = np.quantile(std, self.quantile)
        cell_mask = std > threshold
        full = np.zeros((h, w), dtype=bool)
        full[: gh * k, : gw * k] = np.repeat(np.repeat(cell_mask, k, axis=0), k, axis=1)
        return full


class FullForegroundMask:
    """Treat the whole image as foreground (no background removal)."""

    name = "full"

    def mask(self, image: np.ndarray) -> np.ndarray:
        return np.ones(np.asarray(image).shape[:2], dtype=bool)


def apply_background_removal(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Black out background pixels before feature extraction."""
    out = np.asarray(image).copy()
    out[~mask] = 0
    return out


def mask_to_patch_grid(mask: np.ndarray, patch_size: int, grid: tuple[int, int]) -> np.ndarray:
    """Patch-level foreground: a cell is foreground if most of its pixels are."""
    gh, gw = grid
    p = patch_size
    clipped = mask[: gh * p, : gw * p]
    frac = clipped.reshape(gh, p, gw, p).mean(axis=(1, 3))
    return frac >= 0.5
