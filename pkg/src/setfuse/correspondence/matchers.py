"""Dense matcher backends.

Backends produce raw matches; filtering, deduplication, rescaling and
symmetrization live in :mod:`setfuse.correspondence.maps`. A backend must be
deterministic: identical image pair and seed, identical raw matches.

``PatchCorrelationMatcher`` is the built-in, dependency-free backend: a
normalized patch-correlation nearest-neighbor search. It is a desk-scale
baseline good enough to identify shared content between similar views; for
production quality plug in RoMA via :class:`RomaMatcher`.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..errors import BackendUnavailable
from .maps import CorrespondenceMap, _collision_priority, _dedupe_by

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawMatches:
    """Matcher output before filtering: one candidate per source cell."""

    resolution: tuple[int, int]
    src: np.ndarray
    dst: np.ndarray
    confidence: np.ndarray


class MatcherBackend(ABC):
    """Contract for dense matchers: deterministic raw matches on a fixed grid."""

    name: str = "abstract"

    @abstractmethod
    def grid(self, image: np.ndarray) -> tuple[int, int]:
        """Native match grid for an image of this shape."""

    @abstractmethod
    def match(self, img_i: np.ndarray, img_j: np.ndarray, seed: int = 0) -> RawMatches:
        """Raw candidate matches from image i to image j."""


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114])
    return arr


class PatchCorrelationMatcher(MatcherBackend):
    """Nearest-neighbor matching of mean-centered, normalized image patches.

    The image is divided into a grid of ``patch_size`` cells; each cell's
    descriptor is its flattened, contrast-normalized pixels. Confidence is
    the best cosine correlation mapped to [0, 1]. Pure numpy, deterministic.
    """

    def __init__(self, patch_size: int = 8):
        if patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        self.patch_size = patch_size
        self.name = f"patch-corr/{patch_size}"

    def grid(self, image: np.ndarray) -> tuple[int, int]:
        h, w = np.asarray(image).shape[:2]
        return max(1, h // self.patch_size), max(1, w // self.patch_size)

    def _descriptors(self, image: np.ndarray) -> np.ndarray:
        p = self.patch_size
        gray = _to_gray(image)
        gh, gw = self.grid(image)
        gray = gray[: gh * p, : gw * p]
        cells = gray.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
        cells = cells - cells.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(cells, axis=1, keepdims=True)
        return cells / np.maximum(norms, 1e-8)

    def match(self, img_i: np.ndarray, img_j: np.ndarray, seed: int = 0) -> RawMatches:
        if np.asarray(img_i).shape[:2] != np.asarray(img_j).shape[:2]:
            raise ValueError("patch correlation requires equally sized images")
        gh, gw = self.grid(img_i)
        di = self._descriptors(img_i)
        dj = self._descriptors(img_j)
        sim = di @ dj.T
        best = np.argmax(sim, axis=1)  # first occurrence wins ties: deterministic
        conf = (sim[np.arange(len(best)), best] + 1.0) / 2.0
        rows, cols = np.divmod(np.arange(gh * gw), gw)
        src = np.stack([rows, cols], axis=1).astype(np.int32)
        dst = np.stack(np.divmod(best, gw), axis=1).astype(np.int32)
        return RawMatches((gh, gw), src, dst, np.clip(conf, 0.0, 1.0).astype(np.float32))


class RomaMatcher(MatcherBackend):
    """RoMA adapter. Requires the ``romatch`` package and its model weights."""

    name = "roma"

    def __init__(self, device: str = "cpu"):
        try:
            import romatch  # noqa: F401
        except ImportError as exc:
            raise BackendUnavailable(
                "matcher/roma", "the 'romatch' package is not installed"
            ) from exc
        import romatch

        self._model = romatch.roma_outdoor(device=device)
        self._device = device

    def grid(self, image: np.ndarray) -> tuple[int, int]:
        h, w = np.asarray(image).shape[:2]
        return h, w

    def match(self, img_i: np.ndarray, img_j: np.ndarray, seed: int = 0) -> RawMatches:
        import torch
        from PIL import Image

        torch.manual_seed(seed)
        h, w = np.asarray(img_i).shape[:2]
        warp, certainty = self._model.match(
            Image.fromarray(np.asarray(img_i)), Image.fromarray(np.asarray(img_j)), device=self._device
        )
        kpts_i, kpts_j = self._model.to_pixel_coordinates(warp, h, w, h, w)
        src = kpts_i.cpu().numpy()[:, ::-1]  # (x, y) -> (row, col)
        dst = kpts_j.cpu().numpy()[:, ::-1]
        conf = certainty.reshape(-1).cpu().numpy()
        src = np.clip(np.rint(src), 0, [h - 1, w - 1]).astype(np.int32)
        dst = np.clip(np.rint(dst), 0, [h - 1, w - 1]).astype(np.int32)
        return RawMatches((h, w), src, dst, np.clip(conf, 0.0, 1.0).astype(np.float32))


DEFAULT_CONF_THRESHOLD = 0.05


def compute_matches(
    img_i: np.ndarray,
    img_j: np.ndarray,
    backend: MatcherBackend,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    pair: tuple[int, int] = (0, 1),
    seed: int = 0,
) -> CorrespondenceMap:
    """Compute, filter and deduplicate matches from image i to image j.

    Keeps matches with confidence strictly above ``conf_threshold``; multiple
    candidates on one source coordinate resolve to the highest confidence
    (ties: lexicographic destination). An empty result is valid and flagged
    with a warning.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    raw = backend.match(img_i, img_j, seed=seed)
    keep = raw.confidence > conf_threshold
    src, dst, conf = raw.src[keep], raw.dst[keep], raw.confidence[keep]
    order = _collision_priority(src, conf, dst)
    uniq = _dedupe_by(src, order)
    warning = None
    if len(uniq) == 0:
        warning = (
            f"no matches above confidence {conf_threshold} for pair {pair} "
            f"(backend {backend.name})"
        )
        logger.warning(warning)
    return CorrespondenceMap(
        pair=pair,
        resolution=raw.resolution,
        src=src[uniq],
        dst=dst[uniq],
        confidence=conf[uniq],
        warning=warning,
    )


def get_matcher(name: str, **kwargs) -> MatcherBackend:
    """Instantiate a matcher backend by config name."""
    if name in ("patch", "patch-corr"):
        return PatchCorrelationMatcher(**kwargs)
    if name == "roma":
        return RomaMatcher(**kwargs)
    raise ValueError(f"unknown matcher backend '{name}' (expected 'patch' or 'roma')")
