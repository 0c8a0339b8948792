"""Prompt-adherence scoring: mean text-image score over the set."""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from ..errors import BackendUnavailable
from ..prompts import PromptBundle


class TextImageScorer(Protocol):
    name: str

    def score(self, image: np.ndarray, text: str) -> float:
        ...


class LongClipScorer:
    """Long-context CLIP scorer via transformers; needs a checkpoint id."""

    def __init__(self, model_id: str | None = None, device: str = "cpu"):
        import os

        model_id = model_id or os.environ.get("SETFUSE_CLIP_MODEL")
        if not model_id:
            raise BackendUnavailable(
                "scorer/clip", "set SETFUSE_CLIP_MODEL to a CLIP checkpoint id or path"
            )
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise BackendUnavailable("scorer/clip", "the 'transformers' package is not installed") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise BackendUnavailable("scorer/clip", f"cannot load '{model_id}': {exc}") from exc
        self.name = f"clip/{model_id}"
        self._device = device

    def score(self, image: np.ndarray, text: str) -> float:
        import torch
        from PIL import Image

        with torch.no_grad():
            inputs = self._processor(
                text=[text], images=Image.fromarray(image), return_tensors="pt",
                padding=True, truncation=True,
            ).to(self._device)
            img = self._model.get_image_features(pixel_values=inputs["pixel_values"])
            txt = self._model.get_text_features(
                input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
            )
            img = img / img.norm(dim=-1, keepdim=True)
            txt = txt / txt.norm(dim=-1, keepdim=True)
            return float((img @ txt.T).item())


def adherence_prompt(bundle: PromptBundle, index: int) -> str:
    """Scoring text for one image: shared description then its own caption."""
    return f"{bundle.p_shared}. {bundle.p_nonshared[index]}."


def clip_adherence(
    images: Sequence[np.ndarray], bundle: PromptBundle, scorer: TextImageScorer
) -> float:
    """Mean score(image_i, "[shared]. [caption_i].") over the set."""
    if len(images) == 0:
        raise ValueError("no images to score")
    if len(bundle.p_nonshared) < len(images):
        raise ValueError(
            f"bundle has {len(bundle.p_nonshared)} captions for {len(images)} images"
        )
    scores = [scorer.score(img, adherence_prompt(bundle, i)) for i, img in enumerate(images)]
    return float(np.mean(scores))
