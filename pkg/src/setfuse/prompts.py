"""Prompt expansion and grid-prompt assembly.

Two user prompts describe the whole set: the shared content and the scene
theme. A VLM expands them into detailed per-image captions; each graph edge
then gets a canvas prompt describing a two-image grid. Any free-form prefix
that cues a side-by-side layout works about as well, so one canonical
template is fixed here for reproducibility (override via config).
"""

from __future__ import annotations

import base64
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import VlmError

logger = logging.getLogger(__name__)

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

CAPTION_SYSTEM_PROMPT = """\
You caption image collections for a layout-preserving image generator.
You receive a set of photos, a description of the content they share, and a
style/theme request. Identify the elements shared across the photos and the
elements unique to each photo. Then write, for every photo in order, one
detailed caption that integrates the theme while respecting that photo's own
composition, viewpoint and pose. Also rewrite the shared-content description,
enriched with concrete artistic details (colors, materials, textures) that
all captions stay consistent with. Optionally describe each source photo as
it currently looks (used for localized editing).

Respond with strict JSON only, no prose, in exactly this shape:
{"shared": "<enriched shared description>",
 "captions": ["<caption for photo 1>", ...],
 "source_captions": ["<plain description of photo 1 as-is>", ...]}
The captions list must have one entry per photo, in input order.
"""


@dataclass(frozen=True)
class PromptBundle:
    """All prompt text a run needs: set-level, per-image and per-source."""

    p_shared: str
    p_theme: str
    p_nonshared: tuple[str, ...]
    p_source: tuple[str, ...] | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.p_shared:
            raise ValueError("p_shared must be non-empty")
        if self.p_source is not None and len(self.p_source) != len(self.p_nonshared):
            raise ValueError("p_source length must match p_nonshared")

    def __len__(self) -> int:
        return len(self.p_nonshared)


class VlmClient(Protocol):
    """Minimal chat-completion contract: system + user content with images.

    Implementations raise :class:`VlmError` on any failure; they never return
    partial text silently.
    """

    def complete(self, system: str, user_text: str, images: Sequence[np.ndarray]) -> str:
        ...


class HttpVlmClient:
    """OpenAI-style chat-completions client over HTTP."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    @staticmethod
    def _encode(image: np.ndarray) -> str:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode("ascii")

    def complete(self, system: str, user_text: str, images: Sequence[np.ndarray]) -> str:
        import httpx

        content: list[dict] = [{"type": "text", "text": user_text}]
        for img in images:
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:image/png;base64,{self._encode(img)}"},
                }
            )
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(
                f"{self.endpoint}/chat/completions",
                json={
                    "model": self.model,
                    "messages": [
                        {"role": "system", "content": system},
                        {"role": "user", "content": content},
                    ],
                },
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            text = resp.json()["choices"][0]["message"]["content"]
        except Exception as exc:
            raise VlmError(f"VLM request to {self.endpoint} failed: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise VlmError("VLM returned an empty response")
        return text


def _parse_caption_response(text: str, n_images: int) -> tuple[str, list[str], list[str] | None]:
    """Extract the JSON payload the system prompt asks for."""
    cleaned = text.strip()
    if cleaned.startswith("```"):
        cleaned = cleaned.strip("`")
        if cleaned.startswith("json"):
            cleaned = cleaned[4:]
    start, end = cleaned.find("{"), cleaned.rfind("}")
    if start < 0 or end <= start:
        raise VlmError("VLM response contains no JSON object")
    try:
        payload = json.loads(cleaned[start : end + 1])
    except json.JSONDecodeError as exc:
        raise VlmError(f"VLM response is not valid JSON: {exc}") from exc
    captions = payload.get("captions")
    if not isinstance(captions, list) or len(captions) != n_images:
        raise VlmError(f"expected {n_images} captions, got {captions!r}")
    captions = [str(c) for c in captions]
    shared = str(payload.get("shared", "")) or None
    sources = payload.get("source_captions")
    if isinstance(sources, list) and len(sources) == n_images:
        sources = [str(s) for s in sources]
    else:
        sources = None
    return shared, captions, sources


def compose_prompts(
    p_shared: str,
    p_theme: str,
    images: Sequence[np.ndarray],
    client: VlmClient | None,
) -> PromptBundle:
    """Expand set-level prompts into per-image captions via the VLM.

    Falls back to templated captions (the theme text per image, shared text
    unchanged) on any client failure; the fallback never raises, it only
    records a warning for the run manifest.
    """
    if len(images) < 2:
        raise ValueError("a set needs at least 2 images")
    if not p_shared:
        raise ValueError("p_shared must be non-empty")
    if client is None:
        return PromptBundle(
            p_shared=p_shared,
            p_theme=p_theme,
            p_nonshared=tuple(p_theme for _ in images),
            warnings=("no VLM client configured; templated captions used",),
        )
    user_text = (
        f"Shared content: {p_shared}\n"
        f"Theme: {p_theme}\n"
        f"The set contains {len(images)} photos, attached in order."
    )
    try:
        response = client.complete(CAPTION_SYSTEM_PROMPT, user_text, images)
        shared, captions, sources = _parse_caption_response(response, len(images))
    except VlmError as exc:
        warning = f"VLM caption expansion failed ({exc}); templated captions used"
        logger.warning(warning)
        return PromptBundle(
            p_shared=p_shared,
            p_theme=p_theme,
            p_nonshared=tuple(p_theme for _ in images),
            warnings=(warning,),
        )
    return PromptBundle(
        p_shared=shared or p_shared,
        p_theme=p_theme,
        p_nonshared=tuple(captions),
        p_source=tuple(sources) if sources else None,
    )


def build_grid_prompt(p_shared: str, p_i: str, p_j: str, orientation: str = HORIZONTAL) -> str:
    """Canvas prompt for a two-image grid edge. Pure template, byte-stable."""
    if not p_shared:
        raise ValueError("p_shared must be non-empty")
    if orientation == HORIZONTAL:
        return f"Image grid of {p_shared}. Left: {p_i}. Right: {p_j}."
    if orientation == VERTICAL:
        return f"Image grid of {p_shared}. Top: {p_i}. Bottom: {p_j}."
    raise ValueError(f"orientation must be '{HORIZONTAL}' or '{VERTICAL}', got {orientation!r}")
