"""VLM two-alternative forced-choice harness.

Mirrors the human protocol: the judge sees one compiled image (source row on
top, candidate rows A and B in seed-randomized order), the shared-content
text, and the study question, and must answer with a single letter. The
verdict is de-randomized before it is reported, so "A" always means the
first candidate set passed in.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import VlmError
from ..prompts import VlmClient
from ..seeding import stable_seed

logger = logging.getLogger(__name__)

JUDGE_SYSTEM_PROMPT = (
    "You will receive an image to evaluate along with an evaluation question. Output A or B."
)
STUDY_QUESTION = (
    "The source image set contains shared foreground object(s). In which image set, "
    "A or B, are these objects edited more consistently across images?"
)


@dataclass(frozen=True)
class Judgement:
    verdict: str | None  # "A"/"B" relative to the caller's argument order; None = abstention
    presented_swap: bool
    degenerate: bool
    raw_responses: tuple[str, ...]


def compile_comparison_image(
    sources: Sequence[np.ndarray],
    row_a: Sequence[np.ndarray],
    row_b: Sequence[np.ndarray],
    pad: int = 8,
    label_height: int = 20,
) -> np.ndarray:
    """Stack labeled rows (Source / A / B) into one uint8 canvas."""
    from PIL import Image, ImageDraw

    rows = [("Source", sources), ("A", row_a), ("B", row_b)]
    tile_h, tile_w = np.asarray(sources[0]).shape[:2]
    n = max(len(imgs) for _, imgs in rows)
    width = n * tile_w + (n + 1) * pad
    height = len(rows) * (tile_h + label_height + pad) + pad
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    y = pad
    for label, imgs in rows:
        draw.text((pad, y), label, fill=(0, 0, 0))
        y += label_height
        for k, img in enumerate(imgs):
            canvas.paste(Image.fromarray(np.asarray(img, dtype=np.uint8)), (pad + k * (tile_w + pad), y))
        y += tile_h + pad
    return np.asarray(canvas)


def _parse_verdict(text: str) -> str | None:
    match = re.search(r"\b([AB])\b", text.strip(), flags=re.IGNORECASE)
    return match.group(1).upper() if match else None


def vlm_2afc(
    sources: Sequence[np.ndarray],
    gen_a: Sequence[np.ndarray],
    gen_b: Sequence[np.ndarray],
    p_shared: str,
    judge: VlmClient,
    seed: int = 0,
) -> Judgement:
    """Ask the judge which candidate set edits the shared content more consistently.

    Presentation order is randomized under the seed and undone in the
    returned verdict. Unparseable responses get one retry, then an
    abstention record. Byte-identical candidates are still judged but
    flagged degenerate.
    """
    if len(gen_a) != len(sources) or len(gen_b) != len(sources):
        raise ValueError("both generations must match the source set cardinality")
    degenerate = all(
        np.array_equal(np.asarray(a), np.asarray(b)) for a, b in zip(gen_a, gen_b)
    )
    if degenerate:
        logger.warning("2AFC candidates are byte-identical; verdict is uninformative")
    swap = stable_seed(seed, "2afc-order") % 2 == 1
    first, second = (gen_b, gen_a) if swap else (gen_a, gen_b)
    compiled = compile_comparison_image(sources, first, second)
    user_text = f"Shared content: {p_shared}\n\n{STUDY_QUESTION}"
    responses: list[str] = []
    verdict_presented = None
    for _ in range(2):  # one retry on unparseable output
        try:
            reply = judge.complete(JUDGE_SYSTEM_PROMPT, user_text, [compiled])
        except VlmError as exc:
            responses.append(f"<error: {exc}>")
            continue
        responses.append(reply)
        verdict_presented = _parse_verdict(reply)
        if verdict_presented is not None:
            break
    if verdict_presented is None:
        return Judgement(None, swap, degenerate, tuple(responses))
    if swap:
        verdict = "B" if verdict_presented == "A" else "A"
    else:
        verdict = verdict_presented
    return Judgement(verdict, swap, degenerate, tuple(responses))
