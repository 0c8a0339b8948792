"""Run-level evaluation: score a finished run directory against its sources."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..pipeline.manifest import RunManifest
from ..pipeline.run import load_images
from ..prompts import PromptBundle
from .adherence import TextImageScorer, clip_adherence
from .extractors import (
    FeatureExtractorClient,
    ForegroundMaskClient,
    LocalContrastMask,
    PatchStatsExtractor,
    apply_background_removal,
    mask_to_patch_grid,
)
from .nn_metric import dino_matchsim

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"


def _load_outputs(run_dir: Path, n: int, image_size: int) -> list[np.ndarray]:
    from PIL import Image

    outputs = []
    for i in range(n):
        path = run_dir / f"img_{i}.png"
        if not path.exists():
            raise FileNotFoundError(f"run output {path} is missing")
        with Image.open(path) as img:
            outputs.append(
                np.asarray(img.convert("RGB").resize((image_size, image_size), Image.BILINEAR))
            )
    return outputs


def evaluate_run(
    run_dir: str | Path,
    metrics: list[str],
    extractor: FeatureExtractorClient | None = None,
    mask_client: ForegroundMaskClient | None = None,
    scorer: TextImageScorer | None = None,
) -> dict:
    """Compute the requested metrics for one run directory.

    The run's manifest supplies the source directory and prompts. Returns
    (and writes) a report with per-pair and aggregate values.
    """
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    config = manifest["config"]
    sources, _ = load_images(config["input_dir"], config["image_size"])
    outputs = _load_outputs(run_dir, len(sources), config["image_size"])
    report: dict = {"run": str(run_dir), "metrics": {}}

    if "dino-matchsim" in metrics:
        extractor = extractor or PatchStatsExtractor()
        mask_client = mask_client or LocalContrastMask()
        if isinstance(extractor, PatchStatsExtractor):
            report.setdefault("notes", []).append(
                "consistency scored with the built-in patch-stats extractor; "
                "configure a DINOv3 checkpoint for the reference metric"
            )
        pixel_masks = [mask_client.mask(img) for img in sources]
        removed = [apply_background_removal(img, m) for img, m in zip(sources, pixel_masks)]
        src_feats = [extractor.extract(img) for img in removed]
        out_feats = [extractor.extract(img) for img in outputs]
        grid = src_feats[0].shape[:2]
        patch_masks = [
            mask_to_patch_grid(m, extractor.patch_size, grid) for m in pixel_masks
        ]
        result = dino_matchsim(src_feats, out_feats, masks=patch_masks)
        report["metrics"]["dino-matchsim"] = {
            "score": result.score,
            "mean_similarity": result.mean_similarity,
            "tau": result.tau,
            "pair_count": result.pair_count,
            "per_pair": {f"{i}-{j}": v for (i, j), v in sorted(result.per_pair.items())},
            "extractor": extractor.name,
            "mask_client": mask_client.name,
            "warnings": list(result.warnings),
        }

    if "clip" in metrics:
        if scorer is None:
            from .adherence import LongClipScorer

            scorer = LongClipScorer()
        prompts = manifest["prompts"]
        bundle = PromptBundle(
            p_shared=prompts["shared"],
            p_theme=prompts.get("theme", ""),
            p_nonshared=tuple(prompts["per_image"]),
        )
        report["metrics"]["clip"] = {
            "score": clip_adherence(outputs, bundle, scorer),
            "scorer": scorer.name,
        }

    (run_dir / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return report


def format_report(report: dict) -> str:
    lines = [f"run: {report['run']}"]
    for name, payload in sorted(report["metrics"].items()):
        lines.append(f"  {name}: {payload['score']:.4f}")
        if "per_pair" in payload:
            for pair, value in sorted(payload["per_pair"].items()):
                lines.append(f"    pair {pair}: {value:.4f}")
    for note in report.get("notes", []):
        lines.append(f"  note: {note}")
    return "\n".join(lines)
