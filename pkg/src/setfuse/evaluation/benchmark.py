"""Benchmark loader.

Expected layout: one directory per image set containing the set's images
(3 to 15 of them) and an ``edits.json`` of the form

    {"category": "subject" | "subject_background" | "storyboard_sketch",
     "edits": [{"shared": "...", "theme": "..."}, ...]}

Malformed sets are skipped with a per-set reason; the loader never fails on
a partially valid tree. The benchmark imagery itself is not part of this
package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".webp", ".bmp")
CATEGORIES = ("subject", "subject_background", "storyboard_sketch")
MIN_SET_SIZE = 3
MAX_SET_SIZE = 15


@dataclass(frozen=True)
class EditSpec:
    shared: str
    theme: str


@dataclass(frozen=True)
class BenchmarkSet:
    name: str
    category: str
    image_paths: tuple[Path, ...]
    edits: tuple[EditSpec, ...]

    def __len__(self) -> int:
        return len(self.image_paths)


@dataclass(frozen=True)
class BenchmarkIndex:
    sets: tuple[BenchmarkSet, ...]
    skipped: tuple[tuple[str, str], ...]

    @property
    def total_edits(self) -> int:
        return sum(len(s.edits) for s in self.sets)

    def by_category(self) -> dict[str, list[BenchmarkSet]]:
        out: dict[str, list[BenchmarkSet]] = {c: [] for c in CATEGORIES}
        for s in self.sets:
            out[s.category].append(s)
        return out


def _set_images(set_dir: Path) -> list[Path]:
    base = set_dir / "images" if (set_dir / "images").is_dir() else set_dir
    return sorted(p for p in base.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def load_benchmark(root: str | Path) -> BenchmarkIndex:
    """Index every valid set under ``root``; skip the rest with reasons."""
    root = Path(root)
    sets: list[BenchmarkSet] = []
    skipped: list[tuple[str, str]] = []
    if not root.exists():
        return BenchmarkIndex((), ((str(root), "root does not exist"),))
    for set_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = _set_images(set_dir)
        if not MIN_SET_SIZE <= len(images) <= MAX_SET_SIZE:
            skipped.append(
                (set_dir.name, f"{len(images)} images outside {MIN_SET_SIZE}..{MAX_SET_SIZE}")
            )
            continue
        edits_file = set_dir / "edits.json"
        if not edits_file.exists():
            skipped.append((set_dir.name, "missing edits.json"))
            continue
        try:
            payload = json.loads(edits_file.read_text(encoding="utf-8"))
            category = payload["category"]
            if category not in CATEGORIES:
                raise ValueError(f"unknown category '{category}'")
            edits = tuple(
                EditSpec(shared=str(e["shared"]), theme=str(e.get("theme", "")))
                for e in payload["edits"]
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            skipped.append((set_dir.name, f"malformed edits.json: {exc}"))
            continue
        sets.append(
            BenchmarkSet(
                name=set_dir.name,
                category=category,
                image_paths=tuple(images),
                edits=edits,
            )
        )
    return BenchmarkIndex(tuple(sets), tuple(skipped))
