"""Matched-feature similarity analysis.

Measures the mean cosine similarity of backend features at matched
coordinates against the all-to-all baseline, per block and timestep. This
is the signal behind the whole method: the similarity at matched locations
tracks visual consistency, while the baseline stays flat. The all-pairs
baseline uses the identity mean_pq cos(a_p, b_q) = mean(a_hat) . mean(b_hat),
so it is exact without materializing the (HW)^2 similarity matrix.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..correspondence import CorrespondenceMap

_DUMP_NAME = re.compile(r"t(?P<t>\d+)_(?P<block>[^_]+)_(?P<kind>key|value)\.npz$")


def _as_array(feat) -> np.ndarray:
    arr = getattr(feat, "data", feat)
    if hasattr(arr, "detach"):
        arr = arr.detach().cpu().numpy()
    return np.asarray(arr, dtype=np.float64)


def _normalized(flat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / np.maximum(norms, 1e-12)


def matched_feature_similarity(
    features: Mapping[int, object],
    maps: Mapping[tuple[int, int], CorrespondenceMap],
) -> tuple[float, float]:
    """(mean cosine at matched coordinates, all-to-all baseline cosine).

    ``features`` holds one (H, W, D) map per image; ``maps`` the
    correspondence maps at feature resolution, any set of ordered pairs.
    """
    flats = {nid: _as_array(f).reshape(-1, _as_array(f).shape[-1]) for nid, f in features.items()}
    normed = {nid: _normalized(flat) for nid, flat in flats.items()}
    widths = {nid: _as_array(f).shape[1] for nid, f in features.items()}
    matched: list[np.ndarray] = []
    baselines: list[float] = []
    for (i, j) in sorted(maps):
        cmap = maps[(i, j)]
        if i not in flats or j not in flats:
            continue
        baselines.append(float(normed[i].mean(axis=0) @ normed[j].mean(axis=0)))
        if cmap.is_empty:
            continue
        w = widths[i]
        idx_src = cmap.src[:, 0].astype(np.int64) * w + cmap.src[:, 1]
        idx_dst = cmap.dst[:, 0].astype(np.int64) * widths[j] + cmap.dst[:, 1]
        matched.append(np.einsum("md,md->m", normed[i][idx_src], normed[j][idx_dst]))
    matched_mean = float(np.concatenate(matched).mean()) if matched else float("nan")
    baseline_mean = float(np.mean(baselines)) if baselines else float("nan")
    return matched_mean, baseline_mean


@dataclass(frozen=True)
class SimilarityRow:
    t: int
    block: str
    stream: str
    kind: str
    matched: float
    baseline: float
    n_matches: int


def load_feature_dump(features_dir: str | Path) -> list[tuple[int, str, str, dict[int, np.ndarray]]]:
    """(t, block, kind, per-node arrays) for every dumped slot, sorted."""
    out = []
    for path in sorted(Path(features_dir).glob("t*_*.npz")):
        m = _DUMP_NAME.search(path.name)
        if not m:
            continue
        with np.load(path) as data:
            arrays = {int(k): data[k] for k in data.files}
        out.append((int(m.group("t")), m.group("block"), m.group("kind"), arrays))
    return out


def analyze_feature_dump(
    features_dir: str | Path,
    maps: Mapping[tuple[int, int], CorrespondenceMap],
    streams: Mapping[str, str] | None = None,
) -> list[SimilarityRow]:
    """Plot-ready similarity table from a run's feature dump."""
    rows = []
    n_matches = sum(len(m) for m in maps.values())
    for t, block, kind, arrays in load_feature_dump(features_dir):
        matched, baseline = matched_feature_similarity(arrays, maps)
        rows.append(
            SimilarityRow(
                t=t,
                block=block,
                stream=(streams or {}).get(block, "double" if block.startswith("d") else "single"),
                kind=kind,
                matched=matched,
                baseline=baseline,
                n_matches=n_matches,
            )
        )
    rows.sort(key=lambda r: (-r.t, r.block, r.kind))
    return rows


def format_similarity_table(rows: Sequence[SimilarityRow]) -> str:
    lines = ["t\tblock\tstream\tkind\tmatched_cosine\tbaseline_cosine\tn_matches"]
    for r in rows:
        lines.append(
            f"{r.t}\t{r.block}\t{r.stream}\t{r.kind}\t{r.matched:.6f}\t{r.baseline:.6f}\t{r.n_matches}"
        )
    return "\n".join(lines)
