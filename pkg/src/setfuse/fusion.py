"""Multiview feature fusion.

Averages denoiser-internal features (keys/values, intercepted before
positional rotation) at correspondence-matched coordinates: pairwise on a
single grid, and graph-wide by first averaging each image's feature copies
over its incident edges, then jointly fusing across images. Matched
locations end up sharing one feature vector, which is the mechanism that
makes matched-feature cosine similarity (and with it visual consistency)
rise.

All fusion reads happen before any write (simultaneous update), so the
two-image graph case reduces exactly to the pairwise rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .correspondence import CorrespondenceMap
from .graph import HORIZONTAL, VERTICAL, ConsistencyGraph, EdgeKey


@dataclass(frozen=True)
class FeatureMap:
    """Spatial feature tensor with coordinate pooling ``fmap[c]``.

    ``owner`` is an image id, or an (i, j) pair for grid maps, in which case
    ``orientation`` says along which axis the two halves are concatenated.
    """

    owner: int | EdgeKey
    data: torch.Tensor  # (H, W, D)
    block: str | None = None
    stream: str | None = None
    orientation: str | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be (H, W, D), got {tuple(self.data.shape)}")

    def __getitem__(self, coord: tuple[int, int]) -> torch.Tensor:
        return self.data[coord[0], coord[1]]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


def split_grid_feature(fmap: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    """Interpret a grid feature map as the concatenation of two per-image halves."""
    if not isinstance(fmap.owner, tuple):
        raise ValueError("split_grid_feature needs a grid map with a pair owner")
    orientation = fmap.orientation or HORIZONTAL
    axis = 1 if orientation == HORIZONTAL else 0
    size = fmap.data.shape[axis]
    if size % 2:
        raise ValueError("grid feature maps have an even concatenation axis")
    half_i, half_j = torch.split(fmap.data, size // 2, dim=axis)
    i, j = fmap.owner
    return (
        FeatureMap(owner=i, data=half_i, block=fmap.block, stream=fmap.stream),
        FeatureMap(owner=j, data=half_j, block=fmap.block, stream=fmap.stream),
    )


def concat_grid_feature(
    f_i: FeatureMap, f_j: FeatureMap, orientation: str, block: str | None = None, stream: str | None = None
) -> FeatureMap:
    axis = 1 if orientation == HORIZONTAL else 0
    return FeatureMap(
        owner=(int(f_i.owner), int(f_j.owner)),
        data=torch.cat([f_i.data, f_j.data], dim=axis),
        block=block,
        stream=stream,
        orientation=orientation,
    )


def _flat_index(coords: np.ndarray, width: int, device) -> torch.Tensor:
    return torch.as_tensor(coords[:, 0].astype(np.int64) * width + coords[:, 1].astype(np.int64), device=device)


def fuse_pair(
    f_ij: FeatureMap, map_ij: CorrespondenceMap, one_sided: bool = False
) -> FeatureMap:
    """Average the two halves of a grid feature map at matched coordinates.

    Both sides receive the common average by default, which is what makes
    matched features exactly equal afterwards; ``one_sided=True`` keeps the
    literal single-assignment form (only the source side is updated) for
    ablation. Unmatched coordinates pass through bit-identical, and an empty
    map is a no-op (the grid prior alone).
    """
    f_i, f_j = split_grid_feature(f_ij)
    h, w = f_i.spatial
    if map_ij.resolution != (h, w):
        raise ValueError(
            f"map resolution {map_ij.resolution} does not match feature resolution {(h, w)}"
        )
    if map_ij.is_empty:
        return FeatureMap(f_ij.owner, f_ij.data.clone(), f_ij.block, f_ij.stream, f_ij.orientation)
    d = f_i.data.shape[2]
    flat_i = f_i.data.reshape(h * w, d).clone()
    flat_j = f_j.data.reshape(h * w, d).clone()
    idx_src = _flat_index(map_ij.src, w, flat_i.device)
    idx_dst = _flat_index(map_ij.dst, w, flat_i.device)
    avg = 0.5 * (flat_i[idx_src] + flat_j[idx_dst])
    flat_i[idx_src] = avg
    if not one_sided:
        flat_j[idx_dst] = avg
    orientation = f_ij.orientation or HORIZONTAL
    axis = 1 if orientation == HORIZONTAL else 0
    data = torch.cat([flat_i.reshape(h, w, d), flat_j.reshape(h, w, d)], dim=axis)
    return FeatureMap(f_ij.owner, data, f_ij.block, f_ij.stream, f_ij.orientation)


def aggregate_incident(edge_features: Mapping[EdgeKey, FeatureMap]) -> FeatureMap:
    """Mean of one node's feature copies over its incident edges."""
    if len(edge_features) == 0:
        raise RuntimeError("internal invariant violation: node with no incident edges")
    keys = sorted(edge_features)
    first = edge_features[keys[0]]
    for k in keys[1:]:
        if edge_features[k].data.shape != first.data.shape:
            raise ValueError("incident feature copies must share shape")
        if edge_features[k].owner != first.owner:
            raise ValueError("incident feature copies must share the owning node")
    data = torch.stack([edge_features[k].data for k in keys]).mean(dim=0)
    return FeatureMap(first.owner, data, first.block, first.stream)


def fuse_graph(
    aggregated: Mapping[int, FeatureMap],
    maps: Mapping[EdgeKey, CorrespondenceMap],
) -> dict[int, FeatureMap]:
    """Jointly fuse per-node feature maps across the whole set.

    Every matched coordinate of node i becomes the mean of its own vector and
    all defined counterparts f_j[M_ij(c)]; undefined terms are omitted, so
    the divisor is the count of defined terms, never a fixed set size.
    Reads come from the pre-fusion maps only. Coordinates matched nowhere
    come back bit-identical.
    """
    node_ids = sorted(aggregated)
    if not node_ids:
        return {}
    h, w = aggregated[node_ids[0]].spatial
    d = aggregated[node_ids[0]].data.shape[2]
    for nid in node_ids:
        if aggregated[nid].spatial != (h, w):
            raise ValueError("aggregated feature maps must share shape")
    out: dict[int, FeatureMap] = {}
    flats = {nid: aggregated[nid].data.reshape(h * w, d) for nid in node_ids}
    by_source: dict[int, list[EdgeKey]] = {nid: [] for nid in node_ids}
    for key in sorted(maps):
        if key[0] in by_source:
            by_source[key[0]].append(key)
    for nid in node_ids:
        sums = flats[nid].clone()
        counts = torch.ones(h * w, 1, dtype=sums.dtype, device=sums.device)
        for key in by_source[nid]:
            cmap = maps[key]
            if cmap.is_empty:
                continue
            if cmap.resolution != (h, w):
                raise ValueError(
                    f"map {key} resolution {cmap.resolution} does not match features {(h, w)}"
                )
            other = flats[key[1]]
            idx_src = _flat_index(cmap.src, w, sums.device)
            idx_dst = _flat_index(cmap.dst, w, sums.device)
            sums.index_add_(0, idx_src, other[idx_dst])
            counts.index_add_(0, idx_src, torch.ones(len(cmap), 1, dtype=sums.dtype, device=sums.device))
        src_fm = aggregated[nid]
        out[nid] = FeatureMap(
            nid, (sums / counts).reshape(h, w, d), src_fm.block, src_fm.stream
        )
    return out


@dataclass(frozen=True)
class FusionSchedule:
    """When fusion applies: stream kind, timestep window, and block window.

    Defaults: every double-stream block while t > 3, the last three
    single-stream blocks while t > 15, targeting keys and values (intercepted
    before positional rotation). ``None`` disables a stream entirely.
    """

    double_stream_min_t: int | None = 3
    single_stream_min_t: int | None = 15
    single_stream_last_k: int = 3
    targets: tuple[str, ...] = ("key", "value")

    def validate(self, total_steps: int) -> None:
        for name, value in (
            ("double_stream_min_t", self.double_stream_min_t),
            ("single_stream_min_t", self.single_stream_min_t),
        ):
            if value is not None and not 0 <= value <= total_steps:
                raise ValueError(f"{name}={value} outside sampler range 0..{total_steps}")


def schedule_active(schedule: FusionSchedule, t: int, block, catalog: Sequence) -> bool:
    """Whether fusion runs at (t, block) given the backend's block catalog."""
    if block.stream == "double":
        return schedule.double_stream_min_t is not None and t > schedule.double_stream_min_t
    if block.stream == "single":
        if schedule.single_stream_min_t is None or t <= schedule.single_stream_min_t:
            return False
        singles = [b.block_id for b in catalog if b.stream == "single"]
        return block.block_id in singles[-schedule.single_stream_last_k :]
    raise ValueError(f"unknown stream {block.stream!r}")


def mff_interceptor(
    maps: Mapping[EdgeKey, CorrespondenceMap],
    schedule: FusionSchedule,
    t: int,
    catalog: Sequence,
    orientation: str = HORIZONTAL,
):
    """Build the feature interceptor enforcing graph-wide fusion at step ``t``.

    The interceptor receives every edge's feature tensor for one (block,
    kind) slot, splits grids into per-node halves, averages each node over
    its incident edges, fuses across the set, and writes the fused node
    features back into every grid. Keys that are plain ints are treated as
    already-per-node maps (the no-graph ablation path) and skip the
    aggregation stage.
    """

    def interceptor(block, kind: str, tensors: dict) -> dict:
        if kind not in schedule.targets or not schedule_active(schedule, t, block, catalog):
            return tensors
        keys = sorted(tensors)
        grid_mode = isinstance(keys[0], tuple)
        per_node: dict[int, dict[EdgeKey, FeatureMap]] = {}
        if grid_mode:
            for key in keys:
                fm = FeatureMap(owner=key, data=tensors[key], orientation=orientation)
                f_i, f_j = split_grid_feature(fm)
                per_node.setdefault(key[0], {})[key] = f_i
                per_node.setdefault(key[1], {})[key] = f_j
            aggregated = {nid: aggregate_incident(copies) for nid, copies in per_node.items()}
        else:
            aggregated = {key: FeatureMap(owner=key, data=tensors[key]) for key in keys}
        fused = fuse_graph(aggregated, maps)
        if grid_mode:
            return {
                key: torch.cat(
                    [fused[key[0]].data, fused[key[1]].data],
                    dim=1 if orientation == HORIZONTAL else 0,
                )
                for key in keys
            }
        return {key: fused[key].data for key in keys}

    return interceptor
