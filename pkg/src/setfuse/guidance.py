"""Feature guidance: latent refinement by matched-feature distance descent.

Fusion is the analytic solution of this objective inside the forward pass;
guidance corrects what remains, directly in latent space, one light
adaptive-gradient step per denoising step. Gradients flow through an extra
backend forward pass, so updates reach beyond the discrete match locations,
which is what keeps the method robust when matches are sparse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch

from .correspondence import CorrespondenceMap
from .fusion import FeatureMap, split_grid_feature
from .graph import HORIZONTAL, ConsistencyGraph, EdgeKey, NodeLatent
from .backend.base import ControlInput, DenoiserBackend, HookSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GuidanceConfig:
    """Schedule and optimizer settings for the refinement step.

    Active only while t > ``active_min_t``. The learning rate anneals
    linearly over the full trajectory: ``lr_start`` at t = T down to
    ``lr_end`` at t = 0. Adam moments reset every denoising step unless
    ``persist_state`` is set.
    """

    active_min_t: int = 10
    lr_start: float = 0.016
    lr_end: float = 0.002
    steps_per_t: int = 1
    persist_state: bool = False
    feature_kinds: tuple[str, ...] = ("key", "value")

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.steps_per_t < 1:
            raise ValueError("steps_per_t must be >= 1")

    def validate(self, total_steps: int) -> None:
        if not 0 <= self.active_min_t <= total_steps:
            raise ValueError(f"active_min_t={self.active_min_t} outside sampler range 0..{total_steps}")


def lr_schedule(t: float, total_steps: int, lr_start: float = 0.016, lr_end: float = 0.002) -> float:
    """Linear anneal: lr(total_steps) = lr_start, lr(0) = lr_end."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"t={t} outside 0..{total_steps}")
    return lr_end + (lr_start - lr_end) * (float(t) / float(total_steps))


def _matched_distance(
    f_i: torch.Tensor, f_j: torch.Tensor, cmap: CorrespondenceMap
) -> torch.Tensor:
    """Mean L2 distance between matched feature vectors of one pair."""
    h, w, _ = f_i.shape
    src = torch.as_tensor(cmap.src.astype("int64"))
    dst = torch.as_tensor(cmap.dst.astype("int64"))
    vi = f_i.reshape(h * w, -1)[src[:, 0] * w + src[:, 1]]
    vj = f_j.reshape(h * w, -1)[dst[:, 0] * w + dst[:, 1]]
    # vector_norm has a zero subgradient at the zero vector, so the
    # all-features-identical fixed point backpropagates cleanly
    return torch.linalg.vector_norm(vi - vj, dim=-1).mean()


def guidance_loss(
    features: Mapping[tuple[EdgeKey, int], FeatureMap],
    maps: Mapping[EdgeKey, CorrespondenceMap],
    edges: Sequence[EdgeKey],
) -> torch.Tensor:
    """Matched-feature distance averaged over matches, then over edges.

    ``features`` holds one map per (edge, image-slot). Edges whose
    correspondence map is empty contribute nothing and are excluded from the
    edge average; the result is a non-negative scalar, zero exactly when
    every matched feature pair is identical.
    """
    terms = []
    for i, j in sorted(edges):
        cmap = maps.get((i, j))
        if cmap is None or cmap.is_empty:
            continue
        f_i = features[((i, j), i)]
        f_j = features[((i, j), j)]
        if cmap.resolution != f_i.spatial:
            raise ValueError(
                f"map {(i, j)} resolution {cmap.resolution} does not match features {f_i.spatial}"
            )
        terms.append(_matched_distance(f_i.data, f_j.data, cmap))
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).mean()


def _edge_objective(
    taps: Mapping[tuple[str, str], torch.Tensor],
    pair: EdgeKey,
    cmap: CorrespondenceMap,
    orientation: str,
    kinds: tuple[str, ...],
) -> torch.Tensor:
    """One edge's loss term, averaged over every tapped (block, kind) slot."""
    terms = []
    for (block_id, kind), grid in sorted(taps.items()):
        if kind not in kinds:
            continue
        fm = FeatureMap(owner=pair, data=grid, orientation=orientation)
        f_i, f_j = split_grid_feature(fm)
        terms.append(_matched_distance(f_i.data, f_j.data, cmap))
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).mean()


class GuidanceState:
    """Optional cross-step Adam state (``persist_state`` mode)."""

    def __init__(self):
        self.optimizer_state: dict | None = None


def guidance_step(
    node_latents: dict[int, NodeLatent],
    graph: ConsistencyGraph,
    maps: Mapping[EdgeKey, CorrespondenceMap],
    backend: DenoiserBackend,
    config: GuidanceConfig,
    t: int,
    edge_prompts: Mapping[EdgeKey, str],
    edge_controls: Mapping[EdgeKey, ControlInput],
    per_image: bool = False,
    state: GuidanceState | None = None,
) -> tuple[dict[int, NodeLatent], float | None]:
    """One refinement update of all node latents at step t.

    Identity for t <= active_min_t and for non-differentiable backends.
    Features come from an extra forward pass on the post-consolidation
    latents assembled into edge grids (or per-image latents in the no-graph
    ablation); gradients accumulate per edge in ascending order, then a
    single optimizer step updates every latent. Returns the refined latents
    and the loss value (None when inactive).
    """
    if t <= config.active_min_t:
        return node_latents, None
    if not backend.differentiable:
        logger.warning("backend %s is not differentiable; guidance disabled", backend.name)
        return node_latents, None

    node_ids = sorted(node_latents)
    leaves = {
        nid: node_latents[nid].z.detach().clone().requires_grad_(True) for nid in node_ids
    }
    lr = lr_schedule(t, backend.total_steps, config.lr_start, config.lr_end)
    optimizer = torch.optim.Adam([leaves[nid] for nid in node_ids], lr=lr)
    if config.persist_state and state is not None and state.optimizer_state is not None:
        optimizer.load_state_dict(state.optimizer_state)
        for group in optimizer.param_groups:
            group["lr"] = lr

    tap_all = HookSet(tap=lambda block, kind: kind in config.feature_kinds)
    edges = sorted(graph.edges)
    active_edges = [e for e in edges if maps.get(e) is not None and not maps[e].is_empty]
    loss_value = 0.0
    for _ in range(config.steps_per_t):
        optimizer.zero_grad()
        loss_value = 0.0
        if per_image:
            # no-graph ablation: one forward per image, loss still over edge pairs
            taps_by_node: dict[int, dict] = {}
            for nid in node_ids:
                _, taps = backend.denoise_batch(
                    {nid: leaves[nid]},
                    {nid: edge_prompts.get(nid, "")},
                    {nid: edge_controls.get(nid)},
                    t,
                    tap_all,
                )
                taps_by_node[nid] = {slot: per_key[nid] for slot, per_key in taps.items()}
            for i, j in active_edges:
                terms = []
                for slot in sorted(taps_by_node[i]):
                    if slot[1] not in config.feature_kinds:
                        continue
                    terms.append(
                        _matched_distance(taps_by_node[i][slot], taps_by_node[j][slot], maps[(i, j)])
                    )
                if terms:
                    term = torch.stack(terms).mean() / len(active_edges)
                    term.backward(retain_graph=True)
                    loss_value += float(term.detach())
        else:
            for i, j in active_edges:
                grid = torch.cat(
                    [leaves[i], leaves[j]], dim=2 if graph.orientation == HORIZONTAL else 1
                )
                key = (i, j)
                _, taps = backend.denoise_batch(
                    {key: grid},
                    {key: edge_prompts.get(key, "")},
                    {key: edge_controls.get(key)},
                    t,
                    tap_all,
                )
                edge_taps = {slot: per_key[key] for slot, per_key in taps.items()}
                term = _edge_objective(
                    edge_taps, key, maps[key], graph.orientation, config.feature_kinds
                ) / len(active_edges)
                term.backward()
                loss_value += float(term.detach())
        optimizer.step()

    if config.persist_state and state is not None:
        state.optimizer_state = optimizer.state_dict()

    refined = {
        nid: NodeLatent(id=nid, z=leaves[nid].detach(), timestep=node_latents[nid].timestep)
        for nid in node_ids
    }
    return refined, loss_value
