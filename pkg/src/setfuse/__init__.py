"""setfuse: consistent set-to-set image generation.

Given an unstructured set of source images and two prompts (shared content,
scene theme), generate a new set that keeps the source layouts and the
cross-image appearance of the shared content. Nodes of a consistency graph
hold per-image latents; edges denoise two-image grids jointly, with
denoiser-internal features fused at precomputed dense correspondences and a
matched-feature guidance loss refining the latents each step.
"""

__version__ = "0.1.0"

from .correspondence import (
    CorrespondenceMap,
    PixelMatch,
    compute_matches,
    rescale_map,
    subsample_matches,
    symmetrize_map,
)
from .fusion import FeatureMap, FusionSchedule, aggregate_incident, fuse_graph, fuse_pair, schedule_active
from .graph import (
    ConsistencyGraph,
    EdgeLatent,
    NodeLatent,
    build_graph,
    consolidate,
    make_edge_latent,
    split_edge_latent,
)
from .guidance import GuidanceConfig, guidance_loss, guidance_step, lr_schedule
from .prompts import PromptBundle, build_grid_prompt, compose_prompts

__all__ = [
    "__version__",
    "CorrespondenceMap",
    "PixelMatch",
    "compute_matches",
    "rescale_map",
    "subsample_matches",
    "symmetrize_map",
    "PromptBundle",
    "compose_prompts",
    "build_grid_prompt",
    "ConsistencyGraph",
    "NodeLatent",
    "EdgeLatent",
    "build_graph",
    "make_edge_latent",
    "split_edge_latent",
    "consolidate",
    "FeatureMap",
    "FusionSchedule",
    "fuse_pair",
    "aggregate_incident",
    "fuse_graph",
    "schedule_active",
    "GuidanceConfig",
    "guidance_loss",
    "guidance_step",
    "lr_schedule",
]
