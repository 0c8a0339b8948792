"""Denoiser backend contract.

A backend owns a block catalog, latent geometry and a sampler step count,
and exposes exactly one interception surface: per-block key/value tensors
(before positional rotation) flow through a :class:`HookSet`. Fusion writes
through the hooks; guidance reads through the taps. Backends process all
requested grids in lockstep per block, so an interceptor sees every edge's
features for a slot at once.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from ..errors import HookContractViolation
from ..graph import HORIZONTAL, EdgeLatent

Key = Any  # opaque grid key: an (i, j) edge pair, or an int in per-image mode
FEATURE_KINDS = ("key", "value")


@dataclass(frozen=True)
class BlockInfo:
    block_id: str
    stream: str  # "double" | "single"
    index: int


@dataclass
class HookSet:
    """Feature interceptors (write path) and read taps for one denoise call.

    ``interceptor(block, kind, tensors)`` gets every grid's (H, W, D) feature
    tensor for the slot and returns replacements of identical shape.
    ``tap(block, kind)`` selects which slots' (post-interception) features are
    returned to the caller.
    """

    interceptor: Callable[[BlockInfo, str, dict[Key, torch.Tensor]], dict[Key, torch.Tensor]] | None = None
    tap: Callable[[BlockInfo, str], bool] | None = None


EMPTY_HOOKS = HookSet()


def apply_interceptor(
    hooks: HookSet, block: BlockInfo, kind: str, tensors: dict[Key, torch.Tensor]
) -> dict[Key, torch.Tensor]:
    """Run the interceptor and enforce the shape-preservation contract."""
    if hooks.interceptor is None:
        return tensors
    new = hooks.interceptor(block, kind, tensors)
    if set(new) != set(tensors):
        raise HookContractViolation(f"interceptor changed the key set at {block.block_id}/{kind}")
    for key, tensor in new.items():
        if tensor.shape != tensors[key].shape:
            raise HookContractViolation(
                f"interceptor changed shape at {block.block_id}/{kind}: "
                f"{tuple(tensors[key].shape)} -> {tuple(tensor.shape)}"
            )
    return new


@dataclass(frozen=True)
class ControlSignal:
    """Per-image spatial conditioning: depth and edge maps with a strength."""

    depth: np.ndarray
    edge: np.ndarray
    depth_weight: float = 0.5
    edge_weight: float = 0.5
    strength: float = 1.0

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float32)
        edge = np.asarray(self.edge, dtype=np.float32)
        if depth.shape != edge.shape or depth.ndim != 2:
            raise ValueError("depth and edge maps must be aligned 2D arrays")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"control strength must lie in [0, 1], got {self.strength}")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "edge", edge)

    def combined(self) -> np.ndarray:
        return self.depth_weight * self.depth + self.edge_weight * self.edge

    def with_strength(self, strength: float) -> "ControlSignal":
        return ControlSignal(self.depth, self.edge, self.depth_weight, self.edge_weight, strength)


ControlInput = ControlSignal | tuple[ControlSignal, ControlSignal] | None


def control_strength(t: int | float, total_steps: int) -> float:
    """Linearly annealed control weight: 1 at the first (noisiest) step, 0 at the last."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"t={t} outside 0..{total_steps}")
    return float(t) / float(total_steps)


def sigma_schedule(t: int, total_steps: int) -> float:
    """Linear flow noise level: sigma(total)=1 (pure noise), sigma(0)=0 (clean)."""
    return float(t) / float(total_steps)


def flow_step(z: torch.Tensor, velocity: torch.Tensor, t: int, total_steps: int) -> torch.Tensor:
    """One Euler step of the flow ODE from t to t-1."""
    dt = sigma_schedule(t - 1, total_steps) - sigma_schedule(t, total_steps)
    return z + dt * velocity


class DenoiserBackend(ABC):
    """Contract shared by the mock and the diffusion-transformer backends."""

    name: str = "abstract"
    block_catalog: tuple[BlockInfo, ...] = ()
    total_steps: int = 25
    differentiable: bool = False
    latent_channels: int = 4
    latent_scale: int = 8  # image pixels per latent cell

    def feature_resolution(self, latent_hw: tuple[int, int]) -> tuple[int, int]:
        """Spatial grid of intercepted features for a latent of this size."""
        return latent_hw

    @abstractmethod
    def denoise_batch(
        self,
        latents: Mapping[Key, torch.Tensor],
        prompts: Mapping[Key, str],
        controls: Mapping[Key, ControlInput],
        t: int,
        hooks: HookSet = EMPTY_HOOKS,
    ) -> tuple[dict[Key, torch.Tensor], dict[tuple[str, str], dict[Key, torch.Tensor]]]:
        """One velocity prediction per grid, hooks applied in block order.

        Returns predictions and the tapped features as
        ``{(block_id, kind): {key: (H, W, D) tensor}}``.
        """

    def denoise_edge(
        self,
        z_ij: EdgeLatent,
        prompt: str,
        control: ControlInput,
        hooks: HookSet = EMPTY_HOOKS,
        t: int | None = None,
    ) -> tuple[torch.Tensor, dict[tuple[str, str], torch.Tensor]]:
        """Single-edge convenience wrapper over :meth:`denoise_batch`."""
        step = z_ij.timestep if t is None else t
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"t={step} outside sampler range 0..{self.total_steps}")
        key = z_ij.pair
        preds, taps = self.denoise_batch(
            {key: z_ij.z},
            {key: prompt},
            {key: concat_controls(control, z_ij.orientation)},
            step,
            hooks,
        )
        return preds[key], {slot: per_key[key] for slot, per_key in taps.items()}

    @abstractmethod
    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        """Image (H, W, 3) uint8 -> latent (C, h, w)."""

    @abstractmethod
    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        """Latent (C, h, w) -> image (H, W, 3) uint8."""

    def describe(self) -> dict:
        return {
            "name": self.name,
            "total_steps": self.total_steps,
            "differentiable": self.differentiable,
            "latent_channels": self.latent_channels,
            "latent_scale": self.latent_scale,
            "blocks": [
                {"id": b.block_id, "stream": b.stream, "index": b.index}
                for b in self.block_catalog
            ],
        }


def concat_controls(
    control: ControlInput, orientation: str = HORIZONTAL
) -> ControlSignal | None:
    """Join an edge's two per-image controls along the grid axis."""
    if control is None or isinstance(control, ControlSignal):
        return control
    a, b = control
    axis = 1 if orientation == HORIZONTAL else 0
    return ControlSignal(
        depth=np.concatenate([a.depth, b.depth], axis=axis),
        edge=np.concatenate([a.edge, b.edge], axis=axis),
        depth_weight=a.depth_weight,
        edge_weight=a.edge_weight,
        strength=a.strength,
    )
