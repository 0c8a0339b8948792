"""Deterministic mock denoiser for desk-scale verification.

The mock's prediction is an affine, bias-free map of the input latent:
every synthetic block derives key/value tensors linearly from the latent,
runs them through the hook surface, and projects them back into the
prediction. Prompt and control conditioning enter multiplicatively (a
text-hash gate and a per-pixel control gate), so the closed form

    v = gate * (alpha * z + sum_b P_b^K K'_b + P_b^V V'_b)

stays exactly linear and homogeneous in z: a zero latent yields zero
features and a zero prediction, and scaling z scales everything. The whole
path is plain torch, hence differentiable, which gives guidance gradients a
closed form to verify against finite differences.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from ..graph import HORIZONTAL, VERTICAL
from ..seeding import stable_seed, stable_unit_interval
from .base import (
    EMPTY_HOOKS,
    FEATURE_KINDS,
    BlockInfo,
    ControlInput,
    ControlSignal,
    DenoiserBackend,
    HookSet,
    Key,
    apply_interceptor,
    concat_controls,
)

PROMPT_GATE_SCALE = 0.05
CONTROL_GATE_SCALE = 0.1


class MockBackend(DenoiserBackend):
    name = "mock"
    differentiable = True

    def __init__(
        self,
        latent_channels: int = 4,
        latent_scale: int = 8,
        feature_dim: int | None = None,
        n_double: int = 4,
        n_single: int = 4,
        total_steps: int = 25,
        model_seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        self.latent_channels = latent_channels
        self.latent_scale = latent_scale
        self.feature_dim = feature_dim or latent_channels
        self.total_steps = total_steps
        self.model_seed = model_seed
        self.dtype = dtype
        blocks = [BlockInfo(f"d{i}", "double", i) for i in range(n_double)]
        blocks += [BlockInfo(f"s{i}", "single", n_double + i) for i in range(n_single)]
        self.block_catalog = tuple(blocks)
        self.alpha = 0.5
        self._lift: dict[tuple[str, str], torch.Tensor] = {}
        self._proj: dict[tuple[str, str], torch.Tensor] = {}
        n_terms = 2 * len(blocks)
        for block in blocks:
            for kind in FEATURE_KINDS:
                gen = torch.Generator().manual_seed(stable_seed(model_seed, block.block_id, kind, "lift"))
                lift = torch.randn(self.feature_dim, latent_channels, generator=gen, dtype=torch.float64)
                self._lift[(block.block_id, kind)] = (lift / np.sqrt(latent_channels)).to(dtype)
                gen = torch.Generator().manual_seed(stable_seed(model_seed, block.block_id, kind, "proj"))
                proj = torch.randn(latent_channels, self.feature_dim, generator=gen, dtype=torch.float64)
                self._proj[(block.block_id, kind)] = (proj / (np.sqrt(self.feature_dim) * n_terms)).to(dtype)

    def to_dtype(self, dtype: torch.dtype) -> "MockBackend":
        """Same model constants in a different precision (float64 for FD checks)."""
        clone = MockBackend(
            self.latent_channels,
            self.latent_scale,
            self.feature_dim,
            sum(1 for b in self.block_catalog if b.stream == "double"),
            sum(1 for b in self.block_catalog if b.stream == "single"),
            self.total_steps,
            self.model_seed,
            dtype,
        )
        return clone

    # --- conditioning gates -------------------------------------------------

    def _prompt_gate(self, prompt: str) -> float:
        if not prompt:
            return 1.0
        return 1.0 + PROMPT_GATE_SCALE * (2.0 * stable_unit_interval("prompt", prompt) - 1.0)

    def _control_gate(self, control: ControlInput, hw: tuple[int, int], orientation: str) -> torch.Tensor | float:
        signal = concat_controls(control, orientation)
        if signal is None or signal.strength == 0.0:
            return 1.0
        combined = torch.as_tensor(signal.combined(), dtype=self.dtype)
        pooled = F.adaptive_avg_pool2d(combined[None, None], hw)[0, 0]
        return 1.0 + CONTROL_GATE_SCALE * signal.strength * pooled

    # --- features and prediction ---------------------------------------------

    def _features(self, z: torch.Tensor, block_id: str, kind: str) -> torch.Tensor:
        # (C, h, w) -> (h, w, D), linear in z
        return torch.einsum("dc,chw->hwd", self._lift[(block_id, kind)].to(z.dtype), z)

    def _project(self, feats: torch.Tensor, block_id: str, kind: str) -> torch.Tensor:
        return torch.einsum("cd,hwd->chw", self._proj[(block_id, kind)].to(feats.dtype), feats)

    def denoise_batch(
        self,
        latents: Mapping[Key, torch.Tensor],
        prompts: Mapping[Key, str],
        controls: Mapping[Key, ControlInput],
        t: int,
        hooks: HookSet = EMPTY_HOOKS,
    ) -> tuple[dict[Key, torch.Tensor], dict[tuple[str, str], dict[Key, torch.Tensor]]]:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"t={t} outside sampler range 0..{self.total_steps}")
        keys = sorted(latents, key=repr)
        shape = next(iter(latents.values())).shape
        for key in keys:
            if latents[key].shape != shape:
                raise ValueError("all grid latents in one batch must share shape")
        preds = {key: self.alpha * latents[key] for key in keys}
        taps: dict[tuple[str, str], dict[Key, torch.Tensor]] = {}
        for block in self.block_catalog:
            for kind in FEATURE_KINDS:
                feats = {key: self._features(latents[key], block.block_id, kind) for key in keys}
                feats = apply_interceptor(hooks, block, kind, feats)
                if hooks.tap is not None and hooks.tap(block, kind):
                    taps[(block.block_id, kind)] = dict(feats)
                for key in keys:
                    preds[key] = preds[key] + self._project(feats[key], block.block_id, kind)
        for key in keys:
            _, h, w = latents[key].shape
            orientation = HORIZONTAL if w >= h else VERTICAL
            gate = self._prompt_gate(prompts.get(key, ""))
            cgate = self._control_gate(controls.get(key), (h, w), orientation)
            preds[key] = preds[key] * gate * cgate
        return preds, taps

    def mock_step(
        self, z: torch.Tensor, t: int, hooks: HookSet = EMPTY_HOOKS
    ) -> tuple[torch.Tensor, dict[tuple[str, str], torch.Tensor]]:
        """Bare closed-form step on one latent: no prompt, no control."""
        preds, taps = self.denoise_batch({0: z}, {0: ""}, {0: None}, t, hooks)
        return preds[0], {slot: per_key[0] for slot, per_key in taps.items()}

    def closed_form_operator(self) -> torch.Tensor:
        """The (C*h*w independent) channel-space matrix of the no-hook prediction.

        v = M z with M = alpha*I + sum_{b,kind} P_bk L_bk; used by tests to
        verify hook effects symbolically.
        """
        m = self.alpha * torch.eye(self.latent_channels, dtype=torch.float64)
        for block in self.block_catalog:
            for kind in FEATURE_KINDS:
                m = m + self._proj[(block.block_id, kind)].to(torch.float64) @ self._lift[
                    (block.block_id, kind)
                ].to(torch.float64)
        return m

    # --- image <-> latent ----------------------------------------------------

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        arr = torch.as_tensor(np.asarray(image, dtype=np.float32) / 255.0 * 2.0 - 1.0)
        arr = arr.permute(2, 0, 1)[None]  # (1, 3, H, W)
        pooled = F.avg_pool2d(arr, self.latent_scale)[0]
        c = self.latent_channels
        latent = torch.zeros(c, *pooled.shape[1:], dtype=self.dtype)
        latent[: min(3, c)] = pooled[: min(3, c)].to(self.dtype)
        if c > 3:
            latent[3] = pooled.mean(dim=0).to(self.dtype)
        return latent

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        c = min(3, latent.shape[0])
        rgb = latent[:c].to(torch.float32)
        if c < 3:
            rgb = rgb.expand(3, -1, -1).clone()
        rgb = F.interpolate(rgb[None], scale_factor=self.latent_scale, mode="nearest")[0]
        img = (torch.tanh(rgb) + 1.0) / 2.0 * 255.0
        return img.permute(1, 2, 0).round().clamp(0, 255).numpy().astype(np.uint8)
