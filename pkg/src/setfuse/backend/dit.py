"""Depth/edge-controlled diffusion-transformer backend.

Adapter around a FLUX-style rectified-flow transformer with channelwise
control conditioning (FLUX.1 Depth lineage), exposing the same contract as
the mock backend: lockstep per-block execution of all edge grids with
key/value interception before rotary position embedding.

Heavy dependencies (diffusers, GPU weights) load lazily; without them the
constructor raises a recoverable :class:`BackendUnavailable`. The full
method is validated up to 20 images per run on an 80 GB device (22 without
guidance); that ceiling is a config limit, not a constant baked in here.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np
import torch

from ..errors import BackendUnavailable
from .base import (
    EMPTY_HOOKS,
    FEATURE_KINDS,
    BlockInfo,
    ControlInput,
    DenoiserBackend,
    HookSet,
    Key,
    apply_interceptor,
    concat_controls,
)

VALIDATED_MAX_IMAGES_FULL = 20
VALIDATED_MAX_IMAGES_NO_GUIDANCE = 22


class FluxDitBackend(DenoiserBackend):
    name = "dit"
    differentiable = True
    latent_scale = 8

    def __init__(
        self,
        model_id: str | None = None,
        device: str | None = None,
        dtype: torch.dtype = torch.bfloat16,
    ):
        model_id = model_id or os.environ.get("SETFUSE_DIT_MODEL")
        if not model_id:
            raise BackendUnavailable(
                "backend/dit", "set SETFUSE_DIT_MODEL to a depth-control FLUX checkpoint id or path"
            )
        try:
            from diffusers import FluxControlPipeline
        except ImportError as exc:
            raise BackendUnavailable(
                "backend/dit", "the 'diffusers' package is not installed"
            ) from exc
        device = device or ("cuda" if torch.cuda.is_available() else None)
        if device is None:
            raise BackendUnavailable("backend/dit", "no CUDA device available")
        try:
            self.pipe = FluxControlPipeline.from_pretrained(model_id, torch_dtype=dtype).to(device)
        except Exception as exc:
            raise BackendUnavailable("backend/dit", f"cannot load '{model_id}': {exc}") from exc
        self.device = device
        self.dtype = dtype
        self.latent_channels = self.pipe.vae.config.latent_channels
        tf = self.pipe.transformer
        blocks = [BlockInfo(f"d{i}", "double", i) for i in range(len(tf.transformer_blocks))]
        offset = len(blocks)
        blocks += [
            BlockInfo(f"s{i}", "single", offset + i)
            for i in range(len(tf.single_transformer_blocks))
        ]
        self.block_catalog = tuple(blocks)
        self._prompt_cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self._install_processors()

    # --- attention interception ------------------------------------------------

    def _install_processors(self):
        """Wrap every attention module so image-token K/V pass through our hooks.

        Double-stream blocks keep text and image tokens in separate
        projections; single-stream blocks concatenate text then image tokens,
        so only the image tail is exposed to interceptors. Interception
        happens after the qkv projections and before rotary embedding.
        """
        backend = self

        class InterceptingProcessor:
            def __init__(self, block: BlockInfo):
                self.block = block

            def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, image_rotary_emb=None, **kwargs):
                from diffusers.models.embeddings import apply_rotary_emb

                ctx = backend._step_ctx
                batch = hidden_states.shape[0]
                query = attn.to_q(hidden_states)
                key = attn.to_k(hidden_states)
                value = attn.to_v(hidden_states)
                head_dim = query.shape[-1] // attn.heads

                def _intercept(tensor: torch.Tensor, kind: str) -> torch.Tensor:
                    if ctx is None:
                        return tensor
                    n_text = ctx["n_text"] if encoder_hidden_states is None else 0
                    img = tensor[:, n_text:] if n_text else tensor
                    h, w = ctx["token_hw"]
                    per_key = {
                        k: img[b].reshape(h, w, -1) for b, k in enumerate(ctx["keys"])
                    }
                    per_key = apply_interceptor(ctx["hooks"], self.block, kind, per_key)
                    if ctx["hooks"].tap is not None and ctx["hooks"].tap(self.block, kind):
                        ctx["taps"].setdefault((self.block.block_id, kind), {}).update(per_key)
                    img = torch.stack([per_key[k].reshape(img.shape[1], -1) for k in ctx["keys"]])
                    return torch.cat([tensor[:, :n_text], img], dim=1) if n_text else img

                key = _intercept(key, "key")
                value = _intercept(value, "value")

                query = query.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
                key = key.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
                value = value.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
                if attn.norm_q is not None:
                    query = attn.norm_q(query)
                if attn.norm_k is not None:
                    key = attn.norm_k(key)

                if encoder_hidden_states is not None:
                    enc_q = attn.add_q_proj(encoder_hidden_states).view(batch, -1, attn.heads, head_dim).transpose(1, 2)
                    enc_k = attn.add_k_proj(encoder_hidden_states).view(batch, -1, attn.heads, head_dim).transpose(1, 2)
                    enc_v = attn.add_v_proj(encoder_hidden_states).view(batch, -1, attn.heads, head_dim).transpose(1, 2)
                    if attn.norm_added_q is not None:
                        enc_q = attn.norm_added_q(enc_q)
                    if attn.norm_added_k is not None:
                        enc_k = attn.norm_added_k(enc_k)
                    query = torch.cat([enc_q, query], dim=2)
                    key = torch.cat([enc_k, key], dim=2)
                    value = torch.cat([enc_v, value], dim=2)

                if image_rotary_emb is not None:
                    query = apply_rotary_emb(query, image_rotary_emb)
                    key = apply_rotary_emb(key, image_rotary_emb)

                out = torch.nn.functional.scaled_dot_product_attention(query, key, value)
                out = out.transpose(1, 2).reshape(batch, -1, attn.heads * head_dim).to(query.dtype)
                if encoder_hidden_states is not None:
                    n_text = encoder_hidden_states.shape[1]
                    enc_out, out = out[:, :n_text], out[:, n_text:]
                    out = attn.to_out[0](out)
                    out = attn.to_out[1](out)
                    enc_out = attn.to_add_out(enc_out)
                    return out, enc_out
                return out

        tf = self.pipe.transformer
        self._step_ctx = None
        for i, blk in enumerate(tf.transformer_blocks):
            blk.attn.processor = InterceptingProcessor(self.block_catalog[i])
        offset = len(tf.transformer_blocks)
        for i, blk in enumerate(tf.single_transformer_blocks):
            blk.attn.processor = InterceptingProcessor(self.block_catalog[offset + i])

    # --- contract ----------------------------------------------------------------

    def feature_resolution(self, latent_hw: tuple[int, int]) -> tuple[int, int]:
        # FLUX packs 2x2 latent patches into one token
        return latent_hw[0] // 2, latent_hw[1] // 2

    def _encode_prompt(self, prompt: str):
        if prompt not in self._prompt_cache:
            embeds, pooled, _ = self.pipe.encode_prompt(
                prompt=prompt, prompt_2=prompt, device=self.device
            )
            self._prompt_cache[prompt] = (embeds, pooled)
        return self._prompt_cache[prompt]

    def _control_latent(self, control: ControlInput, orientation: str) -> torch.Tensor | None:
        signal = concat_controls(control, orientation)
        if signal is None:
            return None
        combined = np.clip(signal.combined(), 0.0, 1.0)
        rgb = np.repeat(combined[..., None], 3, axis=2)
        image = torch.as_tensor(rgb * 2.0 - 1.0, dtype=self.dtype, device=self.device)
        image = image.permute(2, 0, 1)[None]
        latent = self.pipe.vae.encode(image).latent_dist.mode()
        latent = (latent - self.pipe.vae.config.shift_factor) * self.pipe.vae.config.scaling_factor
        return latent[0] * signal.strength

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
        c, h, w = latents[keys[0]].shape
        orientation = "horizontal" if w >= h else "vertical"
        packed = torch.stack(
            [self.pipe._pack_latents(latents[k][None].to(self.device, self.dtype), 1, c, h, w)[0] for k in keys]
        )
        ctrl = []
        for k in keys:
            cl = self._control_latent(controls.get(k), orientation)
            ctrl.append(
                self.pipe._pack_latents(cl[None], 1, c, h, w)[0]
                if cl is not None
                else torch.zeros_like(packed[0])
            )
        packed = torch.cat([packed, torch.stack(ctrl)], dim=-1)
        embeds, pooled = zip(*(self._encode_prompt(prompts.get(k, "")) for k in keys))
        text_ids = torch.zeros(embeds[0].shape[1], 3, device=self.device, dtype=self.dtype)
        img_ids = self.pipe._prepare_latent_image_ids(len(keys), h // 2, w // 2, self.device, self.dtype)
        sigma = torch.full((len(keys),), t / self.total_steps, device=self.device, dtype=self.dtype)
        taps: dict[tuple[str, str], dict[Key, torch.Tensor]] = {}
        self._step_ctx = {
            "keys": keys,
            "hooks": hooks,
            "taps": taps,
            "token_hw": (h // 2, w // 2),
            "n_text": embeds[0].shape[1],
        }
        try:
            velocity = self.pipe.transformer(
                hidden_states=packed,
                timestep=sigma,
                pooled_projections=torch.cat(pooled),
                encoder_hidden_states=torch.cat(embeds),
                txt_ids=text_ids,
                img_ids=img_ids,
                return_dict=False,
            )[0]
        finally:
            self._step_ctx = None
        preds = {}
        for b, k in enumerate(keys):
            unpacked = self.pipe._unpack_latents(
                velocity[b][None], h * self.latent_scale, w * self.latent_scale, self.latent_scale
            )[0]
            preds[k] = unpacked.to(latents[k].dtype)
        return preds, taps

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        arr = torch.as_tensor(np.asarray(image, dtype=np.float32) / 255.0 * 2.0 - 1.0)
        arr = arr.permute(2, 0, 1)[None].to(self.device, self.dtype)
        latent = self.pipe.vae.encode(arr).latent_dist.mode()
        latent = (latent - self.pipe.vae.config.shift_factor) * self.pipe.vae.config.scaling_factor
        return latent[0]

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        z = latent[None].to(self.device, self.dtype)
        z = z / self.pipe.vae.config.scaling_factor + self.pipe.vae.config.shift_factor
        image = self.pipe.vae.decode(z).sample[0]
        image = ((image.float().clamp(-1, 1) + 1.0) / 2.0 * 255.0).round()
        return image.permute(1, 2, 0).cpu().numpy().astype(np.uint8)
