"""Generation and localized-editing loops.

Each denoising step follows one barrier structure: build edge grids from the
node latents, denoise every grid jointly with fusion hooks, split and
consolidate the per-edge versions back into node latents, then refine with
guidance while it is active. Edit mode runs the same machinery on
inversion-free difference predictions between a target and a source path.
"""

from __future__ import annotations

import logging
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .. import __version__
from ..backend import (
    ControlSignal,
    DenoiserBackend,
    HookSet,
    concat_controls,
    control_strength,
    flow_step,
    get_backend,
    get_extractor,
    sigma_schedule,
)
from ..backend.controls import extract_controls
from ..correspondence import (
    CorrespondenceMap,
    compute_matches,
    get_matcher,
    match_cache_name,
    read_match_cache,
    rescale_map,
    subsample_matches,
    symmetrize_map,
    write_match_cache,
)
from ..errors import ConfigError, StageError
from ..fusion import FusionSchedule, mff_interceptor, FeatureMap, aggregate_incident, split_grid_feature
from ..graph import (
    ConsistencyGraph,
    EdgeKey,
    NodeLatent,
    build_graph,
    choose_orientation,
    consolidate,
    make_edge_latent,
    split_edge_latent,
    HORIZONTAL,
)
from ..guidance import GuidanceConfig, GuidanceState, guidance_step
from ..prompts import HttpVlmClient, PromptBundle, build_grid_prompt, compose_prompts
from ..seeding import stable_seed
from .config import RunConfig
from .manifest import RunManifest, write_failure_marker

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".webp", ".bmp")


def load_images(input_dir: str | Path, image_size: int) -> tuple[list[np.ndarray], list[str]]:
    """Decoded source set, sorted by filename, resized to the working square."""
    from PIL import Image

    paths = sorted(
        p for p in Path(input_dir).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if len(paths) < 2:
        raise ConfigError(f"need at least 2 images in {input_dir}, found {len(paths)}")
    images = []
    for p in paths:
        with Image.open(p) as img:
            images.append(
                np.asarray(img.convert("RGB").resize((image_size, image_size), Image.BILINEAR))
            )
    return images, [p.name for p in paths]


@dataclass
class PreparedRun:
    config: RunConfig
    backend: DenoiserBackend
    images: list[np.ndarray]
    image_names: list[str]
    orientation: str
    graph: ConsistencyGraph
    bundle: PromptBundle
    edge_prompts: dict[EdgeKey, str]
    node_prompts: dict[int, str]
    controls: list[ControlSignal] | None
    maps_fusion: dict[EdgeKey, CorrespondenceMap]
    maps_guidance: dict[EdgeKey, CorrespondenceMap]
    matcher_name: str
    manifest: RunManifest

    @property
    def n(self) -> int:
        return len(self.images)


def _build_backend(config: RunConfig) -> DenoiserBackend:
    if config.backend.kind == "mock":
        return get_backend(
            "mock",
            latent_channels=config.backend.latent_channels,
            latent_scale=config.backend.latent_scale,
            feature_dim=config.backend.feature_dim,
            n_double=config.backend.blocks_double,
            n_single=config.backend.blocks_single,
            total_steps=config.steps,
            model_seed=config.backend.model_seed,
        )
    return get_backend("dit", model_id=config.backend.model_id, device=config.backend.device)


def _assemble_prompts(config: RunConfig, images, manifest: RunManifest) -> PromptBundle:
    p = config.prompts
    shared = p.shared or "the shared subject"
    if p.per_image is not None:
        if len(p.per_image) != len(images):
            raise ConfigError(
                f"prompts.per_image has {len(p.per_image)} entries for {len(images)} images"
            )
        return PromptBundle(
            p_shared=shared,
            p_theme=p.theme,
            p_nonshared=tuple(p.per_image),
            p_source=tuple(p.source) if p.source else None,
        )
    client = None
    if config.vlm.endpoint and config.vlm.model:
        client = HttpVlmClient(
            config.vlm.endpoint,
            config.vlm.model,
            api_key=os.environ.get(config.vlm.api_key_env),
            timeout=config.vlm.timeout,
        )
    bundle = compose_prompts(shared, p.theme, images, client)
    for w in bundle.warnings:
        manifest.warn(w)
    if p.source:
        if len(p.source) != len(images):
            raise ConfigError(f"prompts.source has {len(p.source)} entries for {len(images)} images")
        bundle = PromptBundle(
            p_shared=bundle.p_shared,
            p_theme=bundle.p_theme,
            p_nonshared=bundle.p_nonshared,
            p_source=tuple(p.source),
            warnings=bundle.warnings,
        )
    return bundle


def _source_maps(
    config: RunConfig, images, manifest: RunManifest
) -> tuple[dict[EdgeKey, CorrespondenceMap], str]:
    """Raw matches for every ordered pair, from cache when available."""
    n = len(images)
    matcher = None
    matcher_name = f"cache:{config.match_cache}" if config.match_cache else None
    raw: dict[EdgeKey, CorrespondenceMap] = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            cmap = None
            if config.match_cache:
                path = Path(config.match_cache) / match_cache_name((i, j))
                if path.exists():
                    cmap, header = read_match_cache(path)
                    matcher_name = header.producer
            if cmap is None:
                if matcher is None:
                    matcher = get_matcher(config.matcher)
                    matcher_name = matcher.name
                cmap = compute_matches(
                    images[i], images[j], matcher, config.conf_threshold, pair=(i, j)
                )
            if cmap.warning:
                manifest.warn(cmap.warning)
            if config.match_fraction < 1.0:
                cmap = subsample_matches(
                    cmap, config.match_fraction, stable_seed(config.seed, "subsample", i, j)
                )
            raw[(i, j)] = cmap
    return raw, matcher_name or "unknown"


def prepare_run(config: RunConfig, manifest: RunManifest) -> PreparedRun:
    images, names = load_images(config.input_dir, config.image_size)
    n = len(images)
    backend = _build_backend(config)
    orientation = choose_orientation(*np.asarray(images[0]).shape[:2])
    graph = build_graph(n, config.degree_cap, stable_seed(config.seed, "graph"))
    graph = ConsistencyGraph(
        n=graph.n,
        edges=graph.edges,
        degree_cap=graph.degree_cap,
        seed=graph.seed,
        orientation=orientation,
    )
    bundle = _assemble_prompts(config, images, manifest)

    raw_maps, matcher_name = _source_maps(config, images, manifest)
    lat = config.image_size // backend.latent_scale
    feature_res = backend.feature_resolution((lat, lat))
    maps_fusion: dict[EdgeKey, CorrespondenceMap] = {}
    maps_guidance: dict[EdgeKey, CorrespondenceMap] = {}
    for i in range(n):
        for j in range(i + 1, n):
            m_ij, m_ji = raw_maps[(i, j)], raw_maps[(j, i)]
            if config.symmetrize:
                m_ij, m_ji = symmetrize_map(m_ij, m_ji)
            m_ij = rescale_map(m_ij, feature_res)
            m_ji = rescale_map(m_ji, feature_res)
            maps_fusion[(i, j)] = m_ij
            if not config.one_sided_fusion:
                maps_fusion[(j, i)] = m_ji
            maps_guidance[(i, j)] = m_ij

    def _grid_prompt(shared: str, first: str, second: str) -> str:
        if config.prompts.grid_template:
            return config.prompts.grid_template.format(shared=shared, first=first, second=second)
        return build_grid_prompt(shared, first, second, orientation)

    edge_prompts = {
        (i, j): _grid_prompt(bundle.p_shared, bundle.p_nonshared[i], bundle.p_nonshared[j])
        for (i, j) in graph.edges
    }
    node_prompts = {i: f"{bundle.p_shared}. {bundle.p_nonshared[i]}." for i in range(n)}

    controls = None
    if config.control.depth != "none" or config.control.edge != "none":
        depth_ex = get_extractor(config.control.depth) if config.control.depth != "none" else None
        edge_ex = get_extractor(config.control.edge) if config.control.edge != "none" else None
        zero = _ZeroExtractor()
        controls = extract_controls(
            images,
            depth_ex or zero,
            edge_ex or zero,
            cache_dir=config.control.cache_dir,
            weights=(
                config.control.depth_weight if depth_ex else 0.0,
                config.control.edge_weight if edge_ex else 0.0,
            ),
            strength=config.control.strength,
        )

    manifest.graph = graph.to_manifest()
    manifest.prompts = {
        "shared": bundle.p_shared,
        "theme": bundle.p_theme,
        "per_image": list(bundle.p_nonshared),
        "source": list(bundle.p_source) if bundle.p_source else None,
        "edge_prompts": {f"{i}-{j}": p for (i, j), p in sorted(edge_prompts.items())},
    }
    manifest.versions = {
        "setfuse": __version__,
        "torch": torch.__version__,
        "matcher": matcher_name,
        "backend": backend.describe(),
    }
    return PreparedRun(
        config=config,
        backend=backend,
        images=images,
        image_names=names,
        orientation=orientation,
        graph=graph,
        bundle=bundle,
        edge_prompts=edge_prompts,
        node_prompts=node_prompts,
        controls=controls,
        maps_fusion=maps_fusion,
        maps_guidance=maps_guidance,
        matcher_name=matcher_name,
        manifest=manifest,
    )


class _ZeroExtractor:
    name = "zero"

    def extract(self, image: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(image).shape[:2], dtype=np.float32)


def _step_controls(prepared: PreparedRun, strength: float, keys) -> dict:
    if prepared.controls is None:
        return {key: None for key in keys}
    out = {}
    for key in keys:
        if isinstance(key, tuple):
            i, j = key
            out[key] = (
                prepared.controls[i].with_strength(strength),
                prepared.controls[j].with_strength(strength),
            )
        else:
            out[key] = prepared.controls[key].with_strength(strength)
    return out


def _step_hooks(
    prepared: PreparedRun,
    schedule: FusionSchedule | None,
    t: int,
    fused_slots: list,
    features_dir: Path | None,
) -> HookSet:
    """Fusion interceptor plus optional feature capture, with a fused-slot counter."""
    catalog = prepared.backend.block_catalog
    inner = (
        mff_interceptor(prepared.maps_fusion, schedule, t, catalog, prepared.orientation)
        if schedule is not None
        else None
    )

    def interceptor(block, kind, tensors):
        if features_dir is not None:
            _dump_slot(prepared, features_dir, t, block, kind, tensors)
        if inner is None:
            return tensors
        out = inner(block, kind, tensors)
        if any(out[k] is not tensors[k] for k in tensors):
            fused_slots.append((t, block.block_id, kind))
        return out

    return HookSet(interceptor=interceptor)


def _dump_slot(prepared: PreparedRun, features_dir: Path, t: int, block, kind, tensors) -> None:
    """Persist pre-fusion per-node aggregated features for offline analysis."""
    per_node: dict[int, dict] = {}
    for key in sorted(tensors, key=repr):
        if isinstance(key, tuple):
            fm = FeatureMap(owner=key, data=tensors[key], orientation=prepared.orientation)
            f_i, f_j = split_grid_feature(fm)
            per_node.setdefault(key[0], {})[key] = f_i
            per_node.setdefault(key[1], {})[key] = f_j
        else:
            per_node[key] = {(key, key): FeatureMap(owner=key, data=tensors[key])}
    arrays = {
        str(nid): aggregate_incident(copies).data.detach().numpy()
        for nid, copies in per_node.items()
    }
    features_dir.mkdir(parents=True, exist_ok=True)
    np.savez(features_dir / f"t{t:02d}_{block.block_id}_{kind}.npz", **arrays)


def _resolve_out_dir(config: RunConfig, out_dir: str | Path | None) -> Path:
    if out_dir is not None:
        path = Path(out_dir)
    else:
        run_id = config.run_id or f"{config.mode}-{config.seed:08d}"
        path = Path(config.output_dir) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _decode_outputs(prepared: PreparedRun, nodes: Mapping[int, NodeLatent], out_path: Path) -> None:
    from PIL import Image

    for i in sorted(nodes):
        image = prepared.backend.decode_latent(nodes[i].z)
        target = out_path / f"img_{i}.png"
        Image.fromarray(image).save(target)
        prepared.manifest.record_output(target)


def generate_set(config: RunConfig, out_dir: str | Path | None = None) -> tuple[RunManifest, Path]:
    """Run the full set-to-set generation loop and write outputs + manifest."""
    manifest = RunManifest(mode="generate", config=config.model_dump())
    out_path = _resolve_out_dir(config, out_dir)
    stage = "prepare"
    timings: dict[str, float] = defaultdict(float)
    try:
        tic = time.perf_counter()
        prepared = prepare_run(config, manifest)
        timings["prepare"] = time.perf_counter() - tic

        stage = "denoise"
        backend = prepared.backend
        T = config.steps
        schedule = None
        if config.fusion.enabled:
            schedule = FusionSchedule(
                double_stream_min_t=config.fusion.double_stream_min_t,
                single_stream_min_t=config.fusion.single_stream_min_t,
                single_stream_last_k=config.fusion.single_stream_last_k,
                targets=tuple(config.fusion.targets),
            )
            schedule.validate(T)
        gcfg = GuidanceConfig(
            active_min_t=config.guidance.active_min_t,
            lr_start=config.guidance.lr_start,
            lr_end=config.guidance.lr_end,
            steps_per_t=config.guidance.steps_per_t,
            persist_state=config.guidance.persist_state,
        )
        gcfg.validate(T)
        guidance_on = config.guidance.enabled
        if guidance_on and not backend.differentiable:
            manifest.warn(f"backend '{backend.name}' is not differentiable; guidance disabled")
            guidance_on = False

        lat = config.image_size // backend.latent_scale
        nodes: dict[int, NodeLatent] = {}
        for i in range(prepared.n):
            gen = torch.Generator().manual_seed(stable_seed(config.seed, "init-noise", i))
            z = torch.randn(backend.latent_channels, lat, lat, generator=gen)
            nodes[i] = NodeLatent(id=i, z=z, timestep=T)

        features_dir = out_path / "features" if config.dump_features else None
        if features_dir is not None:
            features_dir.mkdir(parents=True, exist_ok=True)
            for key, cmap in prepared.maps_fusion.items():
                write_match_cache(
                    features_dir / match_cache_name(key),
                    cmap,
                    prepared.matcher_name,
                    config.conf_threshold,
                )
        gstate = GuidanceState()
        fused_slots: list = []
        for t in range(T, 0, -1):
            tic = time.perf_counter()
            strength = (
                control_strength(t, T) * config.control.strength
                if config.control.anneal
                else config.control.strength
            )
            if config.graph_enabled:
                keys = sorted(prepared.graph.edges)
                latents = {
                    (i, j): make_edge_latent(nodes[i], nodes[j], prepared.orientation).z
                    for (i, j) in keys
                }
                prompts = prepared.edge_prompts
            else:
                keys = list(range(prepared.n))
                latents = {i: nodes[i].z for i in keys}
                prompts = prepared.node_prompts
            controls = _step_controls(prepared, strength, keys)
            hooks = _step_hooks(prepared, schedule, t, fused_slots, features_dir)
            before = len(fused_slots)
            preds, _ = backend.denoise_batch(latents, prompts, controls, t, hooks)
            stepped = {key: flow_step(latents[key], preds[key], t, T) for key in keys}
            timings["denoise"] += time.perf_counter() - tic

            tic = time.perf_counter()
            if config.graph_enabled:
                versions: dict[int, list[NodeLatent]] = {i: [] for i in range(prepared.n)}
                for key in keys:  # ascending edge order: reproducible summation
                    a, b = split_edge_latent(
                        _edge(stepped[key], key, prepared.orientation, t - 1)
                    )
                    versions[a.id].append(a)
                    versions[b.id].append(b)
                nodes = consolidate(versions)
            else:
                nodes = {i: NodeLatent(id=i, z=stepped[i], timestep=t - 1) for i in keys}
            timings["consolidate"] += time.perf_counter() - tic

            stages = ["edges_denoised" if config.graph_enabled else "single_image_denoised"]
            stages.append("consolidated")
            entry = {"t": t, "stages": stages, "mff_slots_fused": len(fused_slots) - before}

            if guidance_on and t > gcfg.active_min_t:
                tic = time.perf_counter()
                nodes, loss = guidance_step(
                    nodes,
                    prepared.graph,
                    prepared.maps_guidance,
                    backend,
                    gcfg,
                    t,
                    prepared.edge_prompts if config.graph_enabled else prepared.node_prompts,
                    controls,
                    per_image=not config.graph_enabled,
                    state=gstate,
                )
                timings["guidance"] += time.perf_counter() - tic
                if loss is not None:
                    stages.append("guidance")
                    manifest.loss_trace.append({"t": t, "guidance_loss": loss})
            manifest.stage_trace.append(entry)

        stage = "decode"
        tic = time.perf_counter()
        _decode_outputs(prepared, nodes, out_path)
        timings["decode"] = time.perf_counter() - tic
    except Exception as exc:
        write_failure_marker(out_path, stage, exc)
        raise StageError(stage, exc) from exc

    manifest.timings = dict(timings)
    manifest.write(out_path)
    return manifest, out_path


def _edge(z: torch.Tensor, pair: EdgeKey, orientation: str, timestep: int):
    from ..graph import EdgeLatent

    return EdgeLatent(pair=pair, z=z, orientation=orientation, timestep=timestep)


def edit_set(config: RunConfig, out_dir: str | Path | None = None) -> tuple[RunManifest, Path]:
    """Localized editing: inversion-free difference predictions on the graph.

    Per edge, the prediction is the difference of the target-path and
    source-path velocities, both computed under the fusion machinery with
    the same correspondence maps; the final ``edit.n_min`` steps sample the
    target path directly. Guidance is omitted in this mode.
    """
    manifest = RunManifest(mode="edit", config=config.model_dump())
    out_path = _resolve_out_dir(config, out_dir)
    stage = "prepare"
    timings: dict[str, float] = defaultdict(float)
    try:
        tic = time.perf_counter()
        prepared = prepare_run(config, manifest)
        timings["prepare"] = time.perf_counter() - tic
        if config.guidance.enabled:
            manifest.warn("guidance is omitted in edit mode")

        backend = prepared.backend
        T = config.steps
        n_max, n_min, n_avg = config.edit.n_max, config.edit.n_min, config.edit.n_avg
        w_ctrl = config.edit.effective_w_ctrl
        bundle = prepared.bundle
        if bundle.p_source is None:
            raise ConfigError("edit mode requires source prompts (prompts.source or VLM output)")
        src_shared = config.prompts.source_shared or bundle.p_shared
        src_edge_prompts = {
            (i, j): build_grid_prompt(
                src_shared, bundle.p_source[i], bundle.p_source[j], prepared.orientation
            )
            for (i, j) in prepared.graph.edges
        }
        schedule = None
        if config.fusion.enabled:
            schedule = FusionSchedule(
                double_stream_min_t=config.edit.mff_double_min_t,
                single_stream_min_t=None,
                targets=tuple(config.fusion.targets),
            )
            schedule.validate(T)

        stage = "denoise"
        x_src = {i: backend.encode_image(img) for i, img in enumerate(prepared.images)}
        z_edit = {i: x_src[i].clone() for i in x_src}
        x_tar: dict[int, torch.Tensor] | None = None
        keys = sorted(prepared.graph.edges)
        fused_slots: list = []

        def _noised_sources(t: int, draw: int) -> dict[int, torch.Tensor]:
            sigma = sigma_schedule(t, T)
            out = {}
            for i in x_src:
                gen = torch.Generator().manual_seed(
                    stable_seed(config.seed, "edit-noise", t, i, draw)
                )
                noise = torch.randn(x_src[i].shape, generator=gen)
                out[i] = (1.0 - sigma) * x_src[i] + sigma * noise
            return out

        def _grids(node_tensors: Mapping[int, torch.Tensor]) -> dict[EdgeKey, torch.Tensor]:
            axis = 2 if prepared.orientation == HORIZONTAL else 1
            return {
                (i, j): torch.cat([node_tensors[i], node_tensors[j]], dim=axis)
                for (i, j) in keys
            }

        def _consolidate_grids(grids: Mapping[EdgeKey, torch.Tensor], t: int) -> dict[int, torch.Tensor]:
            versions: dict[int, list[NodeLatent]] = {i: [] for i in x_src}
            for key in keys:
                a, b = split_edge_latent(_edge(grids[key], key, prepared.orientation, t))
                versions[a.id].append(a)
                versions[b.id].append(b)
            return {i: nl.z for i, nl in consolidate(versions).items()}

        for t in range(T, 0, -1):
            if t > n_max:
                manifest.stage_trace.append({"t": t, "stages": ["skipped"], "mff_slots_fused": 0})
                continue
            tic = time.perf_counter()
            controls = _step_controls(prepared, w_ctrl, keys)
            hooks = _step_hooks(prepared, schedule, t, fused_slots, None)
            before = len(fused_slots)
            dt = sigma_schedule(t - 1, T) - sigma_schedule(t, T)
            if t > n_min:
                edit_grids = _grids(z_edit)
                delta = {key: torch.zeros_like(edit_grids[key]) for key in keys}
                for draw in range(n_avg):
                    z_src_t = _noised_sources(t, draw)
                    z_tar_t = {i: z_edit[i] + (z_src_t[i] - x_src[i]) for i in x_src}
                    v_src, _ = backend.denoise_batch(
                        _grids(z_src_t), src_edge_prompts, controls, t, hooks
                    )
                    v_tar, _ = backend.denoise_batch(
                        _grids(z_tar_t), prepared.edge_prompts, controls, t, hooks
                    )
                    for key in keys:
                        delta[key] = delta[key] + (v_tar[key] - v_src[key]) / n_avg
                stepped = {key: edit_grids[key] + dt * delta[key] for key in keys}
                z_edit = _consolidate_grids(stepped, t - 1)
                stages = ["flowedit_delta", "consolidated"]
            else:
                if x_tar is None:
                    z_src_t = _noised_sources(t, 0)
                    x_tar = {i: z_edit[i] + (z_src_t[i] - x_src[i]) for i in x_src}
                tar_grids = _grids(x_tar)
                v_tar, _ = backend.denoise_batch(
                    tar_grids, prepared.edge_prompts, controls, t, hooks
                )
                stepped = {key: tar_grids[key] + dt * v_tar[key] for key in keys}
                x_tar = _consolidate_grids(stepped, t - 1)
                stages = ["flowedit_direct", "consolidated"]
            timings["denoise"] += time.perf_counter() - tic
            manifest.stage_trace.append(
                {"t": t, "stages": stages, "mff_slots_fused": len(fused_slots) - before}
            )

        stage = "decode"
        tic = time.perf_counter()
        final = x_tar if (n_min >= 1 and x_tar is not None) else z_edit
        nodes = {i: NodeLatent(id=i, z=final[i], timestep=0) for i in final}
        _decode_outputs(prepared, nodes, out_path)
        timings["decode"] = time.perf_counter() - tic
    except Exception as exc:
        write_failure_marker(out_path, stage, exc)
        raise StageError(stage, exc) from exc

    manifest.timings = dict(timings)
    manifest.write(out_path)
    return manifest, out_path


def precompute_matches(
    input_dir: str | Path,
    out_dir: str | Path,
    matcher_name: str = "patch",
    threshold: float = 0.05,
    image_size: int = 512,
) -> list[Path]:
    """Compute and cache matches for every ordered image pair in a directory."""
    images, _ = load_images(input_dir, image_size)
    matcher = get_matcher(matcher_name)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(len(images)):
        for j in range(len(images)):
            if i == j:
                continue
            cmap = compute_matches(images[i], images[j], matcher, threshold, pair=(i, j))
            path = out / match_cache_name((i, j))
            write_match_cache(path, cmap, matcher.name, threshold)
            written.append(path)
    return written
