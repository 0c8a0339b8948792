"""Command-line interface.

Subcommands: match (precompute correspondence caches), prompt (VLM caption
expansion), generate / edit (the two run modes, with the ablation flags),
eval (score a finished run), analyze (matched-feature similarity tables
from a feature dump).
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import __version__
from .errors import SetFuseError
from .pipeline.config import validate_config
from .pipeline.run import edit_set, generate_set, load_images, precompute_matches


@click.group()
@click.version_option(version=__version__)
def main():
    """Consistent set-to-set image generation."""


@main.command("match")
@click.option("--in", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--threshold", default=0.05, show_default=True, help="Confidence threshold.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--matcher", default="patch", show_default=True, help="Matcher backend (patch, roma).")
@click.option("--image-size", default=512, show_default=True)
def match_cmd(input_dir, threshold, out_dir, matcher, image_size):
    """Compute and cache dense matches for every ordered image pair."""
    written = precompute_matches(input_dir, out_dir, matcher, threshold, image_size)
    click.echo(f"wrote {len(written)} match caches to {out_dir}")


@main.command("prompt")
@click.option("--in", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--shared", required=True, help="Shared-content prompt.")
@click.option("--theme", default="", help="Style/theme prompt.")
@click.option("--out", "out_file", required=True, type=click.Path(dir_okay=False))
@click.option("--endpoint", default=None, help="VLM endpoint (or SETFUSE_VLM_ENDPOINT).")
@click.option("--model", default=None, help="VLM model name (or SETFUSE_VLM_MODEL).")
@click.option("--image-size", default=512, show_default=True)
def prompt_cmd(input_dir, shared, theme, out_file, endpoint, model, image_size):
    """Expand the two set-level prompts into per-image captions."""
    from .prompts import HttpVlmClient, compose_prompts

    images, _ = load_images(input_dir, image_size)
    endpoint = endpoint or os.environ.get("SETFUSE_VLM_ENDPOINT")
    model = model or os.environ.get("SETFUSE_VLM_MODEL")
    client = None
    if endpoint and model:
        client = HttpVlmClient(endpoint, model, api_key=os.environ.get("SETFUSE_VLM_API_KEY"))
    bundle = compose_prompts(shared, theme, images, client)
    payload = {
        "shared": bundle.p_shared,
        "theme": bundle.p_theme,
        "per_image": list(bundle.p_nonshared),
        "source": list(bundle.p_source) if bundle.p_source else None,
    }
    Path(out_file).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    for warning in bundle.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"wrote {out_file}")


def _load_config_with_overrides(config_path, mode, **overrides):
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib

    text = Path(config_path).read_text(encoding="utf-8") if config_path else ""
    data = tomllib.loads(text)
    data["mode"] = mode
    if overrides.get("no_guidance"):
        data.setdefault("guidance", {})["enabled"] = False
    if overrides.get("no_mff"):
        data.setdefault("fusion", {})["enabled"] = False
    if overrides.get("no_graph"):
        data["graph_enabled"] = False
    if overrides.get("degree_cap") is not None:
        data["degree_cap"] = overrides["degree_cap"]
    if overrides.get("match_fraction") is not None:
        data["match_fraction"] = overrides["match_fraction"]
    if overrides.get("seed") is not None:
        data["seed"] = overrides["seed"]
    if overrides.get("structure_priority"):
        data.setdefault("edit", {})["structure_priority"] = True
    return validate_config(data)


_run_options = [
    click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False)),
    click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False)),
    click.option("--no-guidance", is_flag=True, help="Disable feature guidance (ablation)."),
    click.option("--no-mff", is_flag=True, help="Disable feature fusion (ablation)."),
    click.option("--no-graph", is_flag=True, help="Per-image predictions instead of grids (ablation)."),
    click.option("--degree-cap", default=None, type=int, help="Override the node degree cap."),
    click.option("--match-fraction", default=None, type=float, help="Randomly keep this fraction of matches."),
    click.option("--seed", default=None, type=int),
]


def _with_run_options(fn):
    for opt in reversed(_run_options):
        fn = opt(fn)
    return fn


@main.command("generate")
@_with_run_options
def generate_cmd(config_path, out_dir, no_guidance, no_mff, no_graph, degree_cap, match_fraction, seed):
    """Generate a consistent output set from a source set."""
    config = _load_config_with_overrides(
        config_path,
        "generate",
        no_guidance=no_guidance,
        no_mff=no_mff,
        no_graph=no_graph,
        degree_cap=degree_cap,
        match_fraction=match_fraction,
        seed=seed,
    )
    manifest, out_path = generate_set(config, out_dir)
    for warning in manifest.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"wrote {len(manifest.outputs)} images and manifest to {out_path}")


@main.command("edit")
@_with_run_options
@click.option("--structure-priority", is_flag=True, help="Preset: control strength 0.8.")
def edit_cmd(
    config_path, out_dir, no_guidance, no_mff, no_graph, degree_cap, match_fraction, seed, structure_priority
):
    """Localized editing of a source set (inversion-free difference path)."""
    config = _load_config_with_overrides(
        config_path,
        "edit",
        no_guidance=no_guidance,
        no_mff=no_mff,
        no_graph=no_graph,
        degree_cap=degree_cap,
        match_fraction=match_fraction,
        seed=seed,
        structure_priority=structure_priority,
    )
    manifest, out_path = edit_set(config, out_dir)
    for warning in manifest.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"wrote {len(manifest.outputs)} images and manifest to {out_path}")


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--metrics", default="dino-matchsim", show_default=True, help="Comma-separated metric list.")
def eval_cmd(run_dir, metrics):
    """Score a run directory (metrics: dino-matchsim, clip)."""
    from .evaluation import evaluate_run, format_report

    names = [m.strip() for m in metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in ("dino-matchsim", "clip")]
    if unknown:
        raise click.BadParameter(f"unknown metrics: {unknown}")
    report = evaluate_run(run_dir, names)
    click.echo(format_report(report))


@main.command("analyze")
@click.option("--features", "features_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_file", default=None, type=click.Path(dir_okay=False))
def analyze_cmd(features_dir, out_file):
    """Matched-vs-baseline feature similarity table from a feature dump."""
    from .correspondence import read_match_cache
    from .evaluation import analyze_feature_dump, format_similarity_table

    features_dir = Path(features_dir)
    maps = {}
    for path in sorted(features_dir.glob("match_*.sfm")):
        cmap, _ = read_match_cache(path)
        maps[cmap.pair] = cmap
    if not maps:
        raise click.ClickException(f"no match caches in {features_dir} (run with dump_features=true)")
    streams = None
    manifest_path = features_dir.parent / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        streams = {
            b["id"]: b["stream"] for b in manifest["versions"]["backend"]["blocks"]
        }
    rows = analyze_feature_dump(features_dir, maps, streams)
    table = format_similarity_table(rows)
    if out_file:
        Path(out_file).write_text(table + "\n", encoding="utf-8")
        click.echo(f"wrote {out_file}")
    else:
        click.echo(table)


def run_main():
    try:
        main(standalone_mode=True)
    except SetFuseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    run_main()
