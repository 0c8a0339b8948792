"""Run configuration: TOML in, fully defaulted and range-checked models out.

An empty config file resolves to the default operating point (25 steps,
degree cap 4, match confidence threshold 0.05, fusion on double-stream
blocks for t > 3 and the last three single-stream blocks for t > 15,
guidance for t > 10 with lr annealed 0.016 -> 0.002, control annealed
1 -> 0). Unknown keys are rejected with their path.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PromptsConfig(_Section):
    shared: str = ""
    theme: str = ""
    per_image: Optional[list[str]] = None  # bypasses the VLM when given
    source: Optional[list[str]] = None  # per-image source descriptions (edit mode)
    source_shared: Optional[str] = None  # shared-content text for source-side grids
    grid_template: Optional[str] = None  # override with {shared}/{first}/{second} slots


class VlmConfig(_Section):
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: str = "SETFUSE_VLM_API_KEY"
    timeout: float = Field(default=60.0, gt=0)


class FusionConfig(_Section):
    enabled: bool = True
    double_stream_min_t: Optional[int] = Field(default=3, ge=0)
    single_stream_min_t: Optional[int] = Field(default=15, ge=0)
    single_stream_last_k: int = Field(default=3, ge=1)
    targets: list[Literal["key", "value"]] = ["key", "value"]


class GuidanceSection(_Section):
    enabled: bool = True
    active_min_t: int = Field(default=10, ge=0)
    lr_start: float = Field(default=0.016, gt=0)
    lr_end: float = Field(default=0.002, gt=0)
    steps_per_t: int = Field(default=1, ge=1)
    persist_state: bool = False

    @model_validator(mode="after")
    def _anneal_direction(self):
        if self.lr_start < self.lr_end:
            raise ValueError("guidance.lr_start must be >= guidance.lr_end")
        return self


class ControlConfig(_Section):
    depth: str = "luminance-depth"  # "none" disables the depth channel
    edge: str = "sobel-edge"
    depth_weight: float = Field(default=0.5, ge=0)
    edge_weight: float = Field(default=0.5, ge=0)
    strength: float = Field(default=1.0, ge=0, le=1)
    anneal: bool = True
    cache_dir: Optional[str] = None


class BackendConfig(_Section):
    kind: Literal["mock", "dit"] = "mock"
    latent_channels: int = Field(default=4, ge=1)
    latent_scale: int = Field(default=8, ge=1)
    feature_dim: Optional[int] = Field(default=None, ge=1)
    blocks_double: int = Field(default=4, ge=1)
    blocks_single: int = Field(default=4, ge=0)
    model_seed: int = 0
    model_id: Optional[str] = None  # dit checkpoint; falls back to SETFUSE_DIT_MODEL
    device: Optional[str] = None


class EditConfig(_Section):
    n_max: int = Field(default=24, ge=1)
    n_min: int = Field(default=10, ge=0)
    n_avg: int = Field(default=1, ge=1)
    w_ctrl: float = Field(default=0.5, ge=0, le=1)
    mff_double_min_t: Optional[int] = Field(default=20, ge=0)
    structure_priority: bool = False  # preset: w_ctrl = 0.8

    @property
    def effective_w_ctrl(self) -> float:
        return 0.8 if self.structure_priority else self.w_ctrl


class RunConfig(_Section):
    input_dir: str = "."
    output_dir: str = "out"
    run_id: Optional[str] = None
    mode: Literal["generate", "edit"] = "generate"
    seed: int = 0
    steps: int = Field(default=25, ge=1)
    image_size: int = Field(default=512, ge=16)
    degree_cap: int = Field(default=4, ge=1)
    conf_threshold: float = Field(default=0.05, ge=0, le=1)
    match_fraction: float = Field(default=1.0, gt=0, le=1)
    matcher: str = "patch"
    match_cache: Optional[str] = None
    symmetrize: bool = True
    one_sided_fusion: bool = False
    graph_enabled: bool = True
    dump_features: bool = False
    debug_decode: bool = False
    prompts: PromptsConfig = PromptsConfig()
    vlm: VlmConfig = VlmConfig()
    fusion: FusionConfig = FusionConfig()
    guidance: GuidanceSection = GuidanceSection()
    control: ControlConfig = ControlConfig()
    backend: BackendConfig = BackendConfig()
    edit: EditConfig = EditConfig()

    @model_validator(mode="after")
    def _windows_inside_schedule(self):
        if self.mode == "generate":
            checks = (
                ("fusion.double_stream_min_t", self.fusion.double_stream_min_t),
                ("fusion.single_stream_min_t", self.fusion.single_stream_min_t),
                ("guidance.active_min_t", self.guidance.active_min_t),
            )
        else:
            checks = (("edit.mff_double_min_t", self.edit.mff_double_min_t),)
        for path, value in checks:
            if value is not None and value > self.steps:
                raise ValueError(f"{path}={value} exceeds steps={self.steps}")
        if self.mode == "edit":
            if self.edit.n_max > self.steps:
                raise ValueError(f"edit.n_max={self.edit.n_max} exceeds steps={self.steps}")
            if self.edit.n_min > self.edit.n_max:
                raise ValueError("edit.n_min must not exceed edit.n_max")
        if self.image_size % self.backend.latent_scale:
            raise ValueError(
                f"image_size={self.image_size} must be divisible by backend.latent_scale={self.backend.latent_scale}"
            )
        return self


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {path}: {err['msg']}")
    return "\n".join(lines)


def validate_config(raw: str | bytes | dict, mode: str | None = None) -> RunConfig:
    """Parse and validate a TOML config (or a pre-parsed mapping).

    Raises :class:`ConfigError` with one line per offending key. Referenced
    paths (input_dir, match_cache, control cache) are checked for existence.
    """
    if isinstance(raw, (str, bytes)):
        text = raw.decode() if isinstance(raw, bytes) else raw
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from None
    else:
        data = dict(raw)
    if mode is not None:
        data["mode"] = mode
    try:
        config = RunConfig(**data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{_format_errors(exc)}") from None
    for path_key, value in (("input_dir", config.input_dir), ("match_cache", config.match_cache)):
        if value is not None and not Path(value).exists():
            raise ConfigError(f"invalid config:\n  {path_key}: path '{value}' does not exist")
    return config


def load_config(path: str | Path, mode: str | None = None) -> RunConfig:
    return validate_config(Path(path).read_text(encoding="utf-8"), mode=mode)
