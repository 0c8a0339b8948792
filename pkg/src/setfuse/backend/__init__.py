from .base import (
    EMPTY_HOOKS,
    FEATURE_KINDS,
    BlockInfo,
    ControlSignal,
    DenoiserBackend,
    HookSet,
    apply_interceptor,
    concat_controls,
    control_strength,
    flow_step,
    sigma_schedule,
)
from .controls import (
    ControlExtractor,
    LuminanceDepth,
    SobelEdge,
    extract_controls,
    get_extractor,
)
from .mock import MockBackend

__all__ = [
    "BlockInfo",
    "HookSet",
    "EMPTY_HOOKS",
    "FEATURE_KINDS",
    "ControlSignal",
    "DenoiserBackend",
    "MockBackend",
    "apply_interceptor",
    "concat_controls",
    "control_strength",
    "sigma_schedule",
    "flow_step",
    "ControlExtractor",
    "LuminanceDepth",
    "SobelEdge",
    "extract_controls",
    "get_extractor",
]


def get_backend(kind: str, **kwargs) -> DenoiserBackend:
    """Instantiate a denoiser backend by config name ('mock' or 'dit')."""
    if kind == "mock":
        return MockBackend(**kwargs)
    if kind == "dit":
        from .dit import FluxDitBackend

        return FluxDitBackend(**kwargs)
    raise ValueError(f"unknown backend '{kind}' (expected 'mock' or 'dit')")
