from .config import RunConfig, load_config, validate_config
from .manifest import RunManifest, file_sha256
from .run import edit_set, generate_set, load_images, precompute_matches, prepare_run

__all__ = [
    "RunConfig",
    "validate_config",
    "load_config",
    "RunManifest",
    "file_sha256",
    "generate_set",
    "edit_set",
    "prepare_run",
    "load_images",
    "precompute_matches",
]
