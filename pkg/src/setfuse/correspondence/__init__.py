from .maps import (
    CorrespondenceMap,
    PixelMatch,
    rescale_map,
    subsample_matches,
    symmetrize_map,
)
from .matchers import (
    DEFAULT_CONF_THRESHOLD,
    MatcherBackend,
    PatchCorrelationMatcher,
    RawMatches,
    RomaMatcher,
    compute_matches,
    get_matcher,
)
from .cache import (
    match_cache_name,
    read_match_cache,
    write_match_cache,
)

__all__ = [
    "CorrespondenceMap",
    "PixelMatch",
    "rescale_map",
    "subsample_matches",
    "symmetrize_map",
    "MatcherBackend",
    "PatchCorrelationMatcher",
    "RomaMatcher",
    "RawMatches",
    "compute_matches",
    "get_matcher",
    "DEFAULT_CONF_THRESHOLD",
    "write_match_cache",
    "read_match_cache",
    "match_cache_name",
]
