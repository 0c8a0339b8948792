"""Stable sub-seed derivation.

Python's builtin ``hash`` is salted per process, so every seed that has to
survive a process boundary (per-node noise, graph wiring, subsampling) is
derived here from SHA-256 instead.
"""

from __future__ import annotations

import hashlib


def stable_seed(*parts: object) -> int:
    """Derive a 63-bit seed from an arbitrary tuple of hashable parts.

    Identical inputs give identical seeds on every platform and process.
    """
    digest = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def stable_unit_interval(*parts: object) -> float:
    """Map parts to a deterministic float in [0, 1)."""
    return stable_seed(*parts) / float(1 << 63)
