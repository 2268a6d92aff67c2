"""Deterministic seed substreams.

Every random draw in the pipeline flows from one global seed through a
named substream, so stages can rerun independently and in any order
without changing each other's results. Substreams are derived with
SHA-256 (process-independent, unlike Python's builtin hash).
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(*parts: object) -> int:
    """63-bit seed derived from the given parts (stage names, ids, seeds)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream_rng(*parts: object) -> np.random.Generator:
    """Fresh generator for the named substream."""
    return np.random.default_rng(substream_seed(*parts))
