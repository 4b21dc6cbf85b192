"""Deterministic seed derivation.

Every random draw in a run is keyed to (master seed, purpose tag, ...),
so disabling one consumer (e.g. the watermark task) never shifts the
draws seen by another (e.g. batch shuffling).
"""

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Derive a stable 63-bit seed from a master seed and context tags."""
    text = repr((int(master),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master: int, *tags) -> np.random.Generator:
    """NumPy generator seeded from a derived seed."""
    return np.random.default_rng(derive_seed(master, *tags))
