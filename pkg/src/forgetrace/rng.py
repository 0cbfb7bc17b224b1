"""Named random substreams derived from a single run seed.

Every source of randomness in a run (corpus shuffle, weight init, retrieval,
eval subsampling) pulls from its own named substream so that components stay
individually reproducible no matter what the others consume.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(seed: int, name: str) -> int:
    """Stable 64-bit seed for the (seed, name) substream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))
