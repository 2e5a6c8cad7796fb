"""Counter-based random substreams.

Every random draw in the package comes from a ``numpy.random.Generator``
backed by Philox (a counter-based bit generator).  Streams are derived
deterministically from three integers::

    (master seed, purpose tag, block index)

through ``SeedSequence(entropy=seed, spawn_key=(tag, index))``.  The purpose
tags are fixed below and must never be renumbered, otherwise old manifests
stop reproducing.
"""
from __future__ import annotations

import numpy as np

PURPOSE_TAGS = {
    "noise": 1,  # shared Levy noise of a replica block
    "coupling": 2,  # maximal-coupling randomness (y side)
    "exact": 3,  # subordinated oracle sampler
    "gap": 4,  # stand-alone coupling-gap sampler
    "tv": 5,  # Monte Carlo TV estimates
    "aux": 6,  # anything else (tests, ad-hoc draws)
    "decomposition": 7,  # decomposition sampler in noise cross-checks
}


def substream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, index)``."""
    try:
        tag = PURPOSE_TAGS[purpose]
    except KeyError:
        raise ValueError(f"unknown stream purpose {purpose!r}") from None
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, int(index)))
    return np.random.Generator(np.random.Philox(ss))


def block_slices(n: int, block_size: int) -> list[slice]:
    """Fixed partition of ``range(n)`` into consecutive blocks."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    return [slice(i, min(i + block_size, n)) for i in range(0, n, block_size)]
