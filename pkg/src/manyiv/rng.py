"""Counter-based, splittable random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, *path)``. Two streams with different paths are
statistically independent, and a stream's output never depends on how many
other streams were used before it. That is what makes Monte Carlo output
identical for any thread count or batching.
"""

from __future__ import annotations

import numpy as np

# top-level path components, kept distinct so that unrelated consumers of
# the same master seed never share a stream
WALD = 1
CALIBRATION = 2
DESIGN = 3
ERRORS = 4
BIAS = 5
RETRY = 6


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for ``path`` under master ``seed``."""
    if seed < 0 or any(k < 0 for k in path):
        raise ValueError("seed and stream path must be non-negative integers")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in path))
    return np.random.Generator(np.random.Philox(ss))
