"""Counter-based random streams keyed by integer tuples.

Every stochastic draw in the package goes through :func:`stream`, which keys a
Philox4x64-10 generator from a tuple of non-negative integers such as
``(seed, epoch, STREAM_SHUFFLE)``. Distinct tuples give statistically
independent streams, and the same tuple always reproduces the same stream on
any platform.
"""

from __future__ import annotations

import numpy as np

PRNG_ID = "philox4x64-10/numpy-seedsequence-key"

# Stream identifiers; appended to key tuples so that, e.g., the shuffle and
# the noise for the same (seed, counter) never share bits.
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_NOISE = 4
STREAM_SKETCH = 5

_U64 = (1 << 64) - 1


def stream(*words: int) -> np.random.Generator:
    """Return a fresh generator keyed by ``words``."""
    if not words:
        raise ValueError("at least one key word is required")
    for w in words:
        if int(w) < 0 or int(w) > _U64:
            raise ValueError(f"key words must be unsigned 64-bit integers, got {w}")
    key = np.random.SeedSequence([int(w) for w in words]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
