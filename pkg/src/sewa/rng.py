"""Counter-keyed random streams.

Every random quantity in the package is drawn from a generator keyed by
``(stream, seed, *counters)``, so that e.g. the sample indices of SGD step
``t`` do not depend on how many draws happened before it.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream tags; never reorder, checkpoints and reports depend on them
SGD_BATCH = 1
GUMBEL = 2
BERNOULLI = 3
RANDOM_SELECT = 4
PROBE = 5
DATASET = 6
EVAL_SUBSET = 7


def keyed(stream: int, seed: int, *counters: int) -> np.random.Generator:
    words = [stream, seed & _MASK64] + [c & _MASK64 for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def open_uniform(gen: np.random.Generator, size) -> np.ndarray:
    """Uniforms strictly inside (0, 1): ``(r + 0.5) / 2**53`` on the top 53 bits."""
    n = int(np.prod(size))
    raw = gen.bit_generator.random_raw(n) >> np.uint64(11)
    return ((raw.astype(np.float64) + 0.5) / 2.0**53).reshape(size)
