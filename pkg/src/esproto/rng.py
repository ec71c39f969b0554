"""Labeled, counter-based random streams.

Every random draw in a run is addressed by (run seed, stream label, step,
index). Nothing depends on call order, worker count or how candidates are
sharded, which is what makes resumes and sharded runs bit-reproducible.
"""

from __future__ import annotations

import numpy as np

# stream labels occupy the second Philox key word
STREAM_POPULATION = 1
STREAM_TRAIN_EPISODE = 2
STREAM_VAL_EPISODE = 3
STREAM_TEST_EPISODE = 4
STREAM_INIT = 5
STREAM_SPLIT = 6

_MASK64 = (1 << 64) - 1


def philox(seed: int, stream: int, step: int, index: int) -> np.random.Generator:
    """Generator positioned at counter (step, index) under key (seed, stream).

    Draws advance only the low counter word, so distinct (step, index) pairs
    never overlap for fewer than 2**64 blocks per candidate.
    """
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, index & _MASK64, step & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def candidate_noise(seed: int, step: int, index: int, dim: int, sigma: float) -> np.ndarray:
    """Displacement of candidate ``index`` at ``step``: sigma * N(0, I), float32."""
    gen = philox(seed, STREAM_POPULATION, step, index)
    return (np.float32(sigma) * gen.standard_normal(dim, dtype=np.float32)).astype(np.float32)


def substream(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    return philox(seed, stream, step, 0)


def derived_seed(seed: int, stream: int) -> int:
    """A plain integer seed for consumers that need one (dataset split, init)."""
    return int(substream(seed, stream).integers(0, 2**63 - 1))
