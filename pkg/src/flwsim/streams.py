"""Named deterministic RNG streams derived from one master seed.

Every stochastic component draws from its own stream keyed by (purpose,
repeat, round, device) as applicable, so changing one component never
perturbs the draws of another and repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np

TOPOLOGY = 0
PARTITION = 1
MODEL_INIT = 2
SUBSET = 3
ALLOCATION = 4
TRAINING = 5
TRANSMISSION = 6
FADING = 7


def seed_sequence(master_seed: int, *key: int) -> np.random.SeedSequence:
    """Child seed sequence for a named stream."""
    return np.random.SeedSequence(master_seed, spawn_key=tuple(key))


def rng_stream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for a named stream."""
    return np.random.default_rng(seed_sequence(master_seed, *key))


def stream_seed(master_seed: int, *key: int) -> int:
    """Stable 64-bit integer seed for a named stream."""
    return int(seed_sequence(master_seed, *key).generate_state(1, np.uint64)[0])
