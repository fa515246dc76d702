"""Seed derivation.

Every random stream is a PCG64 generator keyed by ``SeedSequence(base_seed,
spawn_key=(tag, *index))``.  Tags keep the environment, walk and coupling
streams apart, so changing a horizon or a replica count never perturbs the
environment.
"""
from __future__ import annotations

import numpy as np

WALK_TAG = 1
ENV_TAG = 2
COARSE_TAG = 3
AUX_TAG = 4


def derive_seed_sequence(base_seed: int, tag: int, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(base_seed) & ((1 << 64) - 1),
                                  spawn_key=(int(tag),) + tuple(int(i) & 0xFFFFFFFF for i in index))


def make_rng(base_seed: int, tag: int = WALK_TAG, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(base_seed, tag, *index)))


def replica_rng(base_seed: int, replica: int) -> np.random.Generator:
    """Walk stream of replica ``replica`` under ``base_seed``."""
    return make_rng(base_seed, WALK_TAG, replica)
