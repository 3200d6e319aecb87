"""Deterministic seed derivation: one root seed, counter-based splits.

Every consumer of randomness derives its generator from the root seed plus a
(domain, counter...) key, so subsystems are reproducible independently of
each other and of execution interleaving.
"""

from __future__ import annotations

import numpy as np

__all__ = ["DOMAIN", "spawn_rng", "derive_seed"]

DOMAIN = {
    "scene": 0,
    "capture": 1,
    "sample": 2,
    "peaks": 3,
    "patterns_init": 4,
    "map": 5,
    "fixed_patterns": 6,
    "finetune": 7,
    "holdout": 8,
}


def _seq(root_seed: int, key: tuple[int, ...]) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root_seed),
                                  spawn_key=tuple(int(k) for k in key))


def spawn_rng(root_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(_seq(root_seed, key))


def derive_seed(root_seed: int, *key: int) -> int:
    return int(_seq(root_seed, key).generate_state(1, dtype=np.uint64)[0] >> 1)
