"""Deterministic seed derivation.

A trial seed is ``splitmix64(base_seed ^ splitmix64(trial_index))``; each
trial then spawns named child streams from a ``SeedSequence`` so that data
batches, initialisation and model noise never share state.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

TRIAL_STREAMS = (
    "spikes",
    "xi",
    "init",
    "grad_batch",
    "ridge_batch",
    "test_batch",
    "noise_train",
    "noise_test",
)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def trial_seed(base_seed: int, trial_index: int) -> int:
    return splitmix64((base_seed & MASK64) ^ splitmix64(trial_index))


def make_generator(seed, generator: str = "PCG64") -> np.random.Generator:
    bitgen = getattr(np.random, generator, None)
    if bitgen is None or not isinstance(bitgen, type) or not issubclass(bitgen, np.random.BitGenerator):
        raise ValueError(f"unknown bit generator {generator!r}")
    return np.random.Generator(bitgen(seed))


def spawn_streams(seed: int, names=TRIAL_STREAMS, generator: str = "PCG64") -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: make_generator(child, generator) for name, child in zip(names, children)}
