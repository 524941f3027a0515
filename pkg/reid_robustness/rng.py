"""Seed derivation and counter-based random streams.

Every random draw in the toolkit comes from a generator built here from an
explicit 64-bit seed. Nothing touches numpy's global state.

Per-image seeds are ``splitmix64(master ^ (repeat << 32) ^ image_id)``. A seed
keys a Philox4x64 counter-based stream through one more SplitMix64 round, so
external tools can reproduce plans with a dozen lines of code.
"""
from __future__ import annotations

import numpy as np

from .const import SEED_MASK

_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """Return the SplitMix64 output for state ``x``."""
    z = (x + _GOLDEN_GAMMA) & SEED_MASK
    z = ((z ^ (z >> 30)) * _MIX1) & SEED_MASK
    z = ((z ^ (z >> 27)) * _MIX2) & SEED_MASK
    return z ^ (z >> 31)


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if seed < 0 or seed > SEED_MASK:
        raise ValueError(f"seed {seed} is outside the unsigned 64-bit range")
    return seed


def derive_image_seed(master_seed: int, repeat_index: int, image_id: int) -> int:
    mixed = check_seed(master_seed) ^ ((repeat_index << 32) & SEED_MASK)
    return splitmix64(mixed ^ check_seed(image_id))


def derive_seed(seed: int, *labels: int) -> int:
    """Fold integer labels into a seed, one SplitMix64 round per label."""
    out = check_seed(seed)
    for label in labels:
        out = splitmix64(out ^ (int(label) & SEED_MASK))
    return out


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=splitmix64(check_seed(seed))))
