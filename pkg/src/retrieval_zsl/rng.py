"""Seeded random streams.

All randomness goes through Philox (a counter-based generator) keyed by a
``SeedSequence``; independent streams are obtained by spawning, never by
reseeding with nearby integers.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]
