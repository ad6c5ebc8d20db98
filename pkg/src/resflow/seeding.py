"""Deterministic RNG derivation.

Every stochastic component derives its generator from a root seed plus a
few integer or string tags (layer index, class id, epoch, purpose). The
derivation goes through numpy's SeedSequence so independently tagged
streams are statistically independent and reproducible regardless of the
order they are consumed in, which is what makes parallel training
deterministic.
"""

from __future__ import annotations

import numpy as np

__all__ = ["derived_rng", "derived_seed_entropy"]

_MASK64 = (1 << 64) - 1


def derived_seed_entropy(seed: int, *tags: int | str) -> list[int]:
    """Entropy list for SeedSequence: root seed plus stable tag encodings."""
    entropy = [int(seed) & _MASK64]
    for tag in tags:
        if isinstance(tag, str):
            # stable across processes, unlike hash()
            entropy.append(int.from_bytes(tag.encode("utf-8"), "little"))
        else:
            entropy.append(int(tag) & _MASK64)
    return entropy


def derived_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """PCG64 generator for (seed, tags), deterministic and order-free."""
    return np.random.default_rng(
        np.random.SeedSequence(derived_seed_entropy(seed, *tags))
    )
