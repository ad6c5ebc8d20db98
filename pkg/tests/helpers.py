"""Shared test utilities."""

import numpy as np


def randomize_flow(flow, rng, scale=0.5):
    """Knock a zero-initialized flow off the identity, in place.

    Perturbations are fan-in scaled so activations stay in a sane range;
    the goal is a non-trivial Jacobian, not a saturated one.
    """
    for p in flow.params:
        fan_in = p.shape[0] if p.ndim == 2 else 1
        p += rng.normal(size=p.shape) * (scale / np.sqrt(max(fan_in, 1)))


def quadratic_ridge(n, rng):
    """2-D samples concentrated on a parabola; clearly non-Gaussian."""
    x1 = rng.normal(size=n)
    x2 = 0.5 * x1**2 + 0.15 * rng.normal(size=n)
    return np.column_stack([x1, x2])
