"""Seeded weight initialization helpers.

All draws go through an explicit ``numpy.random.Generator`` so that two
builds from the same seed are bitwise identical.
"""
from __future__ import annotations

import numpy as np
from scipy import special


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std, via inverse-CDF sampling."""
    lo = special.ndtr(-2.0)
    hi = special.ndtr(2.0)
    u = rng.random(shape)
    return (special.ndtri(lo + u * (hi - lo)) * std).astype(dtype)


def fan_out_normal(rng: np.random.Generator, shape: tuple[int, int, int, int],
                   groups: int = 1, dtype=np.float32) -> np.ndarray:
    """He-style init for dense convolutions: std = sqrt(2 / fan_out).

    ``shape`` is (out_channels, in_channels/groups, kh, kw); fan_out counts
    the output elements each weight touches, divided across groups.
    """
    o, _, kh, kw = shape
    fan_out = kh * kw * o // groups
    std = float(np.sqrt(2.0 / fan_out))
    return (rng.standard_normal(shape) * std).astype(dtype)
