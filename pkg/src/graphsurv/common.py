"""Shared error types and the deterministic RNG convention.

All stochastic operations take an explicit integer seed and derive their
stream from numpy's PCG64 via ``SeedSequence`` so that results are a pure
function of (inputs, seed). Sub-streams are spawned with fixed integer
keys, never from global state.
"""

from __future__ import annotations

import numpy as np


class DataError(ValueError):
    """Invalid or inconsistent input data (CLI exit code 2)."""


class NumericError(ArithmeticError):
    """Numerical failure such as non-convergence or an empty estimand (CLI exit code 3)."""


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator for (seed, *keys); identical arguments give identical streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), *map(int, keys)))))
