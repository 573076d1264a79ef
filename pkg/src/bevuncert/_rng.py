"""Seeded counter-based random streams."""

from __future__ import annotations

import numpy as np


def stream(seed: int, *index: int) -> np.random.Generator:
    """Counter-based generator for the sub-stream ``(seed, *index)``.

    Sub-streams with different indices are statistically independent, so
    per-frame or per-pass work can run in any order with identical results.
    """
    ss = np.random.SeedSequence([seed, *index]) if index else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))
