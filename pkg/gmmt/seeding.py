from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed``; ``keys`` select an independent sub-stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *keys])))
