"""Deterministic random streams.

Every consumer of randomness derives its own stream from a root seed plus a
tuple of integer ids (tile index, training step, ...).  Streams are
counter-based (Philox), so draws are identical no matter how work is split
across workers or in what order streams are created.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Independent generator keyed by (seed, *ids)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed)] + [int(i) for i in ids]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
