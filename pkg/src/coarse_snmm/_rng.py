"""Counter-based random streams keyed by (seed, *indices).

Every stream is a Philox generator whose key is derived from the study seed
and a tuple of integer indices (replicate, bootstrap draw, patient block...),
so results never depend on how work is split across processes.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
