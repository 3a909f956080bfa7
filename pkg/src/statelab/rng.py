"""Seeded random streams.

All randomness in an experiment flows from one root seed through named
substreams ("data", "init", "intervention", ...), so a component that starts
consuming more randomness cannot perturb the draws of any other component.
"""

from __future__ import annotations

import numpy as np


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Derive an independent generator from (root_seed, name, indices).

    Deterministic across platforms: the name is folded into the SeedSequence
    entropy as an integer, and SeedSequence hashing is platform-independent.
    """
    name_key = int.from_bytes(name.encode("utf-8"), "little")
    ss = np.random.SeedSequence([int(root_seed), name_key, *[int(i) for i in indices]])
    return np.random.default_rng(ss)
