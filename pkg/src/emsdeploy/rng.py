"""Named, reproducible random substreams.

All randomness in a run flows from one root seed. Components derive
independent generators by name (e.g. "scenarios", ("batch", 3)) so that
adding draws in one component never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *path: object) -> int:
    """Stable integer seed for the substream named by ``path``.

    Hash-based, so identical across platforms and Python versions.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:16], "little")


def substream(seed: int, *path: object) -> np.random.Generator:
    """A Generator for the substream named by ``path`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(seed, *path)))
