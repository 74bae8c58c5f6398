"""Seed derivation.

Every random stream in a run is derived from one root seed plus a stable
label path, e.g. ``derive_seed(7, "augment")`` or
``derive_seed(7, "stochastic", epoch, sample_id)``. Changing how one
subsystem consumes randomness never shifts another subsystem's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def stream(root: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
