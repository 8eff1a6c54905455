"""Seeded, splittable random streams.

Every stochastic routine in the package receives an explicit
``numpy.random.Generator``.  Streams are derived from a base seed plus a
tuple of keys (strings or integers) through SHA-256, and backed by the
counter-based Philox bit generator, so a stream for ``(seed, "dropout", 12)``
is the same no matter what was drawn before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *keys: int | str) -> int:
    """Hash ``seed`` and ``keys`` into a 128-bit integer."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(f"{type(key).__name__}:{key}".encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *keys)))
