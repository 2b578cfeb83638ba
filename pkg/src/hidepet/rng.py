"""Deterministic, splittable random streams.

Every random draw in the package comes from a named stream derived from
(seed, path). Streams are independent counter-based Philox generators, so
determinism does not depend on call order and concurrent runs with disjoint
seeds never interact.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for a (seed, path...) label.

    The same label always yields the same stream; distinct labels yield
    statistically independent streams.
    """
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
