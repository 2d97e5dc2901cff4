"""Deterministic, splittable random streams.

Every stochastic choice in the pipeline draws from a named stream derived
from a base seed, so any unit of work (one example, one eval prompt, one
training phase) owns an independent generator.  Results then never depend
on scheduling or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(*parts) -> int:
    """Map a tuple of hashable parts to a stable 64-bit seed.

    Uses SHA-256 over the string rendering of the parts, so the mapping is
    identical across platforms and Python versions (unlike ``hash()``).
    """
    key = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(*parts) -> np.random.Generator:
    """Return a fresh PCG64 generator for the named stream."""
    return np.random.Generator(np.random.PCG64(stream_seed(*parts)))
