"""Seeded random streams built on the Philox counter-based generator.

Every consumer of randomness in the package derives its stream from a
64-bit master seed plus a small integer path, so results are reproducible
and independent of execution order or thread count.  Two entry points:

- ``stratum_stream(seed, stratum_id)`` keys Philox directly with the
  (seed, stratum_id) pair; cheap enough to call once per stratum.
- ``substream(*path)`` hashes an arbitrary integer path through
  ``SeedSequence`` for hierarchical derivations (replication index,
  method index, bootstrap stage, ...).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1

# Reserved stratum-id slots for streams that are not tied to a stratum.
SIMPLE_KEY = _MASK64
LEFTOVER_KEY = _MASK64 - 1


def stratum_stream(seed: int, stratum_id: int) -> np.random.Generator:
    """Independent stream for one stratum: Philox keyed by (seed, stratum_id)."""
    key = np.array([seed & _MASK64, stratum_id & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substream(*path: int) -> np.random.Generator:
    """Independent stream for an arbitrary integer path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(tuple(p & _MASK64 for p in path))))


def subseed(*path: int) -> int:
    """Collapse a path to a single 64-bit seed (for keying stratum_stream)."""
    ss = np.random.SeedSequence(tuple(p & _MASK64 for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


def fingerprint(*path) -> str:
    """Short stable hex tag identifying a seed path (for audit columns)."""
    text = ":".join(str(p) for p in path)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
