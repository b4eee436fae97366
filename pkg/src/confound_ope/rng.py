"""Counter-based random streams keyed by ``(seed, purpose, index...)``.

Every random draw in the package goes through :func:`stream`, so a run is
fully determined by one integer seed and never depends on call order or on
how many workers took part.
"""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, purpose, *index)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_code(purpose), *(int(i) for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def episode_uniforms(seed: int, purpose: str, n: int, width: int) -> np.ndarray:
    """Uniforms of shape ``(n, width)``; row ``i`` depends only on ``i``.

    Rows are consecutive blocks of a single Philox stream, so the first ``m``
    rows are identical whether ``n = m`` or ``n > m``.
    """
    return stream(seed, purpose).random((n, width))


def child_seed(seed: int, purpose: str, *index: int) -> int:
    """Derive a 63-bit integer seed, e.g. for the ``r``-th replication."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_code(purpose), *(int(i) for i in index)]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)
