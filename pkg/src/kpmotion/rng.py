"""Seeded random streams.

All randomness flows through numpy's PCG64 bit generator keyed by a
:class:`numpy.random.SeedSequence`. A stream is identified by a master seed
plus a tuple of integer or string tags, so independent consumers (identity
shapes, motion tracks, observation noise, minibatches, chunk noise) never
share state and never depend on call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(t: int | str) -> int:
    if isinstance(t, str):
        return zlib.crc32(t.encode("utf-8"))
    if t < 0:
        raise ValueError("stream tags must be non-negative")
    return int(t)


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Independent generator for ``seed`` and a stream path such as ``("noise", 3)``."""
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1),
                                 spawn_key=tuple(_tag(t) for t in stream))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(seed: int, *stream: int | str) -> int:
    """A 64-bit child seed, for APIs that take plain integers."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
