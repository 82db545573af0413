"""Seed handling: one user-visible seed, split into named independent streams.

Every stochastic component (corpus rendering, parameter init, batch
sampling, masking, decoding) draws from its own ``numpy.random.Generator``
derived here, so runs are reproducible regardless of which components are
exercised or in what order.

Splitting rule: stream = PCG64(SeedSequence([seed, h])) where h is the
64-bit avalanche hash of the stream name's UTF-8 bytes (see
:func:`masktts.corpus.prf`). The rule is documented so external tooling
can derive the same streams.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream_key", "named_stream", "torch_seed"]


def stream_key(name: str) -> int:
    """Map a stream name to a stable 64-bit integer."""
    from .corpus import prf

    data = name.encode("utf-8")
    # Pack bytes into 8-byte little-endian words; the tail word is zero padded.
    parts = [int.from_bytes(data[i : i + 8], "little") for i in range(0, len(data), 8)]
    return prf(parts or [0], salt=len(data))


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**63 - 1), stream_key(name) & (2**63 - 1)])))


def torch_seed(seed: int, name: str) -> int:
    """63-bit torch manual seed derived from the same splitting rule."""
    return int(named_stream(seed, name).integers(0, 2**63 - 1))
