"""Deterministic, label-addressed random number streams.

Every source of randomness in the package is an `RngStream`, a counter-based
Philox generator whose 128-bit key is derived from ``(seed, label)`` by a
stable hash (SHA-256).  Identical ``(seed, label)`` pairs replay bit-exactly
on any machine and any process; distinct labels under one seed give
statistically independent streams.  Consumption is part of the contract:

- ``uniforms(n)`` consumes exactly ``n`` counter increments (one 64-bit
  Philox word per double),
- ``gaussian(n)`` consumes exactly ``2 * n`` uniforms via Box-Muller.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError

_MAX_LABEL_BYTES = 64


def _derive_key(seed: int, label: str) -> int:
    """Stable 128-bit Philox key from (seed, label).

    Key = first 16 bytes (little-endian) of SHA-256 over the 8-byte
    little-endian seed, a '/' separator, and the UTF-8 label.
    """
    digest = hashlib.sha256(
        int(seed).to_bytes(8, "little", signed=False) + b"/" + label.encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """A private, replayable stream of randomness identified by (seed, label)."""

    def __init__(self, seed: int, label: str):
        if not label:
            raise ConfigError("stream label must be nonempty")
        if len(label.encode("utf-8")) > _MAX_LABEL_BYTES:
            raise ConfigError(
                f"stream label exceeds {_MAX_LABEL_BYTES} bytes: {label!r}"
            )
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.label = label
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(seed, label)))

    def uniforms(self, n: int) -> np.ndarray:
        """n i.i.d. doubles in [0, 1); consumes n counter increments."""
        if n < 0:
            raise ConfigError(f"draw count must be >= 0, got {n}")
        self.counter += n
        return self._gen.random(n)

    def gaussian(self, n: int) -> np.ndarray:
        """n i.i.d. standard normals via Box-Muller; consumes 2n uniforms.

        Each variate uses exactly two uniforms: z = sqrt(-2 ln(1-u1)) cos(2 pi u2).
        The sine branch is discarded to keep consumption fixed at 2 per variate.
        """
        if n == 0:
            return np.empty(0)
        u = self.uniforms(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return r * np.cos(2.0 * np.pi * u[:, 1])

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform on {0..high-1}; consumes n uniforms."""
        u = self.uniforms(n)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"
