"""Deterministic, splittable random state.

Every randomized operation in the package takes an explicit :class:`RngState`;
there is no hidden global randomness. The state is backed by the Philox
counter-based bit generator, so identical seeds produce identical streams on
every platform, and independent child states can be derived by name without
consuming any of the parent's stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ALGORITHM = "philox4x64"

_MAX_SEED = 2**64


@dataclass(frozen=True)
class RngState:
    """A 64-bit seed plus the (fixed) generator algorithm identifier."""

    seed: int
    algorithm: str = ALGORITHM

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < _MAX_SEED:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if self.algorithm != ALGORITHM:
            raise ConfigError(f"unsupported rng algorithm {self.algorithm!r} (expected {ALGORITHM!r})")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this state's stream."""
        key = np.array([self.seed, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, tag: str) -> "RngState":
        """Derive an independent child state; the same (seed, tag) always yields the same child."""
        digest = hashlib.blake2b(f"{self.seed}:{tag}".encode("utf-8"), digest_size=8).digest()
        return RngState(int.from_bytes(digest, "little"))
