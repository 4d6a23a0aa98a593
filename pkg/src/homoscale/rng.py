"""Deterministic random-number streams for ensemble simulation.

Every stochastic routine in this package takes an explicit ``RngStream``
instead of a bare seed.  A stream is a (seed, stream-index) pair backed by
the counter-based Philox generator, so

* the same (seed, stream) always reproduces the same draw sequence,
* distinct stream indices give statistically independent sequences without
  any coordination between workers (each index jumps the 256-bit counter
  by a disjoint 2**128 block).

Conventional stream-index roles used by the higher-level modules:
0 multiscale ensembles, 1 homogenized ensembles, 2 equilibrium sampling,
3 bootstrap/refit draws.  Nothing enforces the convention; it just keeps
independent parts of an experiment on independent streams by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngStream"]


@dataclass(frozen=True)
class RngStream:
    """Handle for one reproducible Philox substream."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        if not 0 <= int(self.stream) < 2**31:
            raise ValueError("stream index must be a non-negative 31-bit integer")

    def generator(self) -> np.random.Generator:
        """Fresh Generator positioned at this stream's counter block."""
        bg = np.random.Philox(key=int(self.seed))
        if self.stream:
            bg = bg.jumped(int(self.stream))
        return np.random.Generator(bg)

    def child(self, offset: int) -> "RngStream":
        """Stream with index shifted by ``offset`` (same seed)."""
        return RngStream(self.seed, self.stream + offset)
