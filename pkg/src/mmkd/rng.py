"""Named, reproducible random streams.

All randomness in the pipeline is drawn from substreams of one master seed.
A stream is addressed by (seed, stream_id, path): the stream_id separates
the four independent concerns (data order, dropout draws, parameter init,
evaluation sampling) and the integer path addresses substreams below that,
e.g. per epoch or per sample. Identical addresses always produce identical
draw sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAM_IDS = {"data": 0, "dropout": 1, "init": 2, "eval": 3}


@dataclass(frozen=True)
class RngStream:
    """Address of one deterministic random substream."""

    seed: int
    stream_id: str
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.stream_id not in STREAM_IDS:
            raise ValueError(
                f"unknown stream_id {self.stream_id!r}, expected one of {sorted(STREAM_IDS)}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a nonnegative 64-bit integer")
        if any(k < 0 for k in self.path):
            raise ValueError("substream path keys must be nonnegative")

    def child(self, *keys: int) -> "RngStream":
        """Substream at `path + keys` under the same (seed, stream_id)."""
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        """Fresh generator for this address; repeatable across calls."""
        entropy = (int(self.seed), STREAM_IDS[self.stream_id]) + self.path
        return np.random.default_rng(np.random.SeedSequence(entropy))
