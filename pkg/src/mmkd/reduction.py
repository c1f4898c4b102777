"""Parameter-free token reduction by contiguous group averaging.

A modality producing k tokens is capped at a threshold theta: tokens are
partitioned in order into theta contiguous groups, the first theta-1 of size
floor(k/theta) and the last absorbing the k mod theta remainder, and each
group is replaced by its arithmetic mean. Sequences with k <= theta pass
through unchanged. The operation owns no trainable parameters.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _node


def reduced_token_count(k: int, theta: int) -> int:
    """Number of tokens after reduction: min(k, theta)."""
    if k < 1 or theta < 1:
        raise ValueError(f"k and theta must be >= 1, got k={k}, theta={theta}")
    return min(k, theta)


def group_sizes(k: int, theta: int) -> list[int]:
    """Contiguous group sizes; the last group takes the remainder."""
    if k < 1 or theta < 1:
        raise ValueError(f"k and theta must be >= 1, got k={k}, theta={theta}")
    if k <= theta:
        return [1] * k
    base = k // theta
    return [base] * (theta - 1) + [base + k % theta]


def theta_average(tokens, theta: int) -> Tensor:
    """Average contiguous token groups down to at most theta tokens.

    `tokens` is (k, d) or (batch, k, d); the token axis is the second to
    last. Backward distributes each output gradient uniformly (1/group size)
    over its group.
    """
    if theta < 1:
        raise ValueError(f"theta must be a positive integer, got {theta}")
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    k = tokens.shape[-2]
    if k <= theta:
        return tokens

    sizes = np.asarray(group_sizes(k, theta))
    starts = np.concatenate(([0], np.cumsum(sizes[:-1])))
    inv = (1.0 / sizes)[:, None]
    out = np.add.reduceat(tokens.data, starts, axis=-2) * inv

    def vjp(g):
        return (np.repeat(g * inv, sizes, axis=-2),)

    return _node(out, (tokens,), vjp)
