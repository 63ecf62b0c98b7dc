"""Counter-based random streams with stable per-index addressing.

Every stream is a Philox generator keyed by a tuple of non-negative
integers, so any consumer can recreate exactly the numbers it needs
without coordinating with other consumers or caring about call order.
"""

from __future__ import annotations

import numpy as np

# uint64 words of Philox key material derived per stream path
_KEY_WORDS = 2


def _check_path(path: tuple[int, ...]) -> None:
    if not path:
        raise ValueError("stream path must contain at least one integer")
    for part in path:
        if not isinstance(part, (int, np.integer)) or part < 0:
            raise ValueError(f"stream path parts must be non-negative ints, got {part!r}")


def philox_key(*path: int) -> np.ndarray:
    """Derive a Philox key from a tuple of non-negative integers."""
    _check_path(path)
    return np.random.SeedSequence(list(path)).generate_state(_KEY_WORDS, np.uint64)


def stream(*path: int) -> np.random.Generator:
    """Independent generator for the given path, e.g. stream(seed, lane, index)."""
    return np.random.Generator(np.random.Philox(key=philox_key(*path)))


def uniform_block(n: int, *path: int) -> np.ndarray:
    """First ``n`` uniforms of the path's stream.

    Position ``i`` of the block is a pure function of (path, i): a block of
    size m >= i+1 always contains the same value at position i, which lets
    batch producers and one-at-a-time consumers agree on the numbers.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    return stream(*path).random(n)


def uniform_at(index: int, *path: int) -> float:
    """The single uniform at ``index`` of the path's stream."""
    if index < 0:
        raise ValueError("index must be >= 0")
    return float(uniform_block(index + 1, *path)[-1])
