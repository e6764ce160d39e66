"""SplitMix64 streams and the seed derivation used to regenerate masks.

Everything here works on unsigned 64-bit integers with wrap-around, so the
same seed produces the same bits on every platform and in every language
that implements SplitMix64.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def splitmix64_finalize(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """One SplitMix64 step from state ``x``: add the golden gamma, then finalize."""
    return splitmix64_finalize(x + GOLDEN_GAMMA)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def _finalize_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def stream(seeds, length: int) -> np.ndarray:
    """First ``length`` outputs of the SplitMix64 stream for each seed.

    ``seeds`` may be a scalar or any array of seeds; the result has shape
    ``seeds.shape + (length,)`` and dtype uint64. Output ``i`` is
    ``finalize(seed + (i + 1) * GOLDEN_GAMMA)``.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    steps = np.arange(1, length + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
    with np.errstate(over="ignore"):
        return _finalize_array(seeds[..., None] + steps)


def keep_threshold(keep_prob: float) -> int | None:
    """Integer threshold t with ``draw < t`` iff ``draw / 2**64 < keep_prob``.

    Returns None when every draw passes (keep_prob >= 1).
    """
    if keep_prob >= 1.0:
        return None
    if keep_prob <= 0.0:
        return 0
    # float -> exact rational, so the comparison is platform independent
    num, den = float(keep_prob).as_integer_ratio()
    return -((-num << 64) // den)


def bernoulli_keep(seeds, length: int, keep_prob) -> np.ndarray:
    """Boolean keep-masks, one row of ``length`` per seed.

    ``keep_prob`` is a scalar or an array broadcastable against ``seeds``.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    probs = np.broadcast_to(np.asarray(keep_prob, dtype=np.float64), seeds.shape)
    draws = stream(seeds, length)
    uniq, inverse = np.unique(probs, return_inverse=True)
    inverse = inverse.reshape(seeds.shape)
    out = np.empty(draws.shape, dtype=bool)
    for u, p in enumerate(uniq):
        sel = inverse == u
        t = keep_threshold(float(p))
        out[sel] = True if t is None else draws[sel] < np.uint64(t)
    return out
