"""Counter-based hashing and splittable random streams.

Environments are lazy: the jump law at a site is a pure function of
(master seed, spec, site), realized by hashing the coordinates with a
splitmix64-style mixer and mapping the 64-bit outputs to uniforms.
Monte Carlo replicas get independent Philox streams keyed by
(master seed, purpose tag, replica index), so results never depend on
worker count or execution order.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
SEED_MAX = (1 << 128) - 1

# purpose tags keeping the derived stream families disjoint
TAG_ENV = 0x01
TAG_WALK = 0x02
TAG_PAIR = 0x03
TAG_PROBE = 0x04
TAG_SITE_PICK = 0x05


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_words(*words: int) -> int:
    """Fold a tuple of integers (any sign) into one 64-bit hash."""
    h = 0x243F6A8885A308D3  # pi fractional bits, arbitrary nonzero start
    for i, w in enumerate(words):
        h = mix64(h ^ mix64((w & MASK64) + (i + 1) * GOLDEN))
    return h


def derive_key128(master_seed: int, *indices: int) -> int:
    """128-bit Philox key from the master seed and an index path."""
    if not 0 <= master_seed <= SEED_MAX:
        raise ValueError("master seed must fit in 128 bits")
    lo = master_seed & MASK64
    hi = master_seed >> 64
    a = hash_words(lo, hi, 0x51, *indices)
    b = hash_words(lo, hi, 0x52, *indices)
    return (a << 64) | b


def stream(master_seed: int, *indices: int) -> np.random.Generator:
    """Deterministic, splittable generator for one replica/purpose."""
    return np.random.Generator(np.random.Philox(key=derive_key128(master_seed, *indices)))


def env_seed(master_seed: int, replica: int) -> int:
    """Environment seed for the replica-th fresh environment."""
    return derive_key128(master_seed, TAG_ENV, replica)


# vectorized site hashing ----------------------------------------------------

_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(GOLDEN)
_H0 = np.uint64(0x243F6A8885A308D3)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the point here; silence numpy's overflow warning
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _C1
        z = (z ^ (z >> np.uint64(27))) * _C2
        return z ^ (z >> np.uint64(31))


def hash_words_vec(word_arrays: list[np.ndarray | int]) -> np.ndarray:
    """Vectorized hash_words: scalars broadcast against coordinate arrays."""
    h = None
    for i, w in enumerate(word_arrays):
        if np.ndim(w) == 0:
            wa = np.uint64(int(w) & MASK64)
        else:
            wa = np.asarray(w).astype(np.int64).view(np.uint64)
        with np.errstate(over="ignore"):
            step = _mix64_vec(wa + np.uint64(i + 1) * _GOLD)
        h = _mix64_vec((_H0 if h is None else h) ^ step)
    return h


def uniform_from_hash(h: np.ndarray) -> np.ndarray:
    """Map 64-bit hashes to uniforms strictly inside (0, 1).

    For the top 2^11 hash values the offset sum (2^53 - 1) + 0.5 rounds up
    to 2^53 in float64 and the product would be exactly 1.0, so the result
    is capped at the largest double below 1."""
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return np.minimum(u, 1.0 - 2.0 ** -53)
