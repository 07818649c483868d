"""Counter-based random streams.

Every random draw in the system is a pure function of a key tuple, so results
do not depend on how work is batched, ordered, or split across ranks. The mixer
is splitmix64's finalizer applied in a chain over the key components.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S32 = np.uint64(32)
_S11 = np.uint64(11)

# Domain tags keep independent uses of the same root from colliding.
DOMAIN_TRAIN = 1
DOMAIN_EVAL = 2
DOMAIN_SHUFFLE = 3
DOMAIN_INIT = 4
DOMAIN_DROPOUT = 5
DOMAIN_OWNER = 6


def _as_u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return arr
    # negative ints wrap to two's complement, which is what we want for keys
    return arr.astype(np.int64).view(np.uint64) if arr.dtype.kind == "i" else arr.astype(np.uint64)


def mix64(x) -> np.ndarray:
    """splitmix64 step over an array (or scalar) of uint64 values."""
    z = np.array(_as_u64(x), dtype=np.uint64, copy=True, ndmin=1)
    z += _GOLDEN
    z ^= z >> _S30
    z *= _M1
    z ^= z >> _S27
    z *= _M2
    z ^= z >> _S31
    return z


def hash_key(*parts) -> np.ndarray:
    """Fold key components into one 64-bit hash, broadcasting array parts."""
    h = mix64(np.uint64(0x5EED))
    for p in parts:
        h = mix64(h ^ mix64(p))
    return h


def key_scalar(*parts) -> int:
    return int(hash_key(*parts)[0])


def uniform(h: np.ndarray) -> np.ndarray:
    """Map hashes to float64 in [0, 1) using the top 53 bits."""
    return (np.asarray(h, dtype=np.uint64) >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)


def bounded(h: np.ndarray, n) -> np.ndarray:
    """Map hashes to integers in [0, n) by multiply-shift on the high 32 bits.

    ``n`` must be below 2**32; entries where n == 0 come back as 0.
    """
    hi = np.asarray(h, dtype=np.uint64) >> _S32
    return ((hi * np.asarray(n, dtype=np.uint64)) >> _S32).astype(np.int64)


def stream(key, count: int) -> np.ndarray:
    """``count`` hashes per key; result has shape key.shape + (count,)."""
    key = np.asarray(_as_u64(key))
    ctr = np.arange(count, dtype=np.uint64)
    return mix64(key[..., None] ^ mix64(ctr)).reshape(key.shape + (count,))


def permutation_order(key: int, ids: np.ndarray) -> np.ndarray:
    """Indices that shuffle ``ids`` by sorting on a keyed hash of each ID.

    The order of an element depends only on (key, its ID), never on its
    position, so the shuffle is reproducible from any input ordering.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    h = mix64(np.uint64(key) ^ mix64(ids))
    return np.lexsort((ids, h))


def glorot_uniform(key: int, fan_in: int, fan_out: int, shape, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    u = uniform(stream(np.uint64(key), n)) if n else np.zeros(0)
    return ((2.0 * u - 1.0) * limit).reshape(shape).astype(dtype)
