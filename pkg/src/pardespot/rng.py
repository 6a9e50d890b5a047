"""Counter-based random streams.

Every random number a scenario consumes is a pure function of
``(stream_seed, depth, index)``. Scalar (Python int) and vectorised
(``numpy.uint64``) variants produce bit-identical values, which is what lets
the serial and data-parallel backends agree exactly.
"""
from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

_U_GOLDEN = np.uint64(_GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)

# depth occupies the high bits of the counter key, the per-step index the low 20
_INDEX_BITS = 20
MAX_DRAWS_PER_STEP = 1 << _INDEX_BITS


def mix64(x: int) -> int:
    """splitmix64 finaliser on a Python int."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser over a uint64 array (wrapping arithmetic)."""
    z = x + _U_GOLDEN
    z = (z ^ (z >> _U30)) * _U_M1
    z = (z ^ (z >> _U27)) * _U_M2
    return z ^ (z >> _U31)


def derive_seed(seed: int, index: int) -> int:
    """Child seed for ``index`` under a parent ``seed``."""
    return mix64((seed & MASK64) ^ mix64(index & MASK64))


def _counter_key(depth: int, index: int) -> int:
    if not 0 <= index < MAX_DRAWS_PER_STEP:
        raise ValueError(f"draw index {index} out of range")
    return mix64(((depth & 0xFFFFFFFFFFF) << _INDEX_BITS) | index)


def uniform(stream_seed: int, depth: int, index: int) -> float:
    """The ``index``-th uniform draw in [0, 1) at ``depth`` of a stream."""
    h = mix64((stream_seed & MASK64) ^ _counter_key(depth, index))
    return (h >> 11) * _INV53


def uniform_array(stream_seeds: np.ndarray, depth, index: int) -> np.ndarray:
    """Vectorised :func:`uniform` over many streams at one draw index.

    ``depth`` is an int or an array aligned with ``stream_seeds``.
    """
    if isinstance(depth, np.ndarray):
        if not 0 <= index < MAX_DRAWS_PER_STEP:
            raise ValueError(f"draw index {index} out of range")
        d = depth.astype(np.uint64) & np.uint64(0xFFFFFFFFFFF)
        key = mix64_array((d << np.uint64(_INDEX_BITS)) | np.uint64(index))
    else:
        key = np.uint64(_counter_key(depth, index))
    h = mix64_array(stream_seeds.astype(np.uint64, copy=False) ^ key)
    return (h >> _U11).astype(np.float64) * _INV53


def uniforms(stream_seed: int, depth: int, count: int) -> list[float]:
    return [uniform(stream_seed, depth, k) for k in range(count)]
