"""Counter-based random streams for reproducible path simulation.

Every variate is a pure function of ``(seed, path_index, step, stream, slot)``
so a path's noise does not depend on how many other paths are simulated
alongside it, or in which order.  The block cipher is Philox4x32-10
(Salmon et al., "Parallel random numbers: as easy as 1, 2, 3", SC'11);
normal variates are produced by inverse-CDF so that the only floating point
operation involved is ``scipy.special.ndtri``.

Counter layout for one Philox block::

    c0 = step (low 32 bits)      c1 = block | stream << 16
    c2 = path_index (low 32)     c3 = path_index (high 32)
    k0 = seed (low 32)           k1 = seed (high 32)

Each block yields four 32-bit words, i.e. two 52-bit uniforms.
"""

from __future__ import annotations

import numba
import numpy as np
from scipy.special import ndtri

__all__ = [
    "NOISE_STREAM",
    "AUX_STREAM",
    "philox4x32",
    "uniforms",
    "normals",
    "split_seed",
]

#: stream carrying the Wiener increments and the bridge-crossing uniforms
NOISE_STREAM = 0
#: spare stream for experiment-level randomness (kept disjoint from the noise)
AUX_STREAM = 1

_MASK32 = 0xFFFFFFFF
_MAX_STEP = 1 << 32
_MAX_BLOCKS = 1 << 16


@numba.njit(cache=True, inline="always")
def _round_keys(c0, c1, c2, c3, k0, k1):
    m0 = np.uint64(0xD2511F53)
    m1 = np.uint64(0xCD9E8D57)
    w0 = np.uint64(0x9E3779B9)
    w1 = np.uint64(0xBB67AE85)
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    for _ in range(10):
        p0 = m0 * c0
        p1 = m1 * c2
        n0 = ((p1 >> s32) ^ c1 ^ k0) & mask
        n1 = p1 & mask
        n2 = ((p0 >> s32) ^ c3 ^ k1) & mask
        n3 = p0 & mask
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + w0) & mask
        k1 = (k1 + w1) & mask
    return c0, c1, c2, c3


@numba.njit(cache=True)
def _fill_uniforms(k0, k1, paths, step, stream, count, out):
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    s26 = np.uint64(26)
    s6 = np.uint64(6)
    scale = 2.0 ** -52
    n_blocks = (count + 1) // 2
    c0 = np.uint64(step) & mask
    for i in range(paths.shape[0]):
        pid = np.uint64(paths[i])
        c2 = pid & mask
        c3 = (pid >> s32) & mask
        for b in range(n_blocks):
            c1 = np.uint64(b) | (np.uint64(stream) << np.uint64(16))
            r0, r1, r2, r3 = _round_keys(c0, c1, c2, c3, k0, k1)
            j = 2 * b
            # 26 + 26 bits -> integer in [0, 2**52); (k + 0.5) / 2**52 lies in (0, 1)
            v = ((r0 >> s6) << s26) | (r1 >> s6)
            out[i, j] = (np.float64(v) + 0.5) * scale
            if j + 1 < count:
                v = ((r2 >> s6) << s26) | (r3 >> s6)
                out[i, j + 1] = (np.float64(v) + 0.5) * scale


def split_seed(seed: int) -> tuple[int, int]:
    """Return the two 32-bit key words of a (possibly negative) 64-bit seed."""
    s = int(seed) & 0xFFFFFFFFFFFFFFFF
    return s & _MASK32, (s >> 32) & _MASK32


def philox4x32(counter, key) -> tuple[int, int, int, int]:
    """Encrypt one 128-bit counter under a 64-bit key (four and two 32-bit words)."""
    c = [np.uint64(int(w) & _MASK32) for w in counter]
    k = [np.uint64(int(w) & _MASK32) for w in key]
    out = _round_keys(c[0], c[1], c[2], c[3], k[0], k[1])
    return tuple(int(w) for w in out)


def uniforms(seed: int, paths, step: int, count: int, stream: int = NOISE_STREAM) -> np.ndarray:
    """Uniform variates on the open interval (0, 1).

    Args:
        seed: 64-bit experiment seed.
        paths: non-negative path indices, shape ``(n,)``.
        step: time-step counter, ``0 <= step < 2**32``.
        count: number of variates per path.
        stream: sub-stream tag, ``0 <= stream < 2**16``.

    Returns:
        Array of shape ``(n, count)``.
    """
    if not 0 <= step < _MAX_STEP:
        raise ValueError(f"step counter out of range: {step}")
    if not 0 <= stream < (1 << 16):
        raise ValueError(f"stream tag out of range: {stream}")
    if count < 1 or (count + 1) // 2 > _MAX_BLOCKS:
        raise ValueError(f"invalid variate count: {count}")
    paths = np.ascontiguousarray(paths, dtype=np.int64)
    if paths.size and paths.min() < 0:
        raise ValueError("path indices must be non-negative")
    k0, k1 = split_seed(seed)
    out = np.empty((paths.shape[0], count), dtype=np.float64)
    _fill_uniforms(np.uint64(k0), np.uint64(k1), paths, np.int64(step), np.int64(stream), count, out)
    return out


def normals(seed: int, paths, step: int, count: int, stream: int = NOISE_STREAM) -> np.ndarray:
    """Standard normal variates by inverse-CDF of :func:`uniforms`."""
    return ndtri(uniforms(seed, paths, step, count, stream))
