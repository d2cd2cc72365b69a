"""Hot numeric loops: SimHash fingerprinting, Hamming scans, Bloom probes.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. The numpy path is selected when numba is unavailable or when the
environment variable ``DATAFACTORY_NO_NUMBA`` is set to ``1``/``true``.
Both paths compute bit-identical results (asserted in tests); see
``benchmarks/bench_kernels.py`` for a speed comparison.
"""

from __future__ import annotations

import os

import numpy as np

# FNV-1a 64-bit parameters plus a splitmix-style avalanche finalizer.
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

NUMBA_ENABLED = os.environ.get("DATAFACTORY_NO_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)
if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# numpy implementations (always available)
# ---------------------------------------------------------------------------

def _finalize_np(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(30))
    h = h * _MIX1
    h = h ^ (h >> np.uint64(27))
    h = h * _MIX2
    h = h ^ (h >> np.uint64(31))
    return h


def shingle_hashes_np(codepoints: np.ndarray, width: int) -> np.ndarray:
    """64-bit hash of every length-``width`` window of a codepoint array."""
    cps = codepoints.astype(np.uint64, copy=False)
    n = cps.shape[0] - width + 1
    h = np.full(n, _FNV_OFFSET, dtype=np.uint64)
    for j in range(width):
        h = (h ^ cps[j : j + n]) * _FNV_PRIME
    return _finalize_np(h)


def simhash_np(codepoints: np.ndarray, width: int) -> int:
    """Sign-aggregate window hashes into a 64-bit fingerprint.

    Each window occurrence votes +1/-1 per bit, so a repeated shingle
    contributes with weight equal to its frequency.
    """
    hashes = shingle_hashes_np(codepoints, width)
    bits = (hashes[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    acc = (2 * bits.astype(np.int64) - 1).sum(axis=0)
    fp = np.uint64(0)
    one = np.uint64(1)
    for b in range(64):
        if acc[b] > 0:
            fp |= one << np.uint64(b)
    return int(fp)


def hamming_many_np(fp: int, fps: np.ndarray) -> np.ndarray:
    """Hamming distance from one fingerprint to an array of fingerprints."""
    return np.bitwise_count(fps ^ np.uint64(fp)).astype(np.int64)


def bloom_set_np(bits: np.ndarray, h1: np.ndarray, h2: np.ndarray, k: int, m: int) -> None:
    """Set the k double-hashed bit positions for each (h1, h2) key pair."""
    js = np.arange(k, dtype=np.uint64)
    pos = (h1[:, None] + js * h2[:, None]) % np.uint64(m)
    byte = (pos >> np.uint64(3)).ravel()
    mask = (np.uint64(1) << (pos & np.uint64(7))).astype(np.uint8).ravel()
    np.bitwise_or.at(bits, byte, mask)


def bloom_check_np(bits: np.ndarray, h1: np.ndarray, h2: np.ndarray, k: int, m: int) -> np.ndarray:
    """Per-key flag: 1 when all k probed bits are set, else 0."""
    js = np.arange(k, dtype=np.uint64)
    pos = (h1[:, None] + js * h2[:, None]) % np.uint64(m)
    byte = pos >> np.uint64(3)
    mask = (np.uint64(1) << (pos & np.uint64(7))).astype(np.uint8)
    hit = (bits[byte] & mask) != 0
    return hit.all(axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True)
    def _simhash_jit(codepoints, width):  # pragma: no cover - exercised via tests
        n = codepoints.shape[0] - width + 1
        acc = np.zeros(64, dtype=np.int64)
        for i in range(n):
            h = _FNV_OFFSET
            for j in range(width):
                h = (h ^ np.uint64(codepoints[i + j])) * _FNV_PRIME
            h = h ^ (h >> np.uint64(30))
            h = h * _MIX1
            h = h ^ (h >> np.uint64(27))
            h = h * _MIX2
            h = h ^ (h >> np.uint64(31))
            for b in range(64):
                if (h >> np.uint64(b)) & np.uint64(1):
                    acc[b] += 1
                else:
                    acc[b] -= 1
        fp = np.uint64(0)
        for b in range(64):
            if acc[b] > 0:
                fp |= np.uint64(1) << np.uint64(b)
        return fp

    @njit(cache=True)
    def _hamming_many_jit(fp, fps):  # pragma: no cover
        out = np.empty(fps.shape[0], dtype=np.int64)
        for i in range(fps.shape[0]):
            x = fp ^ fps[i]
            c = 0
            while x:
                x &= x - np.uint64(1)
                c += 1
            out[i] = c
        return out

    @njit(cache=True)
    def _bloom_set_jit(bits, h1, h2, k, m):  # pragma: no cover
        for i in range(h1.shape[0]):
            a = h1[i]
            b = h2[i]
            for j in range(k):
                pos = (a + np.uint64(j) * b) % np.uint64(m)
                bits[pos >> np.uint64(3)] |= np.uint8(np.uint64(1) << (pos & np.uint64(7)))

    @njit(cache=True)
    def _bloom_check_jit(bits, h1, h2, k, m):  # pragma: no cover
        out = np.ones(h1.shape[0], dtype=np.uint8)
        for i in range(h1.shape[0]):
            a = h1[i]
            b = h2[i]
            for j in range(k):
                pos = (a + np.uint64(j) * b) % np.uint64(m)
                if not bits[pos >> np.uint64(3)] & np.uint8(np.uint64(1) << (pos & np.uint64(7))):
                    out[i] = 0
                    break
        return out

    def simhash_jit(codepoints: np.ndarray, width: int) -> int:
        return int(_simhash_jit(codepoints.astype(np.uint64, copy=False), width))

    def hamming_many_jit(fp: int, fps: np.ndarray) -> np.ndarray:
        return _hamming_many_jit(np.uint64(fp), fps)

    bloom_set_jit = _bloom_set_jit
    bloom_check_jit = _bloom_check_jit

    simhash = simhash_jit
    hamming_many = hamming_many_jit
    bloom_set = bloom_set_jit
    bloom_check = bloom_check_jit
else:
    simhash = simhash_np
    hamming_many = hamming_many_np
    bloom_set = bloom_set_np
    bloom_check = bloom_check_np
