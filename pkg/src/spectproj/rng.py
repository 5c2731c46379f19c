"""Counter-based random numbers and Poisson sampling.

Every sample is a pure function of ``(seed, bin index, draw index)``
through Philox4x32-10, so noise realizations do not depend on the order in
which bins are visited or on the number of threads.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_32 = np.uint64(32)

INVERSION_LIMIT = 10.0


def philox4x32(counter, key, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function.

    ``counter`` is ``(..., 4)`` and ``key`` is ``(..., 2)`` of 32-bit words
    (broadcast against each other); returns ``(..., 4)`` uint32 words.
    """
    c = np.asarray(counter, dtype=np.uint64)
    k = np.asarray(key, dtype=np.uint64)
    c0, c1, c2, c3 = (c[..., i] for i in range(4))
    k0, k1 = k[..., 0], k[..., 1]
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _32) ^ c1 ^ k0) & _MASK, p1 & _MASK, ((p0 >> _32) ^ c3 ^ k1) & _MASK, p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3), axis=-1).astype(np.uint32)


def _key(seed: int) -> np.ndarray:
    seed = int(seed)
    if seed < 0 or seed >= 1 << 64:
        raise ValueError("seed must be in [0, 2**64)")
    return np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)


def uniform_pair(seed: int, bins: np.ndarray, draw: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent uniforms in (0, 1) per bin for draw number ``draw``."""
    bins = np.asarray(bins, dtype=np.uint64)
    ctr = np.stack([bins & _MASK, bins >> _32,
                    np.full_like(bins, draw), np.zeros_like(bins)], axis=-1)
    w = philox4x32(ctr, _key(seed)).astype(np.uint64)
    # 53-bit mantissas, offset by half an ulp to stay off 0 and 1
    u = ((w[..., 0] >> np.uint64(5)) * np.uint64(1 << 26) + (w[..., 1] >> np.uint64(6))).astype(np.float64)
    v = ((w[..., 2] >> np.uint64(5)) * np.uint64(1 << 26) + (w[..., 3] >> np.uint64(6))).astype(np.float64)
    scale = 1.0 / 9007199254740992.0
    return (u + 0.5) * scale, (v + 0.5) * scale


def poisson(mean: np.ndarray, seed: int) -> np.ndarray:
    """Poisson draws, one per element, keyed by the flat element index.

    Means below 10 use sequential inversion of a single uniform; larger
    means use Hormann's transformed rejection with squeeze (PTRS).
    """
    lam = np.asarray(mean, dtype=np.float64)
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("Poisson means must be finite and nonnegative")
    flat = lam.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.int64)
    idx = np.arange(flat.size, dtype=np.uint64)

    small = np.flatnonzero((flat > 0) & (flat < INVERSION_LIMIT))
    if small.size:
        out[small] = _inversion(flat[small], uniform_pair(seed, idx[small], 0)[0])
    large = np.flatnonzero(flat >= INVERSION_LIMIT)
    if large.size:
        out[large] = _ptrs(flat[large], idx[large], seed)
    return out.reshape(lam.shape)


def _inversion(lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    k = np.zeros(lam.shape, dtype=np.int64)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    # lam < 10 makes k > 200 impossible at double precision
    for n in range(1, 200):
        if not active.any():
            break
        k[active] = n
        p = np.where(active, p * lam / n, p)
        cdf = np.where(active, cdf + p, cdf)
        active &= u > cdf
    return k


def _ptrs(lam: np.ndarray, bins: np.ndarray, seed: int) -> np.ndarray:
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2)
    out = np.zeros(lam.shape, dtype=np.int64)
    todo = np.arange(lam.size)
    draw = 1
    while todo.size:
        U, V = uniform_pair(seed, bins[todo], draw)
        U = U - 0.5
        us = 0.5 - np.abs(U)
        bb, aa, ll = b[todo], a[todo], lam[todo]
        k = np.floor((2 * aa / us + bb) * U + ll + 0.43)
        accept = (us >= 0.07) & (V <= vr[todo])
        reject = (k < 0) | ((us < 0.013) & (V > us))
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.log(V) + np.log(invalpha[todo]) - np.log(aa / (us * us) + bb)
            rhs = -ll + k * loglam[todo] - gammaln(k + 1)
        accept |= ~reject & (lhs <= rhs)
        out[todo[accept]] = k[accept].astype(np.int64)
        todo = todo[~accept]
        draw += 1
    return out
