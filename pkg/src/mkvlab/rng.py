"""Counter-based random streams.

Every random number used by the simulator is a pure function of
``(seed, role, scenario, particle, draw index)``.  The generator is
Philox4x32-10, evaluated vectorised over whole blocks of counters, so a
particle's noise never depends on how many other particles exist, on the
order in which blocks are produced, or on the number of worker threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


class Role(IntEnum):
    COMMON = 0
    IDIO = 1
    INIT = 2
    AUX = 3
    RESTART = 4


def philox4x32(counters, key, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function.

    ``counters`` is an integer array of shape (..., 4) holding 32-bit words and
    ``key`` a pair of 32-bit words.  Returns uint32 words of the same shape.
    """
    c = np.asarray(counters, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (c[..., i] for i in range(4))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = (hi1 ^ c1 ^ np.uint64(k0), lo1,
                          hi0 ^ c3 ^ np.uint64(k1), lo0)
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def _seed_key(seed: int) -> tuple[int, int]:
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF


def _words(seed, role, scenarios, particles, blocks) -> np.ndarray:
    # scenarios/particles: (S,) arrays describing the streams; blocks: (B,)
    s = np.asarray(scenarios, dtype=np.uint64)[:, None]
    p = np.asarray(particles, dtype=np.uint64)[:, None]
    b = np.asarray(blocks, dtype=np.uint64)[None, :]
    ctr = np.empty((s.shape[0], b.shape[1], 4), dtype=np.uint64)
    ctr[..., 0] = b
    ctr[..., 1] = p
    ctr[..., 2] = s
    ctr[..., 3] = int(role)
    return philox4x32(ctr, _seed_key(seed))


def _to_unit(hi, lo) -> np.ndarray:
    # 53-bit double in [0, 1)
    a = (hi >> np.uint32(5)).astype(np.float64)
    b = (lo >> np.uint32(6)).astype(np.float64)
    return (a * 67108864.0 + b) / 9007199254740992.0


def uniform_streams(seed: int, role: Role, scenarios, particles, count: int) -> np.ndarray:
    """``count`` uniforms on [0, 1) per stream; shape (streams, count)."""
    nblocks = (count + 1) // 2
    w = _words(seed, role, scenarios, particles, np.arange(nblocks))
    u = np.empty((w.shape[0], 2 * nblocks))
    u[:, 0::2] = _to_unit(w[..., 0], w[..., 1])
    u[:, 1::2] = _to_unit(w[..., 2], w[..., 3])
    return u[:, :count]


def normal_streams(seed: int, role: Role, scenarios, particles, count: int) -> np.ndarray:
    """``count`` standard normals per stream (Box-Muller); shape (streams, count)."""
    nblocks = (count + 1) // 2
    w = _words(seed, role, scenarios, particles, np.arange(nblocks))
    u1 = 1.0 - _to_unit(w[..., 0], w[..., 1])  # (0, 1]
    u2 = _to_unit(w[..., 2], w[..., 3])
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty((w.shape[0], 2 * nblocks))
    z[:, 0::2] = rad * np.cos(ang)
    z[:, 1::2] = rad * np.sin(ang)
    return z[:, :count]


def _chunked(fn, nstreams: int, threads: int, chunk: int = 4096):
    starts = list(range(0, nstreams, chunk))
    if threads <= 1 or len(starts) == 1:
        return [fn(s, min(s + chunk, nstreams)) for s in starts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: fn(s, min(s + chunk, nstreams)), starts))


def particle_normals(seed: int, role: Role, scenarios, particles, count: int,
                     threads: int = 1) -> np.ndarray:
    """Normals for many (scenario, particle) streams, chunked over threads.

    Output is identical for any ``threads`` value.
    """
    scenarios = np.asarray(scenarios)
    particles = np.asarray(particles)
    parts = _chunked(lambda a, b: normal_streams(seed, role, scenarios[a:b], particles[a:b], count),
                     scenarios.shape[0], threads)
    return np.concatenate(parts, axis=0) if parts else np.empty((0, count))


def particle_uniforms(seed: int, role: Role, scenarios, particles, count: int,
                      threads: int = 1) -> np.ndarray:
    scenarios = np.asarray(scenarios)
    particles = np.asarray(particles)
    parts = _chunked(lambda a, b: uniform_streams(seed, role, scenarios[a:b], particles[a:b], count),
                     scenarios.shape[0], threads)
    return np.concatenate(parts, axis=0) if parts else np.empty((0, count))


def stream_indices(M: int, N: int, pooled: bool) -> tuple[np.ndarray, np.ndarray]:
    """(scenario, particle) stream labels for an M x N layout, flattened row-major.

    When ``pooled`` (no common noise) all particles belong to one population and
    are labelled (0, global index), so an M x N run and a 1 x MN run draw the
    same numbers particle for particle.
    """
    g = np.arange(M * N)
    if pooled:
        return np.zeros_like(g), g
    return g // N, g % N


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed from a parent seed and integer tags."""
    ss = np.random.SeedSequence([seed, *[int(t) for t in tags]])
    lo, hi = ss.generate_state(2, np.uint32)
    return (int(hi) << 32 | int(lo)) & ((1 << 63) - 1)
