"""Reproducible noise: Brownian increments and compound-Poisson jumps.

Every random number is a pure function of ``(seed, stream, step, purpose,
index)`` through the Philox4x32-10 counter-based generator, so results
never depend on evaluation order or on the number of worker threads.
Stream 0 is the common noise; particle ``i`` (0-based) uses stream ``i + 1``.
"""
from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np

if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

from .model import LevySpec, StateGrid

COMMON_STREAM = 0

PURPOSE_BROWNIAN = 0
PURPOSE_JUMP_COUNT = 1
PURPOSE_JUMP_MARK = 2
PURPOSE_INITIAL = 3
PURPOSE_BRIDGE = 4

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
_SH21 = np.uint64(21)
_SH11 = np.uint64(11)
_TWO53 = 2.0**-53


@numba.njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _SH32
        lo0 = p0 & _MASK
        hi1 = p1 >> _SH32
        lo1 = p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True)
def philox4x32(counter, key):
    """Philox4x32-10 block function on uint32 words held in uint64."""
    out = np.empty(4, dtype=np.uint64)
    a, b, c, d = _philox(counter[0] & _MASK, counter[1] & _MASK, counter[2] & _MASK,
                         counter[3] & _MASK, key[0] & _MASK, key[1] & _MASK)
    out[0] = a
    out[1] = b
    out[2] = c
    out[3] = d
    return out


@numba.njit(cache=True, inline="always")
def _uniform_pair(seed_lo, seed_hi, stream, step, purpose, index):
    a, b, c, d = _philox(stream & _MASK, step & _MASK, purpose & _MASK, index & _MASK, seed_lo, seed_hi)
    # 53-bit mantissas, offset by half an ulp so both values lie in (0, 1)
    u1 = (float((a << _SH21) | (b >> _SH11)) + 0.5) * _TWO53
    u2 = (float((c << _SH21) | (d >> _SH11)) + 0.5) * _TWO53
    return u1, u2


@numba.njit(cache=True, parallel=True)
def _uniforms(seed_lo, seed_hi, streams, step, purpose, indices, out):
    for i in numba.prange(streams.shape[0]):
        u1, _ = _uniform_pair(seed_lo, seed_hi, streams[i], step, purpose, indices[i])
        out[i] = u1


@numba.njit(cache=True, parallel=True)
def _normals(seed_lo, seed_hi, streams, step, purpose, indices, out):
    two_pi = 2.0 * math.pi
    for i in numba.prange(streams.shape[0]):
        u1, u2 = _uniform_pair(seed_lo, seed_hi, streams[i], step, purpose, indices[i])
        out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(two_pi * u2)


@numba.njit(cache=True)
def _normal_path(seed_lo, seed_hi, stream, n_steps, purpose, out):
    # same counters as _normals over steps 0..n_steps-1, index 0
    two_pi = 2.0 * math.pi
    for k in range(n_steps):
        u1, u2 = _uniform_pair(seed_lo, seed_hi, stream, np.uint64(k), purpose, np.uint64(0))
        out[k] = math.sqrt(-2.0 * math.log(u1)) * math.cos(two_pi * u2)


@numba.njit(cache=True, parallel=True)
def _poisson_counts(seed_lo, seed_hi, streams, step, mean, out):
    p0 = math.exp(-mean)
    for i in numba.prange(streams.shape[0]):
        u, _ = _uniform_pair(seed_lo, seed_hi, streams[i], step, np.uint64(PURPOSE_JUMP_COUNT), np.uint64(0))
        k = 0
        p = p0
        cdf = p0
        while u > cdf and k < 10000:
            k += 1
            p *= mean / k
            cdf += p
        out[i] = k


def _key(seed: int) -> tuple[np.uint64, np.uint64]:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def _as_streams(streams) -> np.ndarray:
    return np.ascontiguousarray(np.atleast_1d(np.asarray(streams)).astype(np.uint64, copy=False))


@functools.lru_cache(maxsize=8)
def particle_streams(n: int) -> np.ndarray:
    """Streams 1..n as a read-only uint64 array, cached per n."""
    out = np.arange(1, n + 1, dtype=np.uint64)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=8)
def _zero_indices(n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.uint64)
    out.setflags(write=False)
    return out


def configure_threads() -> int:
    """Apply QMFG_THREADS (capped at the available parallelism) to numba."""
    limit = numba.config.NUMBA_NUM_THREADS
    raw = os.environ.get("QMFG_THREADS")
    n = limit if not raw else max(1, min(int(raw), limit))
    numba.set_num_threads(n)
    return n


def uniforms(seed: int, streams, step: int, purpose: int, indices=None) -> np.ndarray:
    """Uniforms in (0, 1), one per stream (and optional per-stream index)."""
    st = _as_streams(streams)
    idx = _zero_indices(st.shape[0]) if indices is None else _as_streams(indices)
    out = np.empty(st.shape[0])
    lo, hi = _key(seed)
    _uniforms(lo, hi, st, np.uint64(step), np.uint64(purpose), idx, out)
    return out


def standard_normals(seed: int, streams, step: int, purpose: int = PURPOSE_BROWNIAN, indices=None) -> np.ndarray:
    """Box-Muller standard normals, one per stream."""
    st = _as_streams(streams)
    idx = _zero_indices(st.shape[0]) if indices is None else _as_streams(indices)
    out = np.empty(st.shape[0])
    lo, hi = _key(seed)
    _normals(lo, hi, st, np.uint64(step), np.uint64(purpose), idx, out)
    return out


def brownian_increments(seed: int, streams, step: int, dt: float) -> np.ndarray:
    return math.sqrt(dt) * standard_normals(seed, streams, step)


def poisson_counts(seed: int, streams, step: int, mean: float) -> np.ndarray:
    if mean < 0:
        raise ValueError("Poisson mean must be >= 0")
    if mean > 700:
        raise ValueError("Poisson mean per step above 700; reduce dt")
    st = _as_streams(streams)
    out = np.zeros(st.shape[0], dtype=np.int64)
    if mean > 0:
        lo, hi = _key(seed)
        _poisson_counts(lo, hi, st, np.uint64(step), float(mean), out)
    return out


@dataclass(frozen=True)
class NoisePlan:
    seed: int
    stream_id: int = COMMON_STREAM
    dt: float = 1e-2


def brownian_increment(plan: NoisePlan, step: int) -> float:
    """Increment of the Brownian motion of ``plan.stream_id`` over step ``step``."""
    if plan.dt < 0:
        raise ValueError("dt must be >= 0")
    if plan.dt == 0:
        return 0.0
    return float(brownian_increments(plan.seed, [plan.stream_id], step, plan.dt)[0])


def brownian_path(plan: NoisePlan, n_steps: int) -> np.ndarray:
    """B(t_k) for k = 0..n_steps, B(0) = 0."""
    if plan.dt < 0:
        raise ValueError("dt must be >= 0")
    out = np.zeros(n_steps)
    if plan.dt > 0 and n_steps > 0:
        lo, hi = _key(plan.seed)
        _normal_path(lo, hi, np.uint64(plan.stream_id), n_steps, np.uint64(PURPOSE_BROWNIAN), out)
        out *= math.sqrt(plan.dt)
    return np.concatenate([[0.0], np.cumsum(out)])


def replication_seed(seed: int, r: int) -> int:
    """Seed of replication ``r``; replication 0 keeps the base seed."""
    return (int(seed) + int(r) * 0x9E3779B97F4A7C15) % (1 << 64)


def bridge_increments(plan: NoisePlan, step: int, n_sub: int) -> np.ndarray:
    """Split one increment of ``plan`` into ``n_sub`` conditionally exact pieces.

    Brownian-bridge refinement: the pieces sum to ``brownian_increment(plan,
    step)`` and have the law of Brownian increments over ``dt / n_sub``.
    """
    total = brownian_increment(plan, step)
    if n_sub == 1:
        return np.array([total])
    z = standard_normals(plan.seed, np.full(n_sub, plan.stream_id), step, PURPOSE_BRIDGE, np.arange(n_sub))
    w = math.sqrt(plan.dt / n_sub) * z
    return w - (w.sum() - total) / n_sub


@dataclass(frozen=True)
class JumpBatch:
    marks: np.ndarray
    compensator: float

    @property
    def increment(self) -> float:
        """Compensated jump increment for gamma(theta) = theta."""
        return float(np.sum(self.marks)) - self.compensator


def jump_marks(seed: int, owners_streams: np.ndarray, step: int, levy: LevySpec) -> np.ndarray:
    """Marks for a flattened list of (stream, j-th jump of that stream in the step)."""
    owners_streams = np.asarray(owners_streams, dtype=np.int64)
    if owners_streams.size == 0:
        return np.empty(0)
    # position of each entry among the jumps of its own stream
    order = np.argsort(owners_streams, kind="stable")
    sorted_owners = owners_streams[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_owners)) + 1]
    run = np.arange(sorted_owners.size) - np.repeat(starts, np.diff(np.r_[starts, sorted_owners.size]))
    idx = np.empty_like(run)
    idx[order] = run
    u = uniforms(seed, owners_streams, step, PURPOSE_JUMP_MARK, idx)
    theta = np.asarray(levy.mark_sampler(u), dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("mark sampler returned non-finite marks")
    return theta


def sample_jumps(plan: NoisePlan, levy: LevySpec, step: int, gamma: Callable | None = None) -> JumpBatch:
    """Jumps of stream ``plan.stream_id`` landing in (t_step, t_step + dt].

    The compensator is ``dt * intensity * E[gamma(theta)]`` by 256-node
    quadrature; ``gamma`` defaults to the identity.
    """
    if levy.intensity < 0:
        raise ValueError("jump intensity must be >= 0")
    if levy.intensity == 0 or plan.dt == 0:
        return JumpBatch(np.empty(0), 0.0)
    k = int(poisson_counts(plan.seed, [plan.stream_id], step, levy.intensity * plan.dt)[0])
    marks = jump_marks(plan.seed, np.full(k, plan.stream_id), step, levy)
    g = gamma if gamma is not None else (lambda th: th)
    return JumpBatch(marks, plan.dt * levy.integrate(g))


# ---------------------------------------------------------------------------
# compound Poisson law


@dataclass(frozen=True)
class CompoundPoissonDensity:
    """Law of sum_{k <= N(t)} theta_k: an atom at 0 plus a density."""

    x: np.ndarray
    density: np.ndarray
    atom: float
    n_terms: int

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.x)) + self.atom


def poisson_truncation(mean: float, tail: float = 1e-10) -> int:
    """Smallest K with P(Poisson(mean) > K) < tail."""
    if mean == 0:
        return 0
    p = math.exp(-mean)
    cdf = p
    k = 0
    while 1.0 - cdf >= tail:
        k += 1
        p *= mean / k
        cdf += p
        if k > 100000:
            break
    return k


def lattice_mark_weights(levy: LevySpec, h: float) -> tuple[np.ndarray, int]:
    """Cell masses of the mark law on the lattice k*h; returns (weights, offset)."""
    lo, hi = levy.marks.support
    k_lo = int(math.floor(lo / h - 0.5))
    k_hi = int(math.ceil(hi / h + 0.5))
    k = np.arange(k_lo, k_hi + 1)
    edges = np.concatenate([(k - 0.5) * h, [(k_hi + 0.5) * h]])
    w = np.diff(levy.marks.cdf(edges))
    return np.asarray(w, dtype=float), -k_lo


def compound_poisson_lattice(levy: LevySpec, t: float, h: float, half_width: float):
    """Lattice masses of the continuous (k >= 1) part on k*h, |k*h| <= half_width.

    Returns (z, masses, atom, K).  Convolution powers are accumulated in
    Fourier space on a zero-padded lattice so no mass wraps around.
    """
    lam_t = levy.intensity * t
    atom = math.exp(-lam_t)
    m = int(math.ceil(half_width / h))
    z = np.arange(-m, m + 1) * h
    if lam_t == 0:
        return z, np.zeros_like(z), 1.0, 0
    if not levy.marks.discrete and levy.marks.std() < 2.0 * h:
        raise ValueError("grid too coarse to resolve the mark law")
    w, off = lattice_mark_weights(levy, h)
    captured = float(w.sum())
    if captured < 0.999:
        raise ValueError(f"grid too coarse: mark mass on the lattice is {captured:.6f}")
    w = w / captured
    K = poisson_truncation(lam_t)
    lo_t, hi_t = levy.marks.support
    reach = K * max(abs(lo_t), abs(hi_t)) + half_width + 2 * h
    size = 1 << int(math.ceil(math.log2(2 * int(math.ceil(reach / h)) + w.size + 2)))
    center = size // 2
    base = np.zeros(size)
    base[:w.size] = w
    # shift so that the lattice origin sits at index 0 (circular)
    base = np.roll(base, -off)
    W = np.fft.rfft(base)
    acc = np.zeros_like(W)
    power = np.ones_like(W)
    p = atom
    for k in range(1, K + 1):
        p *= lam_t / k
        power = power * W
        acc += p * power
    cont = np.fft.irfft(acc, n=size)
    cont = np.roll(cont, center)
    masses = cont[center - m:center + m + 1]
    return z, np.clip(masses, 0.0, None), atom, K


def compound_poisson_density(levy: LevySpec, t: float, grid) -> CompoundPoissonDensity:
    """Density of the compound Poisson variable at time ``t`` on ``grid``.

    ``grid`` is a :class:`StateGrid` or a uniform 1-d array.  The atom
    ``exp(-intensity * t)`` at 0 is reported separately.
    """
    x = grid.x if isinstance(grid, StateGrid) else np.asarray(grid, dtype=float)
    if x.size < 2:
        raise ValueError("grid needs at least two points")
    h = float(x[1] - x[0])
    if not math.isfinite(levy.intensity * t):
        raise ValueError("intensity * t must be finite")
    half = max(abs(x[0]), abs(x[-1])) + h
    z, masses, atom, K = compound_poisson_lattice(levy, t, h, half)
    dens = np.interp(x, z, masses / h, left=0.0, right=0.0)
    return CompoundPoissonDensity(x, dens, atom, K)
