"""Deterministic coordinate-addressable multi-scale noise and the coordinate
arithmetic that supports it: margin coefficients, per-scale windows, scale
coordinates and shift schedules.

The noise value at scale-k coordinate (x, y, z), channel c, is a pure
function of (global_seed, x, y, z, c, k): any window over the infinite field
reads the same values regardless of its origin or extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var

# 64-bit avalanche finalizer constants (splitmix-style) and xorshift steps.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / float(1 << 53)


@dataclass(frozen=True)
class Region:
    """A box of the infinite texture: signed origin + positive sizes."""

    origin: tuple
    size: tuple

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.size) != 3:
            raise ValueError("Region needs 3 origin and 3 size components")
        if any(int(s) < 1 for s in self.size):
            raise ValueError(f"Region sizes must be >= 1, got {self.size}")
        object.__setattr__(self, "origin", tuple(int(v) for v in self.origin))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))


def margin_table(K):
    """Margin coefficients c_0..c_K (extra noise voxels per side per dim).

    c_0 = 4; c_k = ceil((c_{k-1} - 2) / 2) + 4 for 0 < k < K;
    c_K = ceil((c_{K-1} - 2) / 2) + 2.
    """
    if K < 1:
        raise ValueError("margin_table: K must be >= 1 (at least two scales)")
    c = [4]
    for k in range(1, K + 1):
        step = -((c[k - 1] - 2) // -2)  # ceil division
        c.append(step + (2 if k == K else 4))
    return c


@dataclass(frozen=True)
class ShiftSchedule:
    """Scale coordinates n_0..n_K and shifts s_1..s_K for one dimension.

    n_k = floor(n_0 / 2^k) and n_{k-1} = 2 n_k + s_k; the shifts depend on
    n_0 mod 2^K only.
    """

    n: tuple
    s: tuple


def shift_schedule(n0, K):
    """Compute the shift schedule for finest-scale coordinate ``n0``."""
    n = [int(n0)]
    s = []
    for _ in range(K):
        nk = n[-1] >> 1  # floor division, correct for negative coordinates
        s.append(n[-1] - 2 * nk)
        n.append(nk)
    return ShiftSchedule(n=tuple(n), s=tuple(s))


@dataclass(frozen=True)
class ScaleWindow:
    """Noise window at one scale: signed origin and extent per dimension."""

    scale: int
    origin: tuple
    extent: tuple
    coverage: tuple  # scale-k cells touched by the requested region


@dataclass(frozen=True)
class NoiseSpec:
    """Everything needed to sample the noise input for one region."""

    global_seed: int
    channels: int
    windows: tuple
    region: "Region"

    @property
    def total_per_channel(self):
        return sum(int(np.prod(w.extent)) for w in self.windows)

    @property
    def total(self):
        return self.channels * self.total_per_channel


def noise_extents(region, table, global_seed=0, channels=3):
    """Per-scale noise windows for ``region`` under margin ``table``.

    The coverage at scale k is the number of scale-k cells the region
    touches: floor((o + N - 1) / 2^k) - floor(o / 2^k) + 1 per dimension.
    For origins aligned to 2^k this equals ceil(N / 2^k); the extent is the
    coverage plus 2 c_k.
    """
    K = len(table) - 1
    windows = []
    for k in range(K + 1):
        origin = []
        extent = []
        coverage = []
        for d in range(3):
            o, n = region.origin[d], region.size[d]
            lo = o >> k
            hi = (o + n - 1) >> k
            cov = hi - lo + 1
            coverage.append(cov)
            origin.append(lo - table[k])
            extent.append(cov + 2 * table[k])
        windows.append(ScaleWindow(scale=k, origin=tuple(origin),
                                   extent=tuple(extent), coverage=tuple(coverage)))
    return NoiseSpec(global_seed=int(global_seed), channels=int(channels),
                     windows=tuple(windows), region=region)


# ---------------------------------------------------------------------------
# hashing


def _mix64(h):
    h = (h ^ (h >> np.uint64(30))) * _MIX1
    h = (h ^ (h >> np.uint64(27))) * _MIX2
    return h ^ (h >> np.uint64(31))


def _absorb(state, value):
    return _mix64((state + _GOLDEN) ^ value)


def _as_u64(values):
    return np.asarray(values, dtype=np.int64).astype(np.uint64)


def sample_noise(spec, k):
    """Sample the scale-``k`` window of ``spec`` as a (channels, e1, e2, e3)
    float32 tensor of uniform [0, 1) values."""
    w = spec.windows[k]
    if any(e < 1 for e in w.extent):
        raise ValueError(f"sample_noise: extents must be >= 1, got {w.extent}")
    with np.errstate(over="ignore"):
        s0 = _absorb(np.uint64(spec.global_seed & 0xFFFFFFFFFFFFFFFF),
                     _as_u64(k))
        xs = _as_u64(np.arange(w.origin[0], w.origin[0] + w.extent[0]))
        ys = _as_u64(np.arange(w.origin[1], w.origin[1] + w.extent[1]))
        zs = _as_u64(np.arange(w.origin[2], w.origin[2] + w.extent[2]))
        cs = _as_u64(np.arange(spec.channels))
        h = _absorb(s0, xs)[:, None, None]
        h = _absorb(h, ys[None, :, None])
        h = _absorb(h, zs[None, None, :])
        h = _absorb(h[None, ...], cs[:, None, None, None])
        h[h == np.uint64(0)] = _GOLDEN
        # three xorshift64 steps (13, 7, 17)
        h = h ^ (h << np.uint64(13))
        h = h ^ (h >> np.uint64(7))
        h = h ^ (h << np.uint64(17))
    u = (h >> np.uint64(11)).astype(np.float64) * _INV53
    return u.astype(np.float32)


def sample_noise_vars(spec):
    """All scale windows of ``spec`` wrapped as Vars, coarse to fine order
    left as index order z_0..z_K."""
    return [Var(sample_noise(spec, k), name=f"z{k}")
            for k in range(len(spec.windows))]
