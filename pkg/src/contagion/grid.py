"""Rectangular grids over intensity space and multilinear interpolation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .hawkes import HawkesParams, stationary_mean
from .simulate import simulate_hawkes

DEFAULT_POINTS = 17
MAX_DIM = 3


@dataclass(frozen=True, eq=False)
class IntensityGrid:
    """Tensor grid with uniformly spaced axes (one per jump class)."""

    lo: np.ndarray
    hi: np.ndarray
    counts: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if not (lo.size == hi.size == len(counts)):
            raise ValueError("lo, hi and counts must have one entry per axis")
        if lo.size > MAX_DIM:
            raise ValueError(f"gridded solvers support at most {MAX_DIM} classes")
        if any(c < 3 for c in counts):
            raise ValueError("need at least 3 points per axis")
        if np.any(lo < 0) or np.any(hi <= lo):
            raise ValueError("axis bounds must satisfy 0 <= lo < hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @property
    def m(self) -> int:
        return self.lo.size

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, c) for a, b, c in zip(self.lo, self.hi, self.counts)]

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.counts) - 1)

    @property
    def strides(self) -> np.ndarray:
        out = np.ones(self.m, dtype=np.int64)
        for l in range(self.m - 2, -1, -1):
            out[l] = out[l + 1] * self.counts[l + 1]
        return out

    def points(self) -> np.ndarray:
        """All nodes, C order, shape (size, m)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=-1)

    def contains(self, lam: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        span = self.hi - self.lo
        return np.all((lam >= self.lo - tol * span) & (lam <= self.hi + tol * span), axis=-1)

    def interpolate(self, values: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Multilinear interpolation of node ``values`` at ``lam`` (..., m).

        Points outside the box are clamped to it; the second return value
        flags them.
        """
        lam = np.asarray(lam, dtype=float)
        flat = lam.reshape(-1, self.m)
        idx, w = corner_weights(flat, self.lo, self.spacing, np.array(self.counts), self.strides)
        vals = np.asarray(values, dtype=float).reshape(-1)
        out = np.sum(vals[idx] * w, axis=1)
        return out.reshape(lam.shape[:-1]), ~self.contains(lam)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "counts": list(self.counts)}


@njit(cache=True)
def _corners(lam, lo, h, counts, strides, idx, w):
    m = lo.size
    n_c = 1 << m
    for r in range(lam.shape[0]):
        base = 0
        fr = np.empty(m)
        for l in range(m):
            x = (lam[r, l] - lo[l]) / h[l]
            x = min(max(x, 0.0), counts[l] - 1.0)
            i = min(int(math.floor(x)), counts[l] - 2)
            fr[l] = x - i
            base += i * strides[l]
        for c in range(n_c):
            wt = 1.0
            off = 0
            for l in range(m):
                if (c >> l) & 1:
                    wt *= fr[l]
                    off += strides[l]
                else:
                    wt *= 1.0 - fr[l]
            idx[r, c] = base + off
            w[r, c] = wt


def corner_weights(lam, lo, h, counts, strides):
    """Flat node indices and multilinear weights of the 2^m cell corners."""
    lam = np.ascontiguousarray(lam, dtype=float)
    n_c = 1 << lo.size
    idx = np.empty((lam.shape[0], n_c), dtype=np.int64)
    w = np.empty((lam.shape[0], n_c))
    _corners(lam, lo, h, np.asarray(counts, dtype=np.int64), strides, idx, w)
    return idx, w


def default_box(params: HawkesParams, n_points: int = DEFAULT_POINTS, seed: int = 0,
                horizon: float | None = None, reach: int = 3) -> IntensityGrid:
    """Box [max(0, λ̄ − 4σ), λ̄ + 8σ] per axis, σ from one long simulated path.

    The box is widened if needed so that it contains λ∞ and λ∞ + ``reach``
    times the largest excitation in each axis.
    """
    mean = stationary_mean(params)
    if horizon is None:
        horizon = 2000.0 / float(np.min(params.alpha))
    path = simulate_hawkes(params.with_start(mean), None, horizon, seed)
    avg = path.compensator / horizon
    var = np.maximum(path.lam_sq_integral / horizon - avg ** 2, 0.0)
    sd = np.sqrt(var)
    sd = np.where(sd > 0, sd, 0.1 * np.maximum(mean, 1e-3))
    lo = np.maximum(0.0, mean - 4 * sd)
    hi = mean + 8 * sd
    top = params.lambda_inf + reach * params.d.max(axis=1)
    lo = np.minimum(lo, params.lambda_inf)
    hi = np.maximum(hi, top)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return IntensityGrid(lo, hi, (n_points,) * params.m)
