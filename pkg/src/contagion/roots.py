"""Vectorized polynomial roots and a bracketed Newton solver."""
from __future__ import annotations

from typing import Callable

import numpy as np

_OMEGA = np.exp(2j * np.pi / 3)


def quadratic_roots(a, b, c) -> np.ndarray:
    """Both roots of a x² + b x + c, computed without cancellation.

    Returns a complex (N, 2) array.  Rows with a == 0 get the linear root
    twice (and NaN when b == 0 as well).
    """
    a, b, c = (np.atleast_1d(np.asarray(v, dtype=complex)) for v in np.broadcast_arrays(a, b, c))
    disc = np.sqrt(b * b - 4 * a * c)
    sgn = np.where((b.conj() * disc).real >= 0, 1.0, -1.0)
    q = -0.5 * (b + sgn * disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = q / a
        r2 = c / q
        lin = -c / b
    r1 = np.where(a == 0, lin, r1)
    r2 = np.where(a == 0, lin, np.where(q == 0, r1, r2))
    return np.stack([r1, r2], axis=-1)


def cubic_roots(c3, c2, c1, c0, polish: bool = True) -> np.ndarray:
    """All roots of c3 x³ + c2 x² + c1 x + c0 by Cardano's formula.

    Complex (N, 3) array.  Rows whose leading coefficient vanishes fall back
    to the quadratic formula, padding with NaN.  With ``polish`` each root
    receives one Newton step on the original polynomial.
    """
    c3, c2, c1, c0 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in np.broadcast_arrays(c3, c2, c1, c0))
    scale = np.maximum.reduce([np.abs(c3), np.abs(c2), np.abs(c1), np.abs(c0)])
    cubic = np.abs(c3) > 1e-14 * np.where(scale > 0, scale, 1.0)
    out = np.full(c3.shape + (3,), np.nan + 0j)

    if np.any(cubic):
        a = c2[cubic] / c3[cubic]
        b = c1[cubic] / c3[cubic]
        c = c0[cubic] / c3[cubic]
        shift = a / 3
        p = b - a * a / 3
        q = 2 * a ** 3 / 27 - a * b / 3 + c
        s = np.sqrt(np.asarray(q * q / 4 + p ** 3 / 27, dtype=complex))
        w = -q / 2 + np.where(q <= 0, s, -s)  # larger modulus branch
        u = np.where(w == 0, 0j, w ** (1 / 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(u == 0, 0j, -p / (3 * u))
        roots = np.stack([u + v, u * _OMEGA + v * _OMEGA.conjugate(), u * _OMEGA.conjugate() + v * _OMEGA], axis=-1)
        out[cubic] = roots - shift[:, None]
    if np.any(~cubic):
        out[~cubic, :2] = quadratic_roots(c2[~cubic], c1[~cubic], c0[~cubic])

    if polish:
        coeffs = [v[:, None] for v in (c3, c2, c1, c0)]
        f = ((coeffs[0] * out + coeffs[1]) * out + coeffs[2]) * out + coeffs[3]
        df = (3 * coeffs[0] * out + 2 * coeffs[1]) * out + coeffs[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(df != 0, f / df, 0)
        stepped = out - step
        f_new = ((coeffs[0] * stepped + coeffs[1]) * stepped + coeffs[2]) * stepped + coeffs[3]
        ok = np.isfinite(stepped) & (np.abs(f_new) <= np.abs(f))
        out = np.where(ok, stepped, out)
    return out


def bracketed_newton(
    f: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    lo: np.ndarray,
    hi: np.ndarray,
    x0: np.ndarray | None = None,
    ftol: np.ndarray | float = 1e-13,
    maxiter: int = 200,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Root of increasing functions f on [lo, hi], elementwise.

    ``f(x)`` returns (value, derivative).  Requires f(lo) < 0 < f(hi).  A
    Newton step that leaves the current bracket is replaced by bisection.
    Returns (x, f(x), converged).
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    x = 0.5 * (lo + hi) if x0 is None else np.clip(np.array(x0, dtype=float), lo, hi)
    ftol = np.broadcast_to(np.asarray(ftol, dtype=float), x.shape)
    fx, dfx = f(x)
    done = np.abs(fx) <= ftol
    for _ in range(maxiter):
        if np.all(done):
            break
        neg = fx < 0
        lo = np.where(neg & ~done, x, lo)
        hi = np.where(~neg & ~done, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - fx / dfx
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        x_new = np.where(inside, newton, 0.5 * (lo + hi))
        x_new = np.where(done, x, x_new)
        stalled = (x_new == x) | (hi - lo <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))))
        x = x_new
        fx, dfx = f(x)
        done = done | (np.abs(fx) <= ftol) | stalled
    return x, fx, np.abs(fx) <= ftol
