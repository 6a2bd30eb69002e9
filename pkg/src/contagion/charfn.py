"""Joint characteristic function of (N_T, λ_T) from the affine Riccati system.

Writing φ(u, v; T) = E[exp(i u·N_T + i v·λ_T)] = exp(i A(T) + i B(T)·λ0),
the functions b = iB and a = iA solve

    b_l' = −α_l b_l + exp(i u_l + Σ_j d_jl b_j) − 1,   b(0) = i v
    a'   = Σ_l α_l λ∞_l b_l,                         a(0) = 0.

Integrating (a, b) instead of (A, B) keeps all factors of i out of the ODE.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import NumericalError
from .hawkes import HawkesParams
from .simulate import map_paths, _run_thinning
from . import rng

DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class CharFnResult:
    A: complex
    B: np.ndarray
    phi: complex
    T: float
    nfev: int
    tol: float


def _rhs(params: HawkesParams, u: np.ndarray):
    alpha = params.alpha
    drift = params.alpha * params.lambda_inf
    dT = params.d.T
    m = params.m

    def f(_, y):
        b = y[1:]
        out = np.empty(m + 1, dtype=complex)
        out[0] = drift @ b
        out[1:] = -alpha * b + np.expm1(1j * u + dT @ b)
        return out

    return f


def riccati_solve(params: HawkesParams, u, v, T: float, tol: float = DEFAULT_TOL) -> CharFnResult:
    """Integrate the Riccati system to horizon T with an adaptive RK45 scheme."""
    u = np.broadcast_to(np.asarray(u, dtype=float), (params.m,))
    v = np.broadcast_to(np.asarray(v, dtype=float), (params.m,))
    if T < 0:
        raise ValueError("T must be >= 0")
    y0 = np.concatenate([[0j], 1j * v])
    if T == 0:
        y = y0
        nfev = 0
    else:
        sol = solve_ivp(_rhs(params, u), (0.0, float(T)), y0, method="RK45", rtol=tol, atol=tol,
                        max_step=float(np.min(0.1 / params.alpha)))
        if sol.status != 0:
            t_fail = float(sol.t[-1]) if sol.t.size else 0.0
            raise NumericalError(f"Riccati integration failed at T={t_fail:.6g} of {T}: {sol.message}")
        y = sol.y[:, -1]
        nfev = int(sol.nfev)
    a, b = y[0], y[1:]
    phi = complex(np.exp(a + b @ params.lambda0))
    return CharFnResult(complex(-1j * a), -1j * b, phi, float(T), nfev, tol)


@dataclass(frozen=True)
class MCEstimate:
    phi: complex
    stderr_re: float
    stderr_im: float
    n_paths: int

    @property
    def stderr(self) -> float:
        """Modulus of the componentwise standard errors."""
        return float(np.hypot(self.stderr_re, self.stderr_im))


def terminal_samples(params: HawkesParams, T: float, n_paths: int, seed: int, workers: int = 1):
    """(N_T, λ_T) for ``n_paths`` independent paths started at λ0."""
    if T == 0:
        return np.zeros((n_paths, params.m), dtype=np.int64), np.tile(params.lambda0, (n_paths, 1))

    def one(factory, p):
        k, res = _run_thinning(params, params.lambda0, T, lambda: factory.generator(p, rng.THINNING))
        return np.bincount(res[4][:k], minlength=params.m), res[6].copy()

    out = map_paths(one, n_paths, seed, workers)
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def estimate_from_samples(counts, lam_T, u, v) -> MCEstimate:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = np.exp(1j * (counts @ np.broadcast_to(u, counts.shape[1:]) + lam_T @ np.broadcast_to(v, lam_T.shape[1:])))
    n = x.size
    se_re = float(np.std(x.real, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    se_im = float(np.std(x.imag, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return MCEstimate(complex(np.mean(x)), se_re, se_im, n)


def charfn_mc(params: HawkesParams, u, v, T: float, n_paths: int, seed: int, workers: int = 1) -> MCEstimate:
    """Monte Carlo estimate of E[exp(i u·N_T + i v·λ_T)]."""
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    if T == 0:
        v = np.broadcast_to(np.asarray(v, dtype=float), (params.m,))
        return MCEstimate(complex(np.exp(1j * (v @ params.lambda0))), 0.0, 0.0, n_paths)
    counts, lam_T = terminal_samples(params, T, n_paths, seed, workers)
    return estimate_from_samples(counts, lam_T, u, v)
