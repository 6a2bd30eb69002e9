"""Mutually exciting intensity system: parameters, stationarity, moments, generator.

The intensities follow

    dλ_l = α_l (λ_{l,∞} − λ_l) dt + Σ_j d_{lj} dN_j

so an event of class j raises every λ_l by d_{lj} and each λ_l relaxes
exponentially toward λ_{l,∞} at speed α_l in between.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class StationarityReport:
    gamma_matrix: np.ndarray
    spectral_radius_of_alpha_inv_d: float
    gamma_nonsingular: bool
    is_stationary: bool


@dataclass(frozen=True, eq=False)
class HawkesParams:
    """Excitation system for ``m`` jump classes.

    ``d[l, j]`` is the jump in λ_l caused by one event of class j.  Construction
    rejects non-stationary systems unless ``allow_nonstationary`` is set (the
    simulator itself does not need stationarity).
    """

    alpha: np.ndarray
    lambda_inf: np.ndarray
    lambda0: np.ndarray
    d: np.ndarray
    allow_nonstationary: bool = field(default=False, repr=False)

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)).copy()
        m = alpha.size
        lam_inf = np.atleast_1d(np.asarray(self.lambda_inf, dtype=float)).copy()
        lam0 = np.atleast_1d(np.asarray(self.lambda0, dtype=float)).copy()
        d = np.asarray(self.d, dtype=float).reshape(m, m) if np.size(self.d) == m * m else None
        if d is None:
            raise ConfigError("d", f"expected an {m}x{m} matrix")
        d = d.copy()
        for name, arr in (("lambda_inf", lam_inf), ("lambda0", lam0)):
            if arr.size != m:
                raise ConfigError(name, f"expected length {m}, got {arr.size}")
        for name, arr, strict in (("alpha", alpha, True), ("lambda_inf", lam_inf, False),
                                  ("lambda0", lam0, True)):
            for i, v in enumerate(arr):
                if not np.isfinite(v) or (v <= 0 if strict else v < 0):
                    raise ConfigError(f"{name}[{i}]", f"must be {'> 0' if strict else '>= 0'}, got {v}")
        bad = np.argwhere(~np.isfinite(d) | (d < 0))
        if bad.size:
            i, j = bad[0]
            raise ConfigError(f"d[{i}][{j}]", f"must be >= 0, got {d[i, j]}")
        for arr in (alpha, lam_inf, lam0, d):
            arr.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "lambda_inf", lam_inf)
        object.__setattr__(self, "lambda0", lam0)
        object.__setattr__(self, "d", d)
        if not self.allow_nonstationary:
            rep = check_stationarity(self)
            if not rep.is_stationary:
                raise ConfigError(
                    "d", f"non-stationary excitation: spectral radius of d/alpha is "
                         f"{rep.spectral_radius_of_alpha_inv_d:.6g} (must be < 1)")

    @property
    def m(self) -> int:
        return self.alpha.size

    @property
    def gamma(self) -> np.ndarray:
        return np.diag(self.alpha) - self.d

    def with_start(self, lambda0) -> "HawkesParams":
        return replace(self, lambda0=np.asarray(lambda0, dtype=float))

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "alpha": self.alpha.tolist(),
            "lambda_inf": self.lambda_inf.tolist(),
            "lambda0": self.lambda0.tolist(),
            "d": self.d.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, allow_nonstationary: bool = False) -> "HawkesParams":
        try:
            m = int(data["m"])
            d = np.asarray(data["d"], dtype=float)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0]), "missing field") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError("d", f"not a numeric matrix ({exc})") from None
        if m < 1:
            raise ConfigError("m", "must be a positive integer")
        if d.shape != (m, m):
            raise ConfigError("d", f"expected {m} rows of {m} entries, got shape {d.shape}")
        for key in ("alpha", "lambda_inf", "lambda0"):
            if key not in data:
                raise ConfigError(key, "missing field")
            if len(data[key]) != m:
                raise ConfigError(key, f"expected length {m}, got {len(data[key])}")
        return cls(data["alpha"], data["lambda_inf"], data["lambda0"], d,
                   allow_nonstationary=allow_nonstationary)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, allow_nonstationary: bool = False) -> "HawkesParams":
        return cls.from_dict(json.loads(text), allow_nonstationary=allow_nonstationary)


@dataclass(frozen=True, eq=False)
class IntensityState:
    t: float
    lam: np.ndarray
    n_counts: np.ndarray

    @classmethod
    def initial(cls, params: HawkesParams) -> "IntensityState":
        return cls(0.0, params.lambda0.copy(), np.zeros(params.m, dtype=np.int64))


def check_stationarity(params: HawkesParams) -> StationarityReport:
    """Spectral test ρ(diag(α)^{-1} d) < 1 plus nonsingularity of Γ = diag(α) − d."""
    scaled = params.d / params.alpha[:, None]
    rho = float(np.max(np.abs(np.linalg.eigvals(scaled)))) if params.m else 0.0
    gamma = np.diag(params.alpha) - params.d
    # Γ = diag(α)(I − scaled), so it is singular exactly when 1 is an eigenvalue of scaled
    nonsingular = bool(np.linalg.cond(gamma) < 1e14)
    return StationarityReport(gamma, rho, nonsingular, bool(rho < 1.0 and nonsingular))


def decay(state: IntensityState, dt: float, params: HawkesParams) -> IntensityState:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    lam = params.lambda_inf + (state.lam - params.lambda_inf) * np.exp(-params.alpha * dt)
    return IntensityState(state.t + dt, lam, state.n_counts)


def excite(state: IntensityState, j: int, params: HawkesParams) -> IntensityState:
    """Event in class ``j`` (0-based)."""
    if not 0 <= j < params.m:
        raise IndexError(f"class {j} out of range for m={params.m}")
    counts = state.n_counts.copy()
    counts[j] += 1
    return IntensityState(state.t, state.lam + params.d[:, j], counts)


def stationary_mean(params: HawkesParams) -> np.ndarray:
    """Steady state of the first-moment ODE: Γ λ̄ = diag(α) λ∞.

    Note: this differs (beyond first order in d) from the closed expression
    Σ_j (δ_lj − d_lj/α_l) λ_j,∞ sometimes quoted for the limit; the linear
    solve is what long-run simulation reproduces.
    """
    rep = check_stationarity(params)
    if not rep.is_stationary:
        raise ValueError("no stationary mean: excitation matrix is not stable")
    return np.linalg.solve(rep.gamma_matrix, params.alpha * params.lambda_inf)


def _fd_step(lam_l: float) -> float:
    return max(1e-6, 1e-6 * abs(lam_l))


def generator_apply(
    g: Callable[[np.ndarray, np.ndarray], float],
    n: np.ndarray,
    lam: np.ndarray,
    params: HawkesParams,
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """[𝒜g](n, λ) = Σ_l α_l(λ∞_l − λ_l) ∂g/∂λ_l + λ_l (g(n + e_l, λ + d_l) − g(n, λ)).

    ``grad`` supplies ∂g/∂λ analytically; otherwise central differences are used.
    """
    n = np.asarray(n)
    lam = np.asarray(lam, dtype=float)
    base = g(n, lam)
    if grad is not None:
        dg = np.asarray(grad(n, lam), dtype=float)
    else:
        dg = np.empty(params.m)
        for l in range(params.m):
            h = _fd_step(lam[l])
            e = np.zeros(params.m)
            e[l] = h
            dg[l] = (g(n, lam + e) - g(n, lam - e)) / (2 * h)
    total = 0.0
    for l in range(params.m):
        e_l = np.zeros_like(n)
        e_l[l] = 1
        jump = g(n + e_l, lam + params.d[:, l]) - base
        total += params.alpha[l] * (params.lambda_inf[l] - lam[l]) * dg[l] + lam[l] * jump
    return float(total)
