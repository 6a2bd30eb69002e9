"""Optimal portfolio weights under the block market structure.

The optimization separates into one scalar problem per asset class plus a
closed-form orthogonal part.  With ϖ = k ω̄_l the total class weight,
c = κ1_l / k and effective jump atoms a = j_l z (non-positive), the scalar
objective for a log investor is

    Q(ϖ) = −ϖ R̄_l + ½ c ϖ² − λ_l Σ_z p_z log(1 + ϖ a_z),

strictly convex on the solvency interval {1 + ϖ a_z > 0}.  Power utility
replaces the log by (y^γ − 1)/γ and scales the quadratic by (1 − γ);
exponential utility works with dollar amounts instead of weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .jumps import Binomial, Deterministic, atom_table
from .market import MarketParams
from .roots import bracketed_newton, cubic_roots, quadratic_roots
from .utility import LOG, UtilitySpec

MERTON_THRESHOLD = 1e-12
_NEWTON_FTOL = 1e-12


@dataclass(frozen=True, eq=False)
class ClassProblem:
    """Flattened scalar problems: one row per (state, class) pair."""

    rbar: np.ndarray
    c: np.ndarray
    lam: np.ndarray
    a: np.ndarray      # (N, q) effective jump atoms
    p: np.ndarray      # (N, q) atom probabilities
    gamma: float = 0.0          # 0 means log
    kappa: float | None = None  # set for exponential (dollar) problems

    @property
    def boundary(self) -> np.ndarray:
        """Supremum of the solvency interval (inf when there are no live jumps)."""
        if self.kappa is not None:
            return np.full(self.rbar.shape, np.inf)
        worst = np.max(np.where(self.p > 0, -self.a, 0.0), axis=1, initial=0.0)
        with np.errstate(divide="ignore"):
            return np.where(worst > 0, 1.0 / worst, np.inf)

    def foc(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Derivative of the scalar objective and its second derivative."""
        w = w[:, None]
        if self.kappa is not None:
            kap = self.kappa
            e = np.exp(-kap * w * self.a)
            jump = np.sum(self.p * self.a * e, axis=1)
            djump = np.sum(self.p * self.a ** 2 * e, axis=1)
            return (-self.rbar + kap * self.c * w[:, 0] - self.lam * jump,
                    kap * self.c + kap * self.lam * djump)
        g = self.gamma
        y = 1.0 + w * self.a
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(self.p > 0, y, 1.0)
            jump = np.sum(self.p * self.a * y ** (g - 1), axis=1)
            djump = np.sum(self.p * self.a ** 2 * y ** (g - 2), axis=1)
        return (-self.rbar + (1 - g) * self.c * w[:, 0] - self.lam * jump,
                (1 - g) * (self.c + self.lam * djump))

    def jump_term(self, w: np.ndarray) -> np.ndarray:
        w = w[:, None]
        if self.kappa is not None:
            return self.lam * np.sum(self.p * self.a * np.exp(-self.kappa * w * self.a), axis=1)
        y = np.where(self.p > 0, 1.0 + w * self.a, 1.0)
        return self.lam * np.sum(self.p * self.a * y ** (self.gamma - 1), axis=1)

    def objective(self, w: np.ndarray) -> np.ndarray:
        """Scalar objective Q (to be minimized); +inf outside the solvency interval."""
        w = np.asarray(w, dtype=float)
        wc = w[:, None]
        if self.kappa is not None:
            kap = self.kappa
            jump = np.sum(self.p * np.expm1(-kap * wc * self.a), axis=1) / kap
            return -w * self.rbar + 0.5 * kap * self.c * w * w + self.lam * jump
        y = 1.0 + wc * self.a
        live = self.p > 0
        bad = np.any(live & (y <= 0), axis=1)
        y = np.where(live & (y > 0), y, 1.0)
        if self.gamma == 0.0:
            util = np.log(y)
        else:
            util = np.expm1(self.gamma * np.log(y)) / self.gamma
        val = -w * self.rbar + 0.5 * (1 - self.gamma) * self.c * w * w - self.lam * np.sum(self.p * util, axis=1)
        return np.where(bad, np.inf, val)

    def residual(self, w: np.ndarray) -> np.ndarray:
        """|FOC| normalized by the size of its largest term."""
        val, _ = self.foc(w)
        scale = 1.0 if self.kappa is None else self.kappa
        terms = np.maximum.reduce([np.ones_like(w), np.abs(self.rbar), np.abs(scale * (1 - self.gamma) * self.c * w),
                                   np.abs(self.jump_term(w))])
        return np.abs(val) / terms

    def merton(self) -> np.ndarray:
        if self.kappa is not None:
            return self.rbar / (self.kappa * self.c)
        return self.rbar / ((1 - self.gamma) * self.c)

    def brackets(self) -> tuple[np.ndarray, np.ndarray]:
        curv = (1 - self.gamma) * self.c if self.kappa is None else self.kappa * self.c
        mean_abs = np.sum(self.p * np.abs(self.a), axis=1)
        lo = np.minimum(0.0, (self.rbar - self.lam * mean_abs) / curv) - 1.0
        hi = np.maximum(0.0, self.rbar / curv) + 1.0
        b = self.boundary
        need = hi >= b
        if np.any(need):
            # walk toward the solvency boundary until the FOC turns positive
            base = np.minimum(lo, 0.0)
            cand = hi.copy()
            for i in range(1, 80):
                trial = b - (b - base) * 0.5 ** i
                cand = np.where(need, trial, cand)
                val, _ = self.foc(cand)
                need = need & ~(val > 0)
                if not np.any(need):
                    break
            hi = cand
        return lo, hi


def _flatten(market: MarketParams, lam, utility: UtilitySpec) -> tuple[ClassProblem, tuple]:
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-1:] != (market.m,):
        raise ValueError(f"lambda must have trailing dimension {market.m}, got shape {lam.shape}")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("intensities must be finite and >= 0")
    lead = lam.shape[:-1]
    flat = lam.reshape(-1, market.m)
    n_states = flat.shape[0]
    support, probs = atom_table(market.laws)
    a = market.j[:, None] * support
    rows = np.tile(np.arange(market.m), n_states)
    kappa = utility.kappa if utility.kind == "exponential" else None
    gamma = utility.gamma if utility.kind == "power" else 0.0
    prob = ClassProblem(market.Rbar[rows], (market.kappa1 / market.k)[rows], flat.reshape(-1),
                        a[rows], probs[rows], gamma, kappa)
    return prob, lead


def _exposed(prob: ClassProblem) -> np.ndarray:
    return np.max(np.where(prob.p > 0, np.abs(prob.a), 0.0), axis=1) >= MERTON_THRESHOLD


def solve_numeric(prob: ClassProblem, x0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Safeguarded Newton on the FOC inside the solvency interval.

    Returns (ϖ, converged flag).  Rows without jump exposure or with λ = 0
    get the Merton solution directly.
    """
    w = prob.merton()
    ok = np.ones(w.shape, dtype=bool)
    live = _exposed(prob) & (prob.lam > 0)
    if np.any(live):
        sub = _subset(prob, live)
        lo, hi = sub.brackets()
        start = None if x0 is None else np.asarray(x0, dtype=float)[live]
        ftol = _NEWTON_FTOL * (1 + np.abs(sub.rbar))
        root, _, conv = bracketed_newton(sub.foc, lo, hi, start, ftol)
        w[live] = root
        ok[live] = conv | (sub.residual(root) < 1e-12)
    return w, ok


def _subset(prob: ClassProblem, mask) -> ClassProblem:
    return ClassProblem(prob.rbar[mask], prob.c[mask], prob.lam[mask], prob.a[mask], prob.p[mask],
                        prob.gamma, prob.kappa)


def solve_quadratic(prob: ClassProblem) -> np.ndarray:
    """Closed form for single-atom laws (log utility).

    Clearing the denominator of −R̄ + cϖ − λa/(1+ϖa) = 0 gives
    ca ϖ² + (c − R̄a) ϖ − (R̄ + λa) = 0 with discriminant (c + R̄a)² + 4λca².
    For a < 0 the admissible root is the smaller one.  At λ = 0 the
    quadratic factors as (cϖ − R̄)(aϖ + 1) and the Merton root is taken even
    when it lies beyond the solvency bound −1/a, since no jump can occur.
    """
    a = np.sum(prob.a * prob.p, axis=1)
    w = prob.rbar / prob.c
    live = (np.abs(a) >= MERTON_THRESHOLD) & (prob.lam > 0)
    if np.any(live):
        al, c, rb, lam = a[live], prob.c[live], prob.rbar[live], prob.lam[live]
        roots = quadratic_roots(c * al, c - rb * al, -(rb + lam * al)).real
        w[live] = np.min(roots, axis=1)
    return w


def solve_cubic(prob: ClassProblem) -> tuple[np.ndarray, list[str]]:
    """Closed form for two-atom laws (log utility) via the cleared cubic.

    Returns (ϖ, provenance).  Rows where the analytic candidates do not yield
    exactly one admissible FOC root are re-solved numerically.
    """
    n = prob.rbar.size
    a1 = prob.a[:, 0]
    a2 = prob.a[:, 1] if prob.a.shape[1] > 1 else prob.a[:, 0]
    p = prob.p[:, 0]
    c, rb, lam = prob.c, prob.rbar, prob.lam
    w = prob.merton()
    prov = ["merton"] * n
    live = (np.maximum(np.abs(a1), np.abs(a2)) >= MERTON_THRESHOLD) & (lam > 0)
    if not np.any(live):
        return w, prov
    idx = np.flatnonzero(live)
    A1, A2, P, C, RB, L = a1[idx], a2[idx], p[idx], c[idx], rb[idx], lam[idx]
    roots = cubic_roots(C * A1 * A2,
                        C * (A1 + A2) - RB * A1 * A2,
                        C - RB * (A1 + A2) - L * A1 * A2,
                        -RB - L * (P * A1 + (1 - P) * A2))
    sub = _subset(prob, live)
    bound = sub.boundary
    chosen = np.full(idx.size, np.nan)
    count = np.zeros(idx.size, dtype=int)
    for col in range(3):
        z = roots[:, col]
        scale = np.maximum(1.0, np.abs(z))
        real = np.isfinite(z) & (np.abs(z.imag) <= 1e-8 * scale)
        x = z.real
        margin = 1.0 - x / bound
        inside = real & (x < bound) & (margin > 1e-9)
        res = np.where(inside, sub.residual(np.where(inside, x, 0.0)), np.inf)
        good = inside & (res < 1e-6)
        # polish on the FOC itself
        val, der = sub.foc(np.where(good, x, 0.0))
        polished = np.where(good, x - val / der, x)
        better = good & (sub.residual(np.where(good, polished, 0.0)) <= res) & (polished < bound)
        x = np.where(better, polished, x)
        dup = good & (count > 0) & (np.abs(x - chosen) <= 1e-9 * np.maximum(1.0, np.abs(x)))
        new = good & ~dup
        chosen = np.where(new & (count == 0), x, chosen)
        count += new
    unique = count == 1
    for i, row in enumerate(idx):
        prov[row] = "cubic" if unique[i] else "numeric-fallback"
    w[idx[unique]] = chosen[unique]
    if np.any(~unique):
        back = np.zeros(n, dtype=bool)
        back[idx[~unique]] = True
        wn, _ = solve_numeric(_subset(prob, back))
        w[back] = wn
    return w, prov


# ---------------------------------------------------------------------------
# public API


def omega_perp_star(market: MarketParams, utility: UtilitySpec = LOG) -> np.ndarray:
    """Orthogonal weights R⊥_l / κ2_l (scaled by 1/(1−γ) or 1/κ for other utilities)."""
    kap2 = np.repeat(market.kappa2, market.k)
    if utility.kind == "power":
        return market.Rperp / ((1 - utility.gamma) * kap2)
    if utility.kind == "exponential":
        return market.Rperp / (utility.kappa * kap2)
    return market.Rperp / kap2


def _require_laws(market, kinds, name):
    for l, law in enumerate(market.laws):
        if not isinstance(law, kinds):
            raise TypeError(f"{name} needs {'/'.join(k.__name__ for k in kinds)} laws; class {l} has {type(law).__name__}")


def omega_bar_deterministic(market: MarketParams, lam) -> np.ndarray:
    """Class weights ω̄ for single-atom jump laws (closed form)."""
    for l, law in enumerate(market.laws):
        support, probs = law.atoms()
        if np.unique(support[probs > 0]).size != 1:
            raise TypeError(f"class {l} jump law is not deterministic")
    prob, lead = _flatten(market, lam, LOG)
    sub = ClassProblem(prob.rbar, prob.c, prob.lam, *_collapse(prob), 0.0, None)
    return (solve_quadratic(sub) / market.k).reshape(lead + (market.m,))


def _collapse(prob):
    """Single-atom view of laws that are deterministic in distribution."""
    a = np.sum(np.where(prob.p > 0, prob.a * prob.p, 0.0), axis=1, keepdims=True)
    return a, np.ones_like(a)


def omega_bar_binomial(market: MarketParams, lam, return_provenance: bool = False):
    """Class weights ω̄ for two-atom laws via the closed-form cubic."""
    _require_laws(market, (Binomial, Deterministic), "omega_bar_binomial")
    prob, lead = _flatten(market, lam, LOG)
    if prob.a.shape[1] == 1:
        prob = ClassProblem(prob.rbar, prob.c, prob.lam, np.repeat(prob.a, 2, axis=1),
                            np.concatenate([prob.p, np.zeros_like(prob.p)], axis=1))
    w, prov = solve_cubic(prob)
    out = (w / market.k).reshape(lead + (market.m,))
    return (out, prov) if return_provenance else out


def omega_bar_numeric(market: MarketParams, lam, utility: UtilitySpec = LOG, x0=None) -> np.ndarray:
    """Class weights (or class dollar amounts for exponential utility) by safeguarded Newton."""
    prob, lead = _flatten(market, lam, utility)
    start = None if x0 is None else np.broadcast_to(np.asarray(x0, dtype=float) * market.k, prob.rbar.shape)
    w, ok = solve_numeric(prob, start)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)[0]
        raise NumericalError(f"Newton did not converge for class row {bad}: residual {prob.residual(w)[bad]:.3g}")
    return (w / market.k).reshape(lead + (market.m,))


def consumption_rate(beta: float, wealth):
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return beta * np.asarray(wealth, dtype=float) if np.ndim(wealth) else beta * float(wealth)


@dataclass(frozen=True, eq=False)
class PolicyResult:
    """Optimal policy at one intensity vector.

    For exponential utility the weights are dollar amounts π (the optimal
    policy is wealth-independent in dollars) and ``omega0`` is not defined.
    """

    lam: np.ndarray
    omega_bar: np.ndarray
    omega_perp: np.ndarray
    omega_full: np.ndarray
    omega0: float
    consumption_rate_fraction: float | None
    foc_residual: np.ndarray
    provenance: tuple
    K: float
    utility: UtilitySpec = field(default=LOG)

    @property
    def dollar(self) -> bool:
        return self.utility.kind == "exponential"

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam.tolist(),
            "omega_bar": self.omega_bar.tolist(),
            "omega_perp": self.omega_perp.tolist(),
            "omega_full": self.omega_full.tolist(),
            "omega0": self.omega0,
            "consumption_rate_fraction": self.consumption_rate_fraction,
            "diagnostics": {
                "foc_residual": self.foc_residual.tolist(),
                "root_provenance": list(self.provenance),
                "K": self.K,
            },
            "utility": self.utility.to_dict(),
            "units": "dollars" if self.dollar else "wealth fractions",
        }


def _method_for(market: MarketParams) -> str:
    sizes = [np.unique(s[p > 0]).size for s, p in (law.atoms() for law in market.laws)]
    if all(s == 1 for s in sizes):
        return "deterministic"
    if all(isinstance(law, (Binomial, Deterministic)) for law in market.laws):
        return "binomial"
    return "numeric"


def solve_classes(market: MarketParams, lam, utility: UtilitySpec = LOG, method: str = "auto"):
    """Class-level solution ϖ (shape (..., m)) with residuals and provenance."""
    prob, lead = _flatten(market, lam, utility)
    if method == "auto":
        method = _method_for(market) if utility.kind == "log" else "numeric"
    if method == "deterministic":
        sub = ClassProblem(prob.rbar, prob.c, prob.lam, *_collapse(prob), 0.0, None)
        w = solve_quadratic(sub)
        prov = ["quadratic" if e else "merton" for e in _exposed(sub)]
    elif method == "binomial":
        w, prov = omega_bar_binomial(market, lam, return_provenance=True)
        w = w.reshape(-1) * market.k
    elif method == "numeric":
        w, ok = solve_numeric(prob)
        if not np.all(ok):
            bad = np.flatnonzero(~ok)[0]
            raise NumericalError(f"Newton did not converge for class row {bad}")
        live = _exposed(prob) & (prob.lam > 0)
        prov = ["newton" if e else "merton" for e in live]
    else:
        raise ValueError(f"unknown method {method!r}")
    res = prob.residual(w)
    if np.any(res > 1e-10):
        bad = int(np.argmax(res))
        raise NumericalError(f"FOC residual {res[bad]:.3g} at class row {bad} (method {method})")
    shape = lead + (market.m,)
    return w.reshape(shape), res.reshape(shape), prov, prob


def _perp_K(market: MarketParams, utility: UtilitySpec) -> float:
    kap2 = np.repeat(market.kappa2, market.k)
    q = float(np.sum(market.Rperp ** 2 / kap2))
    if utility.kind == "power":
        return -utility.gamma * q / (2 * (1 - utility.gamma))
    if utility.kind == "exponential":
        return q / 2
    return -q / 2


def _class_K(prob: ClassProblem, w: np.ndarray, utility: UtilitySpec) -> np.ndarray:
    q = prob.objective(w)
    if utility.kind == "power":
        return utility.gamma * q
    if utility.kind == "exponential":
        return -utility.kappa * q
    return q


def K_star(market: MarketParams, lam, utility: UtilitySpec = LOG, method: str = "auto") -> np.ndarray:
    """Optimized K at each intensity vector (shape lam.shape[:-1]).

    Log: min of −ω'R + ½ω'Σω − Σ λ_l E log(1 + (ω'J)_l z).
    Power: optimum of −γω'R − ½γ(γ−1)ω'Σω − Σ λ_l E[(1 + (ω'J)_l z)^γ − 1].
    Exponential: max of κπ'R − ½κ²π'Σπ − Σ λ_l E[exp(−κ(π'J)_l z) − 1].
    """
    w, _, _, prob = solve_classes(market, lam, utility, method)
    per_class = _class_K(prob, w.reshape(-1), utility).reshape(w.shape)
    return per_class.sum(axis=-1) + _perp_K(market, utility)


def full_objective(market: MarketParams, omega, lam, utility: UtilitySpec = LOG) -> float:
    """K evaluated at an arbitrary full weight vector (dense form, for checks)."""
    omega = np.asarray(omega, dtype=float)
    lam = np.asarray(lam, dtype=float)
    exposure = omega @ market.J
    support, probs = atom_table(market.laws)
    y = 1.0 + exposure[:, None] * support
    quad = omega @ market.sigma @ omega
    lin = omega @ market.R
    if utility.kind == "exponential":
        kap = utility.kappa
        jump = np.sum(lam * np.sum(probs * np.expm1(-kap * exposure[:, None] * support), axis=1))
        return float(kap * lin - 0.5 * kap ** 2 * quad - jump)
    if np.any((probs > 0) & (y <= 0)):
        return np.inf
    y = np.where(probs > 0, y, 1.0)
    if utility.kind == "power":
        g = utility.gamma
        return float(-g * lin - 0.5 * g * (g - 1) * quad - np.sum(lam * np.sum(probs * np.expm1(g * np.log(y)), axis=1)))
    return float(-lin + 0.5 * quad - np.sum(lam * np.sum(probs * np.log(y), axis=1)))


def optimal_policy(market: MarketParams, lam, utility: UtilitySpec = LOG, method: str = "auto") -> PolicyResult:
    """Optimal weights at a single intensity vector ``lam``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (market.m,):
        raise ValueError(f"lambda must have shape ({market.m},), got {lam.shape}")
    w, res, prov, prob = solve_classes(market, lam, utility, method)
    omega_bar = w / market.k
    perp = omega_perp_star(market, utility)
    full = np.repeat(omega_bar, market.k) + perp
    K = float(_class_K(prob, w, utility).sum() + _perp_K(market, utility))
    beta = utility.beta if utility.kind == "log" else None
    omega0 = float("nan") if utility.kind == "exponential" else float(1.0 - full.sum())
    return PolicyResult(lam.copy(), omega_bar, perp, full, omega0, beta, res, tuple(prov), K, utility)


def weights_function(market: MarketParams, utility: UtilitySpec = LOG, method: str = "auto"):
    """Vectorized λ ↦ full weight vector, for use inside path simulations."""
    perp = omega_perp_star(market, utility)

    def weights(lam: np.ndarray) -> np.ndarray:
        w, _, _, _ = solve_classes(market, lam, utility, method)
        return np.repeat(w / market.k, market.k, axis=-1) + perp

    return weights


def two_asset_policy(market: MarketParams, lam) -> PolicyResult:
    """The n = 2, k = 1, m = 2 specialization."""
    if (market.n, market.k, market.m) != (2, 1, 2):
        raise ValueError(f"two-asset policy needs n=2, k=1, m=2; got n={market.n}, k={market.k}, m={market.m}")
    return optimal_policy(market, lam)
