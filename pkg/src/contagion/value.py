"""Value functions by Feynman–Kac Monte Carlo and fixed-point iteration.

Log utility: V(x, λ) = f(λ) + log(x)/β where 𝒜f − βf = F and

    F(λ) = 1 − r/β − log β + K*(λ)/β.

The solution is f = −∫ e^{−βs} E_λ[F(λ_s)] ds (note the minus sign: the
discounted integral itself solves 𝒜u − βu = −F).

Power utility U(c) = c^γ/γ: V = x^γ g(λ)/γ with

    𝒜g − (β − rγ) g = g K^γ*(h(λ)) − (1 − γ) g^{γ/(γ−1)},
    h_l(λ) = λ_l g(λ + d_l) / g(λ),    C* = x g^{1/(γ−1)},

so g is a fixed point of g ↦ ∫ e^{−(β−rγ)s} E[(1−γ) g^{γ/(γ−1)} − g K^γ*(h)] ds.

Exponential utility U(c) = −e^{−γc}/γ: V = −e^{−κx} g(λ) with κ = rγ and

    𝒜g − (β − r + r log κ) g = g (r log g + K*(h(λ))),
    C* = (κx − log g − log κ)/γ,

with K* the maximum of the dollar objective.

Expectations over λ-paths are tabulated once per discount rate as an
occupation matrix W: row i holds the discounted time the path started at
node i spends near each node (multilinear hat weights), so that
∫ e^{−ρs} E_i[φ(λ_s)] ds ≈ (W φ)_i for any node function φ.  Every
fixed-point iterate reuses the same W, which gives common random numbers
across iterations for free.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import rng
from .errors import NumericalError
from .grid import IntensityGrid, default_box
from .hawkes import HawkesParams, check_stationarity
from .market import MarketParams
from .policy import K_star, solve_classes, weights_function
from .simulate import ProportionalPolicy, _run_thinning, map_paths, simulate_market
from .utility import UtilitySpec

DEFAULT_TAIL_TOL = 1e-8
DIVERGENCE_CAP = 1e100  # an iterate this large means g has no finite fixed point
DEFAULT_BATCHES = 20
_MEMORY_BUDGET = 200e6
_F_CHUNK = 256


class HorizonTooShort(ValueError):
    def __init__(self, given: float, required: float):
        self.given = given
        self.required = required
        super().__init__(f"T_max={given:g} is too small for the requested tail tolerance; need T_max >= {required:g}")


# ---------------------------------------------------------------------------
# path quadrature


@njit(cache=True, nogil=True)
def _discounted_nodes(times, lam_after, lam_start, alpha, lam_inf, T, rho, h_max):
    """Points λ(s) along one path and their weights for ∫_0^∞ e^{−ρs} φ(λ_s) ds.

    Each inter-event segment is split into sub-steps of length ≤ h_max;
    φ is taken linear in time on a sub-step and integrated against e^{−ρs}
    exactly.  The tail beyond T contributes e^{−ρT} φ(λ_T)/ρ.
    """
    m = alpha.size
    n_ev = times.size
    cap = 1
    t0 = 0.0
    for e in range(n_ev + 1):
        t1 = times[e] if e < n_ev else T
        cap += int(math.ceil((t1 - t0) / h_max)) + 2
        t0 = t1
    pts = np.empty((cap, m))
    wts = np.empty(cap)
    k = 0
    t0 = 0.0
    lam0 = lam_start.copy()
    last = lam_start.copy()
    for e in range(n_ev + 1):
        t1 = times[e] if e < n_ev else T
        span = t1 - t0
        if span > 0:
            n = max(1, int(math.ceil(span / h_max)))
            h = span / n
            x = rho * h
            if x < 1e-3:
                wa = h * (0.5 - x / 6 + x * x / 24 - x ** 3 / 120)
                wb = h * (0.5 - x / 3 + x * x / 8 - x ** 3 / 30)
            else:
                E = math.exp(-x)
                I1 = (1 - E) / rho
                I2 = (1 - E * (1 + x)) / (rho * rho)
                wa = I1 - I2 / h
                wb = I2 / h
            for i in range(n + 1):
                s = t0 + i * h if i < n else t1
                w = 0.0
                if i > 0:
                    w += wb * math.exp(-rho * (t0 + (i - 1) * h))
                if i < n:
                    w += wa * math.exp(-rho * s)
                for l in range(m):
                    pts[k, l] = lam_inf[l] + (lam0[l] - lam_inf[l]) * math.exp(-alpha[l] * (s - t0))
                    last[l] = pts[k, l]
                wts[k] = w
                k += 1
        if e < n_ev:
            for l in range(m):
                lam0[l] = lam_after[e, l]
                last[l] = lam0[l]
        t0 = t1
    for l in range(m):
        pts[k, l] = last[l]
    wts[k] = math.exp(-rho * T) / rho
    k += 1
    return pts[:k], wts[:k]


@njit(cache=True, nogil=True)
def _accumulate(pts, wts, lo, hi, h, counts, strides, row):
    """Scatter weighted multilinear hat weights of ``pts`` into ``row``.

    Points outside the box are clamped to it; returns their total weight.
    """
    m = lo.size
    n_c = 1 << m
    fr = np.empty(m)
    outside = 0.0
    for r in range(pts.shape[0]):
        base = 0
        out = False
        for l in range(m):
            v = pts[r, l]
            span = hi[l] - lo[l]
            if v < lo[l] - 1e-12 * span or v > hi[l] + 1e-12 * span:
                out = True
            x = (v - lo[l]) / h[l]
            x = min(max(x, 0.0), counts[l] - 1.0)
            i = min(int(math.floor(x)), counts[l] - 2)
            fr[l] = x - i
            base += i * strides[l]
        if out:
            outside += wts[r]
        for c in range(n_c):
            wt = wts[r]
            off = 0
            for l in range(m):
                if (c >> l) & 1:
                    wt *= fr[l]
                    off += strides[l]
                else:
                    wt *= 1.0 - fr[l]
            row[base + off] += wt
    return outside


def _h_max(params: HawkesParams) -> float:
    return 0.1 / float(np.max(params.alpha))


def _path_quadrature(params, lam_start, T, rho, factory, path, h_max):
    k, res = _run_thinning(params, lam_start, T, lambda: factory.generator(path, rng.THINNING))
    return _discounted_nodes(res[3][:k], res[5][:k], lam_start, params.alpha, params.lambda_inf,
                             float(T), float(rho), float(h_max))


def required_horizon(rate: float, sup_abs: float, tol_tail: float) -> float:
    """Smallest integer T with e^{−rate T} sup|φ| / rate ≤ tol_tail."""
    if sup_abs <= 0:
        return 1.0
    return float(max(1, math.ceil(-math.log(tol_tail * rate / sup_abs) / rate)))


# ---------------------------------------------------------------------------
# log utility


def F_of_lambda(market: MarketParams, utility: UtilitySpec, lam) -> np.ndarray:
    """F(λ) = 1 − r/β − log β + K*(λ)/β for a log investor."""
    if utility.kind != "log":
        raise ValueError("F is defined for log utility")
    beta = utility.beta
    return 1.0 - market.r / beta - math.log(beta) + K_star(market, lam) / beta


@dataclass(frozen=True)
class FKResult:
    value: float
    stderr: float
    tail_bound: float
    T_max: float
    n_paths: int


def feynman_kac_integral(hawkes: HawkesParams, F, rate: float, lambda0, paths: int, seed: int,
                         T_max: float | None = None, tol_tail: float = DEFAULT_TAIL_TOL,
                         sup_abs: float | None = None, grid: IntensityGrid | None = None,
                         workers: int = 1) -> FKResult:
    """Monte Carlo estimate of ∫_0^∞ e^{−rate·s} E_{λ0}[F(λ_s)] ds.

    ``F`` maps an (N, m) array of intensities to N values.  The truncation
    horizon follows from the tail bound e^{−rate T} sup|F|/rate ≤ tol_tail,
    with the supremum over ``grid`` (default box) unless ``sup_abs`` is given.
    """
    lambda0 = np.asarray(lambda0, dtype=float)
    if sup_abs is None:
        box = grid if grid is not None else default_box(hawkes, seed=seed)
        sup_abs = float(np.max(np.abs(F(np.vstack([box.points(), lambda0[None, :]])))))
    need = required_horizon(rate, sup_abs, tol_tail)
    if T_max is None:
        T_max = need
    elif T_max < need:
        raise HorizonTooShort(T_max, need)
    h_max = _h_max(hawkes)

    def one(factory, p):
        return _path_quadrature(hawkes, lambda0, T_max, rate, factory, p, h_max)

    vals = np.empty(paths)
    for start in range(0, paths, _F_CHUNK):
        stop = min(paths, start + _F_CHUNK)
        quads = map_paths(lambda fac, p: one(fac, p + start), stop - start, seed, workers)
        pts = np.concatenate([q[0] for q in quads])
        wts = np.concatenate([q[1] for q in quads])
        offsets = np.cumsum([0] + [q[1].size for q in quads[:-1]])
        vals[start:stop] = np.add.reduceat(F(pts) * wts, offsets)
    se = float(np.std(vals, ddof=1) / math.sqrt(paths)) if paths > 1 else float("nan")
    return FKResult(float(np.mean(vals)), se, math.exp(-rate * T_max) * sup_abs / rate, float(T_max), paths)


def f_feynman_kac(market: MarketParams, hawkes: HawkesParams, beta: float, lambda0, paths: int, seed: int,
                  T_max: float | None = None, tol_tail: float = DEFAULT_TAIL_TOL, workers: int = 1) -> FKResult:
    """Log-utility value component f(λ0) = −∫ e^{−βs} E[F(λ_s)] ds."""
    _require_stationary(hawkes)
    util = UtilitySpec("log", beta)
    res = feynman_kac_integral(hawkes, lambda lam: F_of_lambda(market, util, lam), beta, lambda0, paths, seed,
                               T_max, tol_tail, workers=workers)
    return FKResult(-res.value, res.stderr, res.tail_bound, res.T_max, res.n_paths)


def _require_stationary(hawkes: HawkesParams):
    if not check_stationarity(hawkes).is_stationary:
        raise ValueError("Feynman-Kac evaluation needs stationary intensity dynamics")


# ---------------------------------------------------------------------------
# occupation matrices


@dataclass(frozen=True, eq=False)
class Occupation:
    grid: IntensityGrid
    rate: float
    T_max: float
    paths: int
    seed: int
    W: np.ndarray            # (N, N), rows sum to 1/rate
    W_batches: np.ndarray    # (B, N, N) batch means of W
    clamped: np.ndarray      # (N,) discounted mass spent outside the box, fraction of 1/rate

    def apply(self, phi: np.ndarray) -> np.ndarray:
        return self.W @ np.asarray(phi, dtype=float).reshape(-1)

    def apply_batches(self, phi: np.ndarray) -> np.ndarray:
        return self.W_batches @ np.asarray(phi, dtype=float).reshape(-1)


def _n_batches(n_nodes: int, paths: int, requested: int) -> int:
    fit = int(_MEMORY_BUDGET // (8 * n_nodes * n_nodes))
    return max(1, min(requested, fit, paths))


def occupation_matrix(hawkes: HawkesParams, grid: IntensityGrid, rate: float, paths: int, seed: int,
                      T_max: float | None = None, tol_tail: float = DEFAULT_TAIL_TOL,
                      batches: int = DEFAULT_BATCHES, workers: int = 1) -> Occupation:
    """Tabulate discounted occupation weights for paths started at every node.

    Paths from different nodes share random numbers path-by-path (common
    random numbers), so differences across nodes are estimated with little
    noise.
    """
    if rate <= 0:
        raise ValueError("discount rate must be > 0")
    if grid.m != hawkes.m:
        raise ValueError("grid dimension does not match the number of classes")
    if T_max is None:
        T_max = float(math.ceil(-math.log(tol_tail) / rate))
    nodes = grid.points()
    N = nodes.shape[0]
    B = _n_batches(N, paths, batches)
    edges = np.linspace(0, paths, B + 1).astype(int)
    h_max = _h_max(hawkes)
    lo, hi, h, strides = grid.lo, grid.hi, grid.spacing, grid.strides
    counts = np.array(grid.counts, dtype=np.int64)

    def node_task(i):
        factory = rng.StreamFactory(seed)
        rows = np.zeros((B, N))
        clamped = 0.0
        for b in range(B):
            for p in range(edges[b], edges[b + 1]):
                pts, wts = _path_quadrature(hawkes, nodes[i], T_max, rate, factory, p, h_max)
                clamped += _accumulate(pts, wts, lo, hi, h, counts, strides, rows[b])
            rows[b] /= max(edges[b + 1] - edges[b], 1)
        return rows, clamped * rate / paths

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(node_task, range(N)))
    else:
        out = [node_task(i) for i in range(N)]
    Wb = np.empty((B, N, N))
    clamped = np.empty(N)
    for i, (rows, cl) in enumerate(out):
        Wb[:, i, :] = rows
        clamped[i] = cl
    sizes = np.diff(edges).astype(float)
    W = np.tensordot(sizes / sizes.sum(), Wb, axes=1)
    return Occupation(grid, float(rate), float(T_max), paths, seed, W, Wb, clamped)


# ---------------------------------------------------------------------------
# value fields


@dataclass(eq=False)
class ValueField:
    grid: IntensityGrid
    values: np.ndarray
    stderr: np.ndarray
    kind: str                      # "f" (log) or "g" (power / exponential)
    utility: UtilitySpec
    mc: dict
    batch_values: np.ndarray | None = None
    flags: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)

    def __call__(self, lam) -> np.ndarray:
        return self.grid.interpolate(self.values, lam)[0]

    def to_csv(self) -> str:
        pts = self.grid.points()
        head = ",".join([f"lambda_{l + 1}" for l in range(self.grid.m)] + [self.kind, "stderr"])
        lines = [head]
        for p, v, s in zip(pts, self.values.reshape(-1), self.stderr.reshape(-1)):
            lines.append(",".join([_fmt(x) for x in p] + [_fmt(v), _fmt(s)]))
        return "\n".join(lines) + "\n"

    def sidecar(self) -> dict:
        return {"grid": self.grid.to_dict(), "kind": self.kind, "utility": self.utility.to_dict(),
                "mc": self.mc, "flags": _jsonable(self.flags), "iterations": _jsonable(self.iterations)}


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _stderr(batch_vals: np.ndarray) -> np.ndarray:
    B = batch_vals.shape[0]
    if B < 2:
        return np.full(batch_vals.shape[1:], np.nan)
    return np.std(batch_vals, axis=0, ddof=1) / math.sqrt(B)


def f_field(market: MarketParams, hawkes: HawkesParams, utility: UtilitySpec, grid: IntensityGrid | None = None,
            paths: int = 2000, seed: int = 0, T_max: float | None = None, tol_tail: float = DEFAULT_TAIL_TOL,
            workers: int = 1, occupation: Occupation | None = None) -> ValueField:
    """Tabulate f on a grid: f = −W F with F evaluated at the nodes."""
    _require_stationary(hawkes)
    if utility.kind != "log":
        raise ValueError("f_field is for log utility")
    grid = grid if grid is not None else default_box(hawkes, seed=seed)
    F = F_of_lambda(market, utility, grid.points())
    beta = utility.beta
    need = required_horizon(beta, float(np.max(np.abs(F))), tol_tail)
    if T_max is None:
        T_max = need
    elif T_max < need:
        raise HorizonTooShort(T_max, need)
    occ = occupation or occupation_matrix(hawkes, grid, beta, paths, seed, T_max, workers=workers)
    fb = -occ.apply_batches(F)
    vals = -occ.apply(F)
    return ValueField(grid, vals.reshape(grid.shape), _stderr(fb).reshape(grid.shape), "f", utility,
                      {"paths": paths, "horizon": occ.T_max, "seed": seed, "batches": fb.shape[0]},
                      fb, {"clamped_mass": occ.clamped})


@dataclass(frozen=True, eq=False)
class ResidualReport:
    points: np.ndarray
    residual: np.ndarray
    budget: np.ndarray
    stderr: np.ndarray
    interp_error: np.ndarray
    fd_error: np.ndarray
    evaluated: np.ndarray     # interior nodes whose jump targets stay in the box
    passed: np.ndarray

    @property
    def pass_fraction(self) -> float:
        n = int(np.sum(self.evaluated))
        return float(np.sum(self.passed & self.evaluated) / n) if n else float("nan")


def _axis_diff(vals: np.ndarray, axis: int, order: int) -> np.ndarray:
    """Largest |order-th difference| touching each node along ``axis`` (NaN if unavailable)."""
    diff = np.diff(vals, n=order, axis=axis)
    out = np.full(vals.shape, np.nan)
    n = vals.shape[axis]
    for start in range(n - order):
        sl_src = [slice(None)] * vals.ndim
        sl_src[axis] = start
        d = np.abs(diff[tuple(sl_src)])
        for node in range(start, start + order + 1):
            sl = [slice(None)] * vals.ndim
            sl[axis] = node
            cur = out[tuple(sl)]
            out[tuple(sl)] = np.fmax(cur, d)
    return out


def generator_on_grid(field_vals: np.ndarray, grid: IntensityGrid, hawkes: HawkesParams):
    """𝒜u at every node: central differences for the drift, interpolation for the jumps.

    Returns (values, jump-target-outside flag).  ``field_vals`` may carry
    leading batch dimensions.
    """
    shape = grid.shape
    lead = field_vals.shape[:-len(shape)] if field_vals.ndim > len(shape) else ()
    u = field_vals.reshape(lead + shape)
    pts = grid.points().reshape(shape + (grid.m,))
    out = np.zeros(lead + shape)
    outside = np.zeros(shape, dtype=bool)
    nl = len(lead)
    for l in range(grid.m):
        ax = nl + l
        du = np.gradient(u, grid.spacing[l], axis=ax, edge_order=2)
        drift = hawkes.alpha[l] * (hawkes.lambda_inf[l] - pts[..., l])
        target = pts + hawkes.d[:, l]
        flat_u = u.reshape(lead + (-1,))
        if lead:
            shifted = np.stack([grid.interpolate(fu, target)[0] for fu in flat_u.reshape(-1, grid.size)])
            shifted = shifted.reshape(lead + shape)
        else:
            shifted = grid.interpolate(flat_u, target)[0]
        outside |= ~grid.contains(target)
        out = out + drift * du + pts[..., l] * (shifted - u)
    return out, outside


def hjb_residual_log(market: MarketParams, hawkes: HawkesParams, utility: UtilitySpec, f: ValueField,
                     k_sigma: float = 3.0) -> ResidualReport:
    """Residual 𝒜f − βf − F at interior nodes with an error budget.

    Budget = k_sigma · (batch standard error of the residual)
           + multilinear interpolation error of the jump term (second differences)
           + truncation error of the central drift derivative (third differences).
    Nodes whose jump targets λ + d_l leave the box are excluded and flagged.
    """
    grid = f.grid
    if any(c < 5 for c in grid.counts):
        raise ValueError("grid too coarse: need at least 5 points per axis for the residual budget")
    beta = utility.beta
    F = F_of_lambda(market, utility, grid.points()).reshape(grid.shape)
    gen, outside = generator_on_grid(f.values, grid, hawkes)
    res = gen - beta * f.values - F
    if f.batch_values is not None and f.batch_values.shape[0] > 1:
        gb, _ = generator_on_grid(f.batch_values.reshape((-1,) + grid.shape), grid, hawkes)
        rb = gb - beta * f.batch_values.reshape((-1,) + grid.shape) - F
        se = _stderr(rb)
    else:
        se = np.full(grid.shape, np.nan)
    pts = grid.points().reshape(grid.shape + (grid.m,))
    # multilinear interpolation error is at most Σ_a Δ_a²/8 |∂²_a f|; Δ_a²∂²_a f is read
    # off second differences, evaluated near each jump target
    curvature = sum(np.nan_to_num(_axis_diff(f.values, a, 2)) for a in range(grid.m)) / 8.0
    interp = np.zeros(grid.shape)
    fd = np.zeros(grid.shape)
    for l in range(grid.m):
        at_target, _ = grid.interpolate(curvature, pts + hawkes.d[:, l])
        interp = interp + pts[..., l] * at_target
        third = np.nan_to_num(_axis_diff(f.values, l, 3))
        fd = fd + np.abs(hawkes.alpha[l] * (hawkes.lambda_inf[l] - pts[..., l])) * third / (6 * grid.spacing[l])
    interior = np.ones(grid.shape, dtype=bool)
    for l in range(grid.m):
        sl = [slice(None)] * grid.m
        sl[l] = 0
        interior[tuple(sl)] = False
        sl[l] = -1
        interior[tuple(sl)] = False
    evaluated = interior & ~outside
    if not np.any(evaluated):
        raise ValueError("grid too coarse: no interior node has its jump targets inside the box")
    budget = k_sigma * np.nan_to_num(se) + interp + fd
    passed = np.abs(res) <= budget
    return ResidualReport(grid.points(), res.reshape(-1), budget.reshape(-1), se.reshape(-1), interp.reshape(-1),
                          fd.reshape(-1), evaluated.reshape(-1), passed.reshape(-1))


@dataclass(frozen=True, eq=False)
class TransversalityReport:
    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    ruin_fraction: float
    decays: bool
    final_within: bool
    final_ratio: float          # |mean(T)| / stderr(T)
    tolerance: float

    @property
    def verdict(self) -> bool:
        return self.decays and self.final_within

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "mean": self.mean.tolist(), "stderr": self.stderr.tolist(),
                "ruin_fraction": self.ruin_fraction, "decays": self.decays, "final_within": self.final_within,
                "final_ratio": self.final_ratio, "tolerance": self.tolerance, "verdict": self.verdict}


def transversality_check(market: MarketParams, hawkes: HawkesParams, utility: UtilitySpec, t_grid, paths: int,
                         seed: int, f: ValueField | None = None, x0: float = 1.0, dt: float | None = None,
                         scheme: str = "log", workers: int = 1, field_paths: int = 1000) -> TransversalityReport:
    """Table of E[e^{−βt}(f(λ_t) + log X*_t / β)] under the optimal log policy.

    Verdict: the last entry lies within 3 × (largest standard error in the
    table) of zero, and over the second half of the table each |entry| does
    not exceed the previous one by more than the combined 3-sigma noise.
    """
    if utility.kind != "log":
        raise ValueError("transversality check is for log utility")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 2 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t grid must be increasing and non-negative")
    beta = utility.beta
    if f is None:
        f = f_field(market, hawkes, utility, paths=field_paths, seed=seed, workers=workers)
    T = float(t_grid[-1])
    if dt is None:
        dt = float(np.min(np.diff(np.concatenate([[0.0], t_grid])))) if t_grid[0] > 0 else float(np.min(np.diff(t_grid)))
        dt = min(dt, 0.05)
    policy = ProportionalPolicy(weights_function(market), beta)

    def one(factory, p):
        if T == 0:
            return np.full(t_grid.size, f(hawkes.lambda0[None, :])[0] + math.log(x0) / beta), False
        sp = simulate_market(market, hawkes, policy, x0, T, dt, seed, p, scheme)
        if sp.ruined:
            return None, True
        idx = np.searchsorted(sp.times, t_grid, side="right") - 1
        lam = sp.lam[idx]
        vals = np.exp(-beta * t_grid) * (f(lam) + np.log(sp.wealth[idx]) / beta)
        return vals, False

    out = map_paths(one, paths, seed, workers)
    ruined = sum(1 for v, r in out if r)
    samples = np.array([v for v, r in out if not r])
    ruin_fraction = ruined / paths
    if ruin_fraction > 0.01:
        warnings.warn(f"ruin fraction {ruin_fraction:.3%} exceeds 1%; ruined paths excluded", RuntimeWarning)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0]) if samples.shape[0] > 1 else np.zeros(t_grid.size)
    tol = 3.0 * float(np.max(se))
    final_within = bool(abs(mean[-1]) <= tol)
    half = t_grid.size // 2
    mags = np.abs(mean[half:])
    noise = 3.0 * (se[half:][:-1] + se[half:][1:])
    decays = bool(np.all(mags[1:] <= mags[:-1] + noise))
    ratio = float(abs(mean[-1]) / se[-1]) if se[-1] > 0 else (0.0 if mean[-1] == 0 else float("inf"))
    return TransversalityReport(t_grid, mean, se, ruin_fraction, decays, final_within, ratio, tol)


# ---------------------------------------------------------------------------
# power and exponential utility


def distortion(grid: IntensityGrid, g: np.ndarray, hawkes: HawkesParams) -> tuple[np.ndarray, np.ndarray]:
    """h_l(λ) = λ_l g(λ + d_l)/g(λ) at every node, plus a flag for clamped targets."""
    pts = grid.points()
    gv = np.asarray(g, dtype=float).reshape(-1)
    h = np.empty_like(pts)
    flagged = np.zeros(pts.shape[0], dtype=bool)
    for l in range(grid.m):
        shift = hawkes.d[:, l]
        if np.all(shift == 0):
            h[:, l] = pts[:, l]
            continue
        shifted, out = grid.interpolate(gv, pts + shift)
        h[:, l] = pts[:, l] * shifted / gv
        flagged |= out
    return h, flagged


@dataclass(eq=False)
class FixedPointResult:
    field: ValueField
    converged: bool
    contraction_verdict: bool
    iterations: list
    h: np.ndarray
    h_flagged: np.ndarray
    weights: np.ndarray               # optimal (contagion) class weights/dollars at the nodes, ω*(h(λ))
    weights_noncontagion: np.ndarray  # ω*(λ) at the nodes
    consumption: np.ndarray           # power: C/x = g^{1/(γ−1)}; exponential: offset in C = r x + offset
    discount: float
    kappa: float | None = None

    def magnification(self) -> dict:
        """Empirical comparison of ω*(h(λ)) against ω*(λ); reported, not asserted."""
        c, nc = self.weights, self.weights_noncontagion
        pts = self.field.grid.points()
        same_sign = np.sign(c) == np.sign(nc)
        larger = np.abs(c) >= np.abs(nc)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(nc != 0, c / nc, np.nan)
            hr = np.where(pts > 0, self.h / pts, np.nan)
        return {
            "fraction_magnified": float(np.mean(same_sign & larger)),
            "weight_ratio_min": float(np.nanmin(ratio)), "weight_ratio_max": float(np.nanmax(ratio)),
            "h_over_lambda_min": float(np.nanmin(hr)), "h_over_lambda_max": float(np.nanmax(hr)),
        }


def _error_estimate(changes: list[float]) -> float:
    """A-posteriori bound q/(1−q)·|Δ| on the distance to the fixed point.

    q is the largest ratio of successive changes over the last four steps.
    """
    if len(changes) < 4:
        return 0.0 if changes and changes[-1] == 0.0 else float("inf")
    last = changes[-4:]
    q = max(b / a if a > 0 else 0.0 for a, b in zip(last[:-1], last[1:]))
    return changes[-1] * q / (1.0 - q) if q < 1.0 else float("inf")


def _contraction_ok(changes: list[float]) -> bool:
    if len(changes) < 4:
        return len(changes) >= 1 and changes[-1] == 0.0
    last = changes[-4:]
    return all(b < a or b == 0.0 for a, b in zip(last[:-1], last[1:]))


def _class_weights(market, lam, utility):
    w, _, _, _ = solve_classes(market, lam, utility)
    return w / market.k


def _split_iteration(hawkes, grid, rho, coeff, base, margin, paths, seed, T_max, tol_tail, workers,
                     max_iters, tol, occupation=None):
    """Fixed point of 𝒜g − ρg = g·L(g) − base(g) by shifted splitting.

    With μ ≥ max L the map g ↦ W_{ρ+μ}[base(g) + g(μ − L(g))] keeps g positive;
    μ = 0 (used whenever L ≤ 0) is the unshifted iteration
    g ↦ W_ρ[base(g) − g L(g)].  μ is raised, and W rebuilt, if an iterate
    pushes L above it.
    """
    g = np.ones(grid.size)
    L, _, _ = coeff(g)
    top = float(L.max())
    mu = 0.0 if top + margin <= 0 else top + margin

    def build(shift):
        if shift == 0.0 and occupation is not None:
            return occupation
        return occupation_matrix(hawkes, grid, rho + shift, paths, seed, T_max, tol_tail, workers=workers)

    occ = build(mu)
    log, changes = [], []
    converged = False
    for it in range(1, max_iters + 1):
        L, _, _ = coeff(g)
        if mu > 0 and float(L.max()) + margin > mu:
            mu = 1.25 * (float(L.max()) + margin)
            occ = build(mu)
        g_new = occ.apply(base(g) + g * (mu - L))
        if not np.all(g_new > 0):
            bad = np.flatnonzero(~(g_new > 0))
            raise NumericalError(f"g lost positivity at iteration {it} at nodes {bad[:10].tolist()}; "
                                 f"last iterate min {g.min():.6g} max {g.max():.6g}; new min {g_new.min():.6g}")
        if not (np.all(np.isfinite(g_new)) and g_new.max() < DIVERGENCE_CAP):
            growth = ", ".join(f"{e['g_max']:.3g}" for e in log[-5:])
            raise NumericalError(f"g diverges: max iterate {g_new.max():.6g} at iteration {it}; "
                                 f"recent maxima [{growth}]; check that beta - r*gamma + gamma*K* stays positive "
                                 f"over the intensity box")
        change = float(np.max(np.abs(g_new - g)) / np.max(np.abs(g_new)))
        changes.append(change)
        err = _error_estimate(changes)
        log.append({"iteration": it, "sup_rel_change": change, "error_estimate": err if math.isfinite(err) else None, "g_min": float(g_new.min()),
                    "g_max": float(g_new.max()), "shift": mu})
        g = g_new
        if err < tol and _contraction_ok(changes):
            converged = True
            break
    L, h, flagged = coeff(g)
    gb = occ.apply_batches(base(g) + g * (mu - L))
    return g, gb, h, flagged, log, converged, converged and _contraction_ok(changes), occ, mu


def g_fixed_point_power(market: MarketParams, hawkes: HawkesParams, utility: UtilitySpec,
                        grid: IntensityGrid | None = None, paths: int = 1000, seed: int = 0,
                        max_iters: int = 5000, tol: float = 1e-8, T_max: float | None = None,
                        tol_tail: float = DEFAULT_TAIL_TOL, workers: int = 1,
                        occupation: Occupation | None = None) -> FixedPointResult:
    """Iterate g ↦ W[(1−γ) g^{γ/(γ−1)} − g K^γ*(h(λ; g))] from g = 1.

    For 0 < γ < 1, K^γ* ≤ 0 and this is applied as is.  For γ < 0, K^γ* ≥ 0
    and the unshifted map can overshoot into negative values, so the
    equivalent shifted form (see ``_split_iteration``) is used.
    """
    if utility.kind != "power":
        raise ValueError("power utility required")
    gam = utility.gamma
    rho = utility.beta - market.r * gam
    if rho <= 0:
        raise ValueError(f"beta - r*gamma must be > 0, got {rho:g}")
    _require_stationary(hawkes)
    grid = grid if grid is not None else default_box(hawkes, seed=seed)
    util = UtilitySpec("power", utility.beta, gam, market.r)

    def coeff(g):
        h, flagged = distortion(grid, g, hawkes)
        return K_star(market, h, util), h, flagged

    def base(g):
        return (1 - gam) * g ** (gam / (gam - 1))

    g, gb, h, flagged, log, conv, verdict, occ, mu = _split_iteration(
        hawkes, grid, rho, coeff, base, 0.0, paths, seed, T_max, tol_tail, workers, max_iters, tol, occupation)
    weights = _class_weights(market, h, util)
    plain = _class_weights(market, grid.points(), util)
    field_ = ValueField(grid, g.reshape(grid.shape), _stderr(gb).reshape(grid.shape), "g", util,
                        {"paths": occ.paths, "horizon": occ.T_max, "seed": occ.seed, "discount": rho, "shift": mu},
                        gb, {"clamped_mass": occ.clamped, "h_target_outside": flagged}, log)
    return FixedPointResult(field_, conv, verdict, log, h, flagged, weights, plain, g ** (1 / (gam - 1)), rho)


def exponential_discount(r: float, beta: float, gamma: float) -> float:
    """β − r + r log(rγ): the rate multiplying g in the exponential-utility equation."""
    return beta - r + r * math.log(r * gamma)


def g_fixed_point_exponential(market: MarketParams, hawkes: HawkesParams, utility: UtilitySpec,
                              grid: IntensityGrid | None = None, paths: int = 1000, seed: int = 0,
                              max_iters: int = 5000, tol: float = 1e-8, T_max: float | None = None,
                              tol_tail: float = DEFAULT_TAIL_TOL, workers: int = 1) -> FixedPointResult:
    """Solve 𝒜g − ρ_e g = g (r log g + K*(h)) by a shifted splitting.

    The unshifted iteration from g = 1 produces a negative iterate whenever
    K* > 0, which is the generic case, so the shift is always on.
    """
    if utility.kind != "exponential":
        raise ValueError("exponential utility required")
    r, gam = market.r, utility.gamma
    if not r * gam > 0:
        raise ValueError("exponential utility needs r*gamma > 0")
    kappa = r * gam
    rho = exponential_discount(r, utility.beta, gam)
    if rho <= 0:
        raise ValueError(f"beta - r + r*log(r*gamma) must be > 0, got {rho:g}")
    _require_stationary(hawkes)
    grid = grid if grid is not None else default_box(hawkes, seed=seed)
    util = UtilitySpec("exponential", utility.beta, gam, r)

    def coeff(g):
        h, flagged = distortion(grid, g, hawkes)
        return r * np.log(g) + K_star(market, h, util), h, flagged

    def base(g):
        return np.zeros_like(g)

    g, gb, h, flagged, log, conv, verdict, occ, mu = _split_iteration(
        hawkes, grid, rho, coeff, base, r, paths, seed, T_max, tol_tail, workers, max_iters, tol)
    dollars = _class_weights(market, h, util)
    plain = _class_weights(market, grid.points(), util)
    offset = -(np.log(g) + math.log(kappa)) / gam
    field_ = ValueField(grid, g.reshape(grid.shape), _stderr(gb).reshape(grid.shape), "g", util,
                        {"paths": occ.paths, "horizon": occ.T_max, "seed": occ.seed, "discount": rho, "shift": mu},
                        gb, {"clamped_mass": occ.clamped, "h_target_outside": flagged, "kappa": kappa}, log)
    return FixedPointResult(field_, conv, verdict, log, h, flagged, dollars, plain, offset, rho, kappa)
