"""Jump detection in return series, intensity filtering and Hawkes MLE."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import date

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize

from .errors import ConfigError, NumericalError
from .hawkes import HawkesParams, check_stationarity

TRADING_YEAR = 252
DEFAULT_WINDOW = 60
MIN_WINDOW = 20


@dataclass(frozen=True, eq=False)
class EventStream:
    """Event times per class on [start, end], in years.

    ``marks`` holds the standardized return r/σ̂ of each event.
    """

    times: tuple
    start: float
    end: float
    marks: tuple | None = None
    names: tuple = field(default=())

    def __post_init__(self):
        times = tuple(np.asarray(t, dtype=float) for t in self.times)
        if not times:
            raise ValueError("need at least one class")
        if not self.end >= self.start:
            raise ValueError("end must be >= start")
        for l, t in enumerate(times):
            if t.ndim != 1:
                raise ValueError(f"class {l}: times must be one-dimensional")
            if t.size and (np.any(np.diff(t) <= 0)):
                raise ValueError(f"class {l}: event times must be strictly increasing")
            if t.size and (t[0] < self.start or t[-1] > self.end):
                raise ValueError(f"class {l}: event times outside [{self.start}, {self.end}]")
        object.__setattr__(self, "times", times)
        if self.marks is not None:
            marks = tuple(np.asarray(z, dtype=float) for z in self.marks)
            if [z.size for z in marks] != [t.size for t in times]:
                raise ValueError("marks must match times in length")
            object.__setattr__(self, "marks", marks)
        names = tuple(self.names) or tuple(f"class_{l + 1}" for l in range(len(times)))
        object.__setattr__(self, "names", names)

    @property
    def m(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float:
        return self.end - self.start

    @property
    def counts(self) -> np.ndarray:
        return np.array([t.size for t in self.times])

    def merged(self) -> tuple[np.ndarray, np.ndarray]:
        """All events sorted by time (ties by class), as (times, classes)."""
        t = np.concatenate(self.times)
        c = np.concatenate([np.full(x.size, l, dtype=np.int64) for l, x in enumerate(self.times)])
        order = np.lexsort((c, t))
        return t[order], c[order]

    def shifted(self) -> "EventStream":
        """The same stream with the clock restarted at 0."""
        return EventStream(tuple(t - self.start for t in self.times), 0.0, self.horizon, self.marks, self.names)


def rolling_sigma(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing sample standard deviation (ddof=1) of the ``window`` values before each index.

    Entries with fewer than ``window`` predecessors are NaN.
    """
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if x.shape[0] > window:
        views = sliding_window_view(x[:-1], window, axis=0)
        out[window:] = np.std(views, axis=-1, ddof=1)
    return out


def detect_jumps(returns, window: int = DEFAULT_WINDOW, threshold: float = 3.0, negative_only: bool = True,
                 times=None, periods_per_year: float = TRADING_YEAR, names=()) -> EventStream:
    """Flag observation i of series l when it exceeds ``threshold`` trailing σ̂.

    ``returns`` is (N,) or (N, m), one column per class.  With
    ``negative_only`` an event needs r_i < −threshold·σ̂_i, otherwise
    |r_i| > threshold·σ̂_i.  Observations with σ̂ = 0 never trigger.
    Observation i sits at ``times[i]``, default i / periods_per_year.
    """
    r = np.asarray(returns, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    if r.ndim != 2:
        raise ValueError("returns must be a vector or an (N, m) array")
    if int(window) != window or window < MIN_WINDOW:
        raise ValueError(f"window must be an integer >= {MIN_WINDOW}, got {window}")
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    n = r.shape[0]
    if n <= window:
        raise ValueError(f"series has {n} observations, needs more than window={window}")
    if not np.all(np.isfinite(r)):
        i, l = np.argwhere(~np.isfinite(r))[0]
        raise ValueError(f"non-finite return at row {i}, column {l}")
    t = np.arange(n) / float(periods_per_year) if times is None else np.asarray(times, dtype=float)
    if t.shape != (n,):
        raise ValueError("times must have one entry per observation")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    sig = rolling_sigma(r, int(window))
    with np.errstate(invalid="ignore", divide="ignore"):
        z = r / sig
    live = np.isfinite(sig) & (sig > 0)
    hit = live & ((z < -threshold) if negative_only else (np.abs(z) > threshold))
    ev_t = tuple(t[hit[:, l]] for l in range(r.shape[1]))
    ev_z = tuple(z[hit[:, l], l] for l in range(r.shape[1]))
    return EventStream(ev_t, float(t[0]), float(t[-1]), ev_z, tuple(names))


def read_returns_csv(source, periods_per_year: float = TRADING_YEAR):
    """Parse a return CSV: header row, then time (ISO date or number) and one column per asset.

    Dates are mapped to observation index / ``periods_per_year``; numeric
    times are taken as years.  Returns (times, returns (N, m), names).
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    rows = [row for row in csv.reader(io.StringIO(text)) if row and any(c.strip() for c in row)]
    if len(rows) < 2:
        raise ConfigError("returns", "CSV needs a header and at least one data row")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise ConfigError("returns", "CSV needs a time column and at least one return column")
    width = len(header)
    stamps, vals = [], []
    for i, row in enumerate(body, start=2):
        if len(row) != width:
            raise ConfigError(f"returns[line {i}]", f"expected {width} fields, got {len(row)}")
        stamps.append(row[0].strip())
        try:
            vals.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise ConfigError(f"returns[line {i}]", str(exc)) from None
    try:
        t = np.array([float(s) for s in stamps])
    except ValueError:
        try:
            days = [date.fromisoformat(s) for s in stamps]
        except ValueError as exc:
            raise ConfigError("returns[time]", f"neither numeric nor ISO-8601: {exc}") from None
        if any(b <= a for a, b in zip(days[:-1], days[1:])):
            raise ConfigError("returns[time]", "dates must be strictly increasing")
        t = np.arange(len(days)) / float(periods_per_year)
    return t, np.array(vals), tuple(h.strip() for h in header[1:])


# intensity filter ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FilteredIntensity:
    """λ on a time grid: ``lam`` right-continuous, ``lam_left`` left limits."""

    times: np.ndarray
    lam: np.ndarray
    lam_left: np.ndarray
    events: np.ndarray  # (len(times), m) event counts at each time

    def to_csv(self) -> str:
        m = self.lam.shape[1]
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["time"] + [f"lambda_{l + 1}" for l in range(m)] + [f"event_{l + 1}" for l in range(m)])
        for t, lam, ev in zip(self.times, self.lam, self.events):
            w.writerow([format(float(t), ".17g")] + [format(float(x), ".17g") for x in lam] + [int(e) for e in ev])
        return out.getvalue()


@njit(cache=True)
def _filter(alpha, lam_inf, d, lam0, t0, ev_t, ev_c, out_t, lam, lam_left):
    m = alpha.size
    cur = lam0.copy()
    t_cur = t0
    e = 0
    n_ev = ev_t.size
    for i in range(out_t.size):
        t = out_t[i]
        dt = t - t_cur
        for l in range(m):
            cur[l] = lam_inf[l] + (cur[l] - lam_inf[l]) * math.exp(-alpha[l] * dt)
        t_cur = t
        for l in range(m):
            lam_left[i, l] = cur[l]
        while e < n_ev and ev_t[e] <= t:
            j = ev_c[e]
            for l in range(m):
                cur[l] += d[l, j]
            e += 1
        for l in range(m):
            lam[i, l] = cur[l]


def filter_intensity(events: EventStream, params: HawkesParams, dt: float | None = None,
                     t_grid=None) -> FilteredIntensity:
    """Intensities implied by ``events`` under ``params``, started at λ0 at ``events.start``.

    Output times are the union of the event times and either ``t_grid`` or a
    uniform grid of step ``dt`` on [start, end].  One pass: decay between
    consecutive output times, add d[:, j] for each class-j event.
    """
    if events.m != params.m:
        raise ValueError(f"events have {events.m} classes, params have {params.m}")
    ev_t, ev_c = events.merged()
    if t_grid is None:
        if dt is None:
            grid = np.array([events.start, events.end])
        else:
            if not dt > 0:
                raise ValueError("dt must be > 0")
            n = int(math.floor(events.horizon / dt + 1e-9))
            grid = events.start + dt * np.arange(n + 1)
            if grid[-1] < events.end:
                grid = np.append(grid, events.end)
    else:
        grid = np.asarray(t_grid, dtype=float)
        if grid.size and grid[0] < events.start:
            raise ValueError("t_grid starts before the event stream")
    out_t = np.union1d(grid, ev_t)
    lam = np.empty((out_t.size, params.m))
    lam_left = np.empty_like(lam)
    _filter(params.alpha, params.lambda_inf, np.ascontiguousarray(params.d), params.lambda0,
            float(events.start), ev_t, ev_c, out_t, lam, lam_left)
    counts = np.zeros((out_t.size, params.m), dtype=np.int64)
    if ev_t.size:
        np.add.at(counts, (np.searchsorted(out_t, ev_t), ev_c), 1)
    return FilteredIntensity(out_t, lam, lam_left, counts)


# maximum likelihood -------------------------------------------------------

@njit(cache=True)
def _loglik(alpha, lam_inf, d, ev_t, ev_c, T, grad_a, grad_li, grad_d):
    """Log-likelihood with λ0 = λ∞ on [0, T] and its gradient.

    A[l, j] = Σ_{class-j events s < t} e^{−α_l (t − s)}, B = ∂A/∂α_l.
    """
    m = alpha.size
    A = np.zeros((m, m))
    B = np.zeros((m, m))
    ll = 0.0
    t_prev = 0.0
    grad_a[:] = 0.0
    grad_li[:] = 0.0
    grad_d[:, :] = 0.0
    for e in range(ev_t.size):
        t = ev_t[e]
        dt = t - t_prev
        for l in range(m):
            f = math.exp(-alpha[l] * dt)
            for j in range(m):
                B[l, j] = (B[l, j] - dt * A[l, j]) * f
                A[l, j] *= f
        t_prev = t
        c = ev_c[e]
        lam = lam_inf[c]
        dlam_a = 0.0
        for j in range(m):
            lam += d[c, j] * A[c, j]
            dlam_a += d[c, j] * B[c, j]
        if lam <= 0.0:
            return -np.inf
        ll += math.log(lam)
        grad_li[c] += 1.0 / lam
        grad_a[c] += dlam_a / lam
        for j in range(m):
            grad_d[c, j] += A[c, j] / lam
        for l in range(m):
            A[l, c] += 1.0
    # compensator
    for l in range(m):
        ll -= lam_inf[l] * T
        grad_li[l] -= T
    for e in range(ev_t.size):
        s = T - ev_t[e]
        j = ev_c[e]
        for l in range(m):
            a = alpha[l]
            f = math.exp(-a * s)
            q = -math.expm1(-a * s) / a
            ll -= d[l, j] * q
            grad_d[l, j] -= q
            grad_a[l] -= d[l, j] * (s * f / a - q / a)
    return ll


def _unpack(theta, m):
    return theta[:m], theta[m:2 * m], theta[2 * m:].reshape(m, m)


def log_likelihood(events: EventStream, alpha, lambda_inf, d) -> float:
    """Point-process log-likelihood on [start, end] with λ0 = λ∞."""
    ev = events.shifted()
    t, c = ev.merged()
    m = ev.m
    ga, gl, gd = np.empty(m), np.empty(m), np.empty((m, m))
    return float(_loglik(np.atleast_1d(np.asarray(alpha, float)), np.atleast_1d(np.asarray(lambda_inf, float)),
                         np.asarray(d, float).reshape(m, m), t, c, ev.horizon, ga, gl, gd))


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    params: HawkesParams
    loglik: float
    converged: bool
    message: str
    iterations: int
    stderr: dict
    stationary: bool

    def to_dict(self) -> dict:
        return {"hawkes": self.params.to_dict(), "loglik": self.loglik, "converged": self.converged,
                "message": self.message, "iterations": self.iterations, "stderr": self.stderr,
                "stationary": self.stationary}


def _hessian(grad, theta, lo, hi):
    n = theta.size
    H = np.empty((n, n))
    for i in range(n):
        h = 1e-5 * max(1.0, abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] = min(theta[i] + h, hi[i])
        dn[i] = max(theta[i] - h, lo[i])
        H[:, i] = (grad(up) - grad(dn)) / (up[i] - dn[i])
    return 0.5 * (H + H.T)


def calibrate_mle(events: EventStream, init: HawkesParams, bounds=None, maxiter: int = 1000,
                  gtol: float = 1e-6) -> CalibrationResult:
    """Maximize the log-likelihood over (α, λ∞, d) with L-BFGS-B, λ0 tied to λ∞.

    ``bounds`` is a list of (lo, hi) pairs in the order α (m), λ∞ (m), d
    (row-major m×m); the default keeps every parameter non-negative, α and
    λ∞ strictly positive.  Standard errors come from the inverse of a
    finite-difference Hessian of the analytic gradient; parameters at a bound
    get the unconstrained curvature estimate.
    """
    if events.m != init.m:
        raise ValueError(f"events have {events.m} classes, init has {init.m}")
    m = events.m
    ev = events.shifted()
    t, c = ev.merged()
    T = ev.horizon
    if not T > 0:
        raise ValueError("event stream has zero length")
    ga, gl, gd = np.empty(m), np.empty(m), np.empty((m, m))

    def negll(theta):
        a, li, d = _unpack(theta, m)
        ll = _loglik(a, li, d, t, c, T, ga, gl, gd)
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(theta)
        return -ll, -np.concatenate([ga, gl, gd.ravel()])

    if bounds is None:
        bounds = [(1e-6, None)] * m + [(1e-10, None)] * m + [(0.0, None)] * (m * m)
    if len(bounds) != 2 * m + m * m:
        raise ValueError(f"expected {2 * m + m * m} bounds")
    theta0 = np.concatenate([init.alpha, init.lambda_inf, init.d.ravel()])
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    theta0 = np.clip(theta0, lo, hi)
    res = minimize(negll, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-13})
    theta = res.x
    a, li, d = _unpack(theta, m)
    if not np.isfinite(res.fun) or res.fun >= 1e299:
        raise NumericalError(f"likelihood not finite at the optimum: {res.message}")
    H = _hessian(lambda th: negll(th)[1], theta, lo, hi)
    try:
        cov = np.linalg.inv(H)
        se = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    except np.linalg.LinAlgError:
        se = np.full(theta.size, np.nan)
    sa, sl, sd = _unpack(se, m)
    fitted = HawkesParams(a.copy(), li.copy(), li.copy(), d.copy(), allow_nonstationary=True)
    return CalibrationResult(
        fitted, float(-res.fun), bool(res.success), str(res.message), int(res.nit),
        {"alpha": sa.tolist(), "lambda_inf": sl.tolist(), "d": sd.tolist()},
        bool(check_stationarity(fitted).is_stationary))
