"""Event-driven simulation of (N, λ) by thinning, plus asset/wealth paths.

Jump times are exact: the diffusion grid is the union of a uniform grid and
the simulated event times, so no jump is ever rounded onto a grid point.
"""
from __future__ import annotations

import csv
import io
import math
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from numba import njit

from . import rng
from .hawkes import HawkesParams, check_stationarity, stationary_mean
from .jumps import JumpLaw

# ---------------------------------------------------------------------------
# thinning kernel


@njit(cache=True, nogil=True)
def _thin(alpha, lam_inf, d, lam_start, T, u, cap):
    """Ogata thinning driven by the uniform buffer ``u``.

    Returns (n_events, n_uniforms_used, exhausted, times, classes, lam_after,
    lam_T, integral of λ, integral of λ²).
    """
    m = alpha.size
    times = np.empty(cap)
    classes = np.empty(cap, dtype=np.int64)
    lam_after = np.empty((cap, m))
    lam = lam_start.copy()
    integ = np.zeros(m)
    integ2 = np.zeros(m)
    refresh = 1.0 / alpha.max()
    t = 0.0
    k = 0
    pos = 0
    n_u = u.size
    while True:
        if pos + 3 > n_u or k >= cap:
            return k, pos, True, times, classes, lam_after, lam, integ, integ2
        bound = 0.0
        for l in range(m):
            bound += max(lam[l], lam_inf[l])
        horizon = min(t + refresh, T)
        if bound > 0.0:
            w = -math.log(1.0 - u[pos]) / bound
        else:
            w = math.inf
        pos += 1
        if t + w >= horizon:
            step = horizon - t
            for l in range(m):
                e = math.exp(-alpha[l] * step)
                delta = lam[l] - lam_inf[l]
                integ[l] += lam_inf[l] * step + delta * (1.0 - e) / alpha[l]
                integ2[l] += (lam_inf[l] ** 2 * step + 2.0 * lam_inf[l] * delta * (1.0 - e) / alpha[l]
                              + delta * delta * (1.0 - e * e) / (2.0 * alpha[l]))
                lam[l] = lam_inf[l] + delta * e
            t = horizon
            if t >= T:
                return k, pos, False, times, classes, lam_after, lam, integ, integ2
            continue
        total = 0.0
        for l in range(m):
            e = math.exp(-alpha[l] * w)
            delta = lam[l] - lam_inf[l]
            integ[l] += lam_inf[l] * w + delta * (1.0 - e) / alpha[l]
            integ2[l] += (lam_inf[l] ** 2 * w + 2.0 * lam_inf[l] * delta * (1.0 - e) / alpha[l]
                          + delta * delta * (1.0 - e * e) / (2.0 * alpha[l]))
            lam[l] = lam_inf[l] + delta * e
            total += lam[l]
        t += w
        accept = u[pos] * bound <= total
        pos += 1
        target = u[pos] * total
        pos += 1
        if not accept:
            continue
        j = 0
        acc = lam[0]
        while acc < target and j < m - 1:
            j += 1
            acc += lam[j]
        for l in range(m):
            lam[l] += d[l, j]
        times[k] = t
        classes[k] = j
        for l in range(m):
            lam_after[k, l] = lam[l]
        k += 1


@dataclass(frozen=True, eq=False)
class HawkesPath:
    """One realisation of (N, λ) on [0, T].

    ``lam_after[i]`` is the intensity right after event ``i``; between events
    the intensity is recovered exactly from the decay formula.
    """

    params: HawkesParams
    T: float
    lam_start: np.ndarray
    times: np.ndarray
    classes: np.ndarray
    marks: np.ndarray
    lam_after: np.ndarray
    lam_T: np.ndarray
    compensator: np.ndarray
    lam_sq_integral: np.ndarray

    @property
    def counts_T(self) -> np.ndarray:
        return np.bincount(self.classes, minlength=self.params.m).astype(np.int64)

    def intensity(self, t, left: bool = False) -> np.ndarray:
        """λ at times ``t``; right-continuous unless ``left`` (then λ(t−))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t, side="left" if left else "right") - 1
        anchor_t = np.where(idx >= 0, self.times[np.maximum(idx, 0)] if self.times.size else 0.0, 0.0)
        anchor = np.where((idx >= 0)[:, None],
                          self.lam_after[np.maximum(idx, 0)] if self.times.size else self.lam_start,
                          self.lam_start)
        p = self.params
        return p.lambda_inf + (anchor - p.lambda_inf) * np.exp(-p.alpha * (t - anchor_t)[:, None])

    def counts(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((t.size, self.params.m), dtype=np.int64)
        for l in range(self.params.m):
            out[:, l] = np.searchsorted(self.times[self.classes == l], t, side="right")
        return out

    def event_log(self) -> list[tuple[float, int, float]]:
        return [(float(t), int(c), float(z)) for t, c, z in zip(self.times, self.classes, self.marks)]


_MEAN_RATE: "weakref.WeakKeyDictionary[HawkesParams, float]" = weakref.WeakKeyDictionary()


def _mean_rate(params: HawkesParams) -> float:
    rate = _MEAN_RATE.get(params)
    if rate is None:
        rate = 0.0
        if check_stationarity(params).is_stationary:
            rate = float(np.sum(stationary_mean(params)))
        _MEAN_RATE[params] = rate
    return rate


def _buffer_size(params: HawkesParams, lam_start: np.ndarray, T: float) -> int:
    rate = float(np.sum(np.maximum(lam_start, params.lambda_inf))) + _mean_rate(params)
    est = 2.0 * rate * T + T * params.alpha.max() + 16
    return int(3 * min(est, 5e7)) + 64


def _run_thinning(params, lam_start, T, gen_factory):
    n = _buffer_size(params, lam_start, T)
    while True:
        u = gen_factory().random(n)
        res = _thin(params.alpha, params.lambda_inf, params.d, lam_start, float(T), u, n // 3 + 1)
        k, _, exhausted = res[0], res[1], res[2]
        if not exhausted:
            return k, res
        # the prefix of a longer draw equals the shorter draw, so retrying is deterministic
        n *= 2


def _draw_marks(classes, laws, gen):
    marks = np.zeros(classes.size)
    if classes.size == 0 or laws is None:
        return marks
    u = gen.random(classes.size)
    for l, law in enumerate(laws):
        sel = classes == l
        if np.any(sel):
            marks[sel] = law.sample(u[sel])
    return marks


def _validate(params, laws, T):
    if not T > 0:
        raise ValueError(f"horizon T must be > 0, got {T}")
    if laws is not None:
        if len(laws) != params.m:
            raise ValueError(f"expected {params.m} jump laws, got {len(laws)}")
        for law in laws:
            if not isinstance(law, JumpLaw):
                raise TypeError(f"invalid jump law {law!r}")


def _simulate_one(params, laws, T, factory: rng.StreamFactory, path, lam_start):
    k, res = _run_thinning(params, lam_start, T, lambda: factory.generator(path, rng.THINNING))
    times = res[3][:k].copy()
    classes = res[4][:k].copy()
    marks = _draw_marks(classes, laws, factory.generator(path, rng.MARKS))
    return HawkesPath(params, float(T), lam_start.copy(), times, classes, marks,
                      res[5][:k].copy(), res[6].copy(), res[7].copy(), res[8].copy())


def simulate_hawkes(
    params: HawkesParams,
    laws: Sequence[JumpLaw] | None,
    T: float,
    seed: int,
    path: int = 0,
    lam_start=None,
) -> HawkesPath:
    """Exact simulation of the event stream on [0, T] for path ``path`` of ``seed``."""
    _validate(params, laws, T)
    lam_start = params.lambda0 if lam_start is None else np.asarray(lam_start, dtype=float)
    return _simulate_one(params, laws, T, rng.StreamFactory(seed), path, lam_start)


@dataclass(frozen=True, eq=False)
class HawkesEnsemble:
    counts_T: np.ndarray        # (paths, m)
    lam_T: np.ndarray           # (paths, m)
    compensator: np.ndarray     # (paths, m) integral of λ over [0, T]
    lam_sq_integral: np.ndarray


def _chunks(n_paths: int, workers: int):
    size = max(1, -(-n_paths // max(1, workers * 4)))
    return [(s, min(n_paths, s + size)) for s in range(0, n_paths, size)]


def map_paths(fn: Callable[[rng.StreamFactory, int], object], n_paths: int, seed: int,
              workers: int = 1) -> list:
    """Apply ``fn(factory, path)`` to every path index, results in path order.

    Each chunk owns its own stream factory, so results do not depend on how
    paths are scheduled across workers.
    """
    def run(span):
        factory = rng.StreamFactory(seed)
        return [fn(factory, p) for p in range(*span)]

    spans = _chunks(n_paths, workers)
    if workers <= 1:
        parts = [run(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, spans))
    return [r for part in parts for r in part]


def simulate_hawkes_ensemble(params: HawkesParams, T: float, n_paths: int, seed: int,
                             lam_start=None, workers: int = 1) -> HawkesEnsemble:
    _validate(params, None, T)
    start = params.lambda0 if lam_start is None else np.asarray(lam_start, dtype=float)

    def one(factory, p):
        k, res = _run_thinning(params, start, T, lambda: factory.generator(p, rng.THINNING))
        counts = np.bincount(res[4][:k], minlength=params.m)
        return counts, res[6].copy(), res[7].copy(), res[8].copy()

    out = map_paths(one, n_paths, seed, workers)
    return HawkesEnsemble(*(np.array([o[i] for o in out]) for i in range(4)))


# ---------------------------------------------------------------------------
# market paths


class Policy(Protocol):
    def __call__(self, t: float, lam: np.ndarray, x: float) -> tuple[np.ndarray, float]:
        """Return (risky weights ω, consumption rate C in currency per unit time)."""


class ProportionalPolicy:
    """Weights depending on λ only and consumption proportional to wealth.

    Paths under such a policy are computed with array operations along time,
    which reproduces the step-by-step recursion exactly.
    """

    def __init__(self, weights_fn: Callable[[np.ndarray], np.ndarray], consumption_fraction: float):
        self.weights_fn = weights_fn
        self.consumption_fraction = float(consumption_fraction)

    def weights(self, lam: np.ndarray) -> np.ndarray:
        return np.asarray(self.weights_fn(np.asarray(lam, dtype=float)), dtype=float)

    def __call__(self, t, lam, x):
        return self.weights(np.asarray(lam)[None, :])[0], self.consumption_fraction * x


def constant_policy(weights, consumption_fraction: float = 0.0) -> ProportionalPolicy:
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    return ProportionalPolicy(lambda lam: np.broadcast_to(w, lam.shape[:-1] + w.shape), consumption_fraction)


@dataclass(eq=False)
class SimPath:
    times: np.ndarray
    lam: np.ndarray          # (K, m), right-continuous
    counts: np.ndarray       # (K, m)
    prices: np.ndarray       # (K, n + 1), column 0 is the riskless account
    wealth: np.ndarray       # (K,)
    weights: np.ndarray      # (K, n), applied on (t_k, t_{k+1}]
    consumption: np.ndarray  # (K,)
    events: list             # (t, class, z, jump weights ω(λ(t−)), λ(t−), λ(t))
    ruined: bool = False
    ruin_time: float | None = None
    meta: dict = field(default_factory=dict)

    def event_log(self) -> list[tuple[float, int, float]]:
        return [(e[0], e[1], e[2]) for e in self.events]

    def to_csv(self) -> str:
        m = self.lam.shape[1]
        n = self.weights.shape[1]
        header = (["t"] + [f"lambda_{l + 1}" for l in range(m)] + [f"N_{l + 1}" for l in range(m)]
                  + [f"S_{i}" for i in range(n + 1)] + ["X"] + [f"omega_{i + 1}" for i in range(n)] + ["C"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for k in range(self.times.size):
            w.writerow([fmt(self.times[k])] + [fmt(v) for v in self.lam[k]] + [str(int(c)) for c in self.counts[k]]
                       + [fmt(v) for v in self.prices[k]] + [fmt(self.wealth[k])]
                       + [fmt(v) for v in self.weights[k]] + [fmt(self.consumption[k])])
        return buf.getvalue()

    def events_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "class", "z"])
        for t, c, z in self.event_log():
            w.writerow([fmt(t), c + 1, fmt(z)])
        return buf.getvalue()


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _grid(T: float, dt: float, event_times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = int(math.ceil(T / dt - 1e-9))
    uniform = np.minimum(np.arange(n + 1) * dt, T)
    uniform[-1] = T
    times = np.union1d(uniform, event_times[event_times <= T])
    is_event = np.isin(times, event_times)
    return times, is_event


def simulate_market(market, hawkes: HawkesParams, policy: Policy, x0: float, T: float, dt: float,
                    seed: int, path: int = 0, scheme: str = "euler", hawkes_path: HawkesPath | None = None
                    ) -> SimPath:
    """Euler–Maruyama between exact jump times; multiplicative jumps at events.

    ``scheme="log"`` advances log-wealth instead (exact for piecewise-constant
    weights), which never produces diffusive ruin.  Weights used for a jump
    at time s are evaluated at the left limit (λ(s−), X(s−)).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if x0 <= 0:
        raise ValueError("initial wealth must be > 0")
    if scheme not in ("euler", "log"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if hawkes.m != market.m:
        raise ValueError("hawkes and market disagree on the number of jump classes")
    hp = hawkes_path if hawkes_path is not None else simulate_hawkes(hawkes, market.laws, T, seed, path)
    times, is_event = _grid(T, dt, hp.times)
    K = times.size
    lam_right = hp.intensity(times)
    lam_left = hp.intensity(times, left=True)
    counts = hp.counts(times)
    ev_index = np.searchsorted(hp.times, times[is_event])
    gauss = rng.substream(seed, path, rng.DIFFUSION).standard_normal((max(K - 1, 0), market.n))

    sigma = market.sigma_factor
    mu = market.r + market.R
    J = market.J
    h = np.diff(times)
    dW = gauss * np.sqrt(h)[:, None]

    # riskless and risky prices do not depend on the policy
    prices = np.empty((K, market.n + 1))
    prices[:, 0] = np.exp(market.r * times)
    growth = 1.0 + mu[None, :] * h[:, None] + dW @ sigma.T
    jump_factor = np.ones((K, market.n))
    ev_rows = np.flatnonzero(is_event)
    for row, e in zip(ev_rows, ev_index):
        jump_factor[row] = 1.0 + J[:, hp.classes[e]] * hp.marks[e]
    prices[0, 1:] = 1.0
    if K > 1:
        prices[1:, 1:] = np.cumprod(growth * jump_factor[1:], axis=0)

    if isinstance(policy, ProportionalPolicy):
        res = _wealth_vectorised(market, policy, x0, times, h, dW, lam_right, lam_left, is_event, ev_index, hp, scheme)
    else:
        res = _wealth_loop(market, policy, x0, times, h, dW, lam_right, lam_left, is_event, ev_index, hp, scheme)
    wealth, weights, consumption, events, ruin_at = res
    stop = K if ruin_at is None else ruin_at + 1
    return SimPath(times[:stop], lam_right[:stop], counts[:stop], prices[:stop], wealth[:stop], weights[:stop],
                   consumption[:stop], events, ruin_at is not None,
                   None if ruin_at is None else float(times[ruin_at]),
                   {"seed": seed, "path": path, "scheme": scheme, "dt": dt, "T": T})


def _event_record(hp, e, w_jump, lam_l, lam_r):
    return (float(hp.times[e]), int(hp.classes[e]), float(hp.marks[e]), w_jump.copy(), lam_l.copy(), lam_r.copy())


def _wealth_loop(market, policy, x0, times, h, dW, lam_right, lam_left, is_event, ev_index, hp, scheme):
    K = times.size
    wealth = np.full(K, np.nan)
    weights = np.full((K, market.n), np.nan)
    consumption = np.full(K, np.nan)
    events = []
    ev_of_row = dict(zip(np.flatnonzero(is_event), ev_index))
    x = float(x0)
    wealth[0] = x
    for k in range(K):
        if k > 0:
            w, c = weights[k - 1], consumption[k - 1]
            drift = market.r + w @ market.R
            vol = w @ market.sigma_factor @ dW[k - 1]
            if scheme == "euler":
                x = x + (x * drift - c) * h[k - 1] + x * vol
            else:
                q = w @ market.sigma @ w
                x = x * math.exp((drift - c / x - 0.5 * q) * h[k - 1] + vol)
            if k in ev_of_row:
                e = ev_of_row[k]
                w_jump, _ = policy(times[k], lam_left[k], x)
                factor = 1.0 + (w_jump @ market.J)[hp.classes[e]] * hp.marks[e]
                events.append(_event_record(hp, e, w_jump, lam_left[k], lam_right[k]))
                x = x * factor
            wealth[k] = x
            if not x > 0:
                return wealth, weights, consumption, events, k
        w, c = policy(times[k], lam_right[k], x)
        weights[k] = w
        consumption[k] = c
    return wealth, weights, consumption, events, None


def _wealth_vectorised(market, policy, x0, times, h, dW, lam_right, lam_left, is_event, ev_index, hp, scheme):
    K = times.size
    beta = policy.consumption_fraction
    weights = policy.weights(lam_right)
    jump_factor = np.ones(K)
    events = []
    ev_rows = np.flatnonzero(is_event)
    if ev_rows.size:
        w_jump = policy.weights(lam_left[ev_rows])
        cls = hp.classes[ev_index]
        exposure = np.einsum("ei,il->el", w_jump, market.J)[np.arange(ev_rows.size), cls]
        jump_factor[ev_rows] = 1.0 + exposure * hp.marks[ev_index]
        for i, (row, e) in enumerate(zip(ev_rows, ev_index)):
            events.append(_event_record(hp, e, w_jump[i], lam_left[row], lam_right[row]))
    w = weights[:-1]
    drift = market.r + w @ market.R
    vol = np.einsum("ki,ij,kj->k", w, market.sigma_factor, dW)
    if scheme == "euler":
        step = 1.0 + (drift - beta) * h + vol
    else:
        q = np.einsum("ki,ij,kj->k", w, market.sigma, w)
        step = np.exp((drift - beta - 0.5 * q) * h + vol)
    factors = np.concatenate([[x0], step * jump_factor[1:]])
    bad = np.flatnonzero(factors[1:] <= 0)
    ruin_at = None
    if bad.size:
        ruin_at = int(bad[0]) + 1
        factors[ruin_at + 1:] = 1.0
    wealth = np.cumprod(factors)
    if ruin_at is not None:
        wealth[ruin_at] = min(wealth[ruin_at], 0.0)
        wealth[ruin_at + 1:] = np.nan
        events = [ev for ev in events if ev[0] <= times[ruin_at]]
    consumption = beta * wealth
    return wealth, weights, consumption, events, ruin_at
