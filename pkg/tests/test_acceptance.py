"""Acceptance criteria 1-9, one test and one verdict line each.

Run ``pytest tests/test_acceptance.py -v`` (or ``scripts/run_acceptance.sh``);
the verdicts are repeated in the terminal summary.
"""
import csv
import math
import pathlib
import time

import numpy as np
from scipy.stats import norm

from conftest import random_market
from contagion.charfn import estimate_from_samples, riccati_solve, terminal_samples
from contagion.cli import COMMANDS, run
from contagion.filter import EventStream, calibrate_mle, detect_jumps, filter_intensity
from contagion.hawkes import HawkesParams, stationary_mean
from contagion.jumps import Deterministic
from contagion.market import MarketParams
from contagion.policy import omega_bar_binomial, omega_bar_deterministic, optimal_policy, solve_classes
from contagion.simulate import simulate_hawkes, simulate_hawkes_ensemble
from contagion.utility import UtilitySpec
from contagion.value import (F_of_lambda, f_feynman_kac, f_field, feynman_kac_integral, g_fixed_point_exponential,
                             g_fixed_point_power, hjb_residual_log, transversality_check)
from oracles import (batch_integrals, binomial_tail_check, dense_sigma, intensity_double_sum, merton_power_g,
                     merton_power_g_root, poisson_cf, scalar_log_argmin)

HERE = pathlib.Path(__file__).parent
EXCITED = HawkesParams([2.0], [1.0], [1.0], [[1.0]])
FLAT = HawkesParams([2.0], [1.5], [1.5], [[0.0]])


def one_class_market(j=-1.0):
    return MarketParams(0.03, 1, 1, [0.2], [0.0], [0.06], None, [j], (Deterministic(0.1),))


def random_hawkes(g, m):
    alpha = g.uniform(0.5, 4, m)
    lam_inf = g.uniform(0.2, 2, m)
    raw = g.uniform(0, 1, (m, m))
    radius = np.max(np.abs(np.linalg.eigvals(raw / alpha[:, None])))
    d = raw * g.uniform(0.1, 0.8) / radius
    return HawkesParams(alpha, lam_inf, lam_inf, d)


def test_criterion_1_merton_limit(acceptance):
    g = np.random.default_rng(101)
    worst, t0 = 0.0, time.perf_counter()
    for trial in range(40):
        mk = random_market(g, law="deterministic" if trial % 2 else "binomial")
        cases = [(mk, np.zeros(mk.m))]
        no_jump = MarketParams(mk.r, mk.m, mk.k, mk.upsilon, mk.rho, mk.Rbar, mk.Rperp, np.zeros(mk.m), mk.laws)
        cases.append((no_jump, g.uniform(0, 5, mk.m)))
        for market, lam in cases:
            pol = optimal_policy(market, lam)
            # dense oracle: Σ⁻¹R split into class means and within-class deviations
            full = np.linalg.solve(dense_sigma(market.upsilon, market.rho, market.k), market.R)
            bar = full.reshape(market.m, market.k).mean(axis=1)
            perp = full - np.repeat(bar, market.k)
            closed_bar = market.Rbar / market.kappa1
            closed_perp = market.Rperp / np.repeat(market.kappa2, market.k)
            scale = max(1.0, float(np.max(np.abs(full))))
            worst = max(worst, float(np.max(np.abs(pol.omega_bar - closed_bar))) / scale,
                        float(np.max(np.abs(pol.omega_perp - closed_perp))) / scale,
                        float(np.max(np.abs(pol.omega_bar - bar))) / scale,
                        float(np.max(np.abs(pol.omega_perp - perp))) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 1.0
    acceptance.record("1", ok, f"80 cases (λ=0 and j=0), max |ω − Merton| = {worst:.2e} (tol 1e-10), "
                               f"{elapsed:.2f}s (limit 1s)")
    assert ok


def test_criterion_2_closed_form_vs_minimizer(acceptance):
    g = np.random.default_rng(202)
    worst_gap, worst_foc, n_configs, t0 = 0.0, 0.0, 0, time.perf_counter()
    for trial in range(100):
        law = "deterministic" if trial < 50 else "binomial"
        mk = random_market(g, law=law)
        lam = g.uniform(0, 5 * stationary_mean(random_hawkes(g, mk.m)))
        w = omega_bar_deterministic(mk, lam) if law == "deterministic" else omega_bar_binomial(mk, lam)
        pol = optimal_policy(mk, lam)
        for l, law_l in enumerate(mk.laws):
            if isinstance(law_l, Deterministic):
                atoms, probs = [mk.j[l] * law_l.zbar], [1.0]
            else:
                atoms, probs = [mk.j[l] * law_l.u, mk.j[l] * law_l.dn], [law_l.p, 1 - law_l.p]
            ref = scalar_log_argmin(mk.Rbar[l], mk.kappa1[l] / mk.k, lam[l], atoms, probs) / mk.k
            worst_gap = max(worst_gap, abs(w[l] - ref))
        worst_foc = max(worst_foc, float(np.max(np.abs(pol.foc_residual))))
        n_configs += 1
    elapsed = time.perf_counter() - t0
    ok = worst_gap <= 1e-8 and worst_foc < 1e-10 and elapsed < 10
    acceptance.record("2", ok, f"{n_configs} configs, max |closed − oracle| = {worst_gap:.2e} (tol 1e-8), "
                               f"max FOC residual = {worst_foc:.2e} (tol 1e-10), {elapsed:.1f}s")
    assert ok


def test_criterion_3_flight_to_quality(acceptance, tmp_path):
    t0 = time.perf_counter()
    outs = []
    for rep in ("a", "b"):
        assert run(["scenario", "--seed", "0", "--out", str(tmp_path / rep)]) == 0
        outs.append({p.name: p.read_bytes() for p in (tmp_path / rep).iterdir()})
    deterministic = outs[0] == outs[1]
    events = list(csv.DictReader((tmp_path / "a" / "scenario_events.csv").open(encoding="utf-8")))
    drops = np.array([[float(e[f"omega_bar_{l}"]) - float(e[f"omega_bar_left_{l}"]) for l in (1, 2)]
                      for e in events])
    rows = list(csv.DictReader((tmp_path / "a" / "scenario.csv").open(encoding="utf-8")))
    W = np.array([[float(r["omega_bar_1"]), float(r["omega_bar_2"])] for r in rows])
    N = np.array([[int(r["N_1"]), int(r["N_2"])] for r in rows])
    L = np.array([[float(r["lambda_1"]), float(r["lambda_2"])] for r in rows])
    lam_inf = np.array([0.3, 0.4])
    quiet = np.all(N[1:] == N[:-1], axis=1)
    dW = np.diff(W, axis=0)[quiet]
    excess = (L[:-1][quiet] - lam_inf) / lam_inf
    # once λ − λ∞ falls below ~1e-8 relative, successive weights agree to the last bit
    resolvable = excess > 1e-8
    strict = bool(np.all(dW[resolvable] > 0))
    never_down = bool(np.all(dW >= 0))
    elapsed = time.perf_counter() - t0
    ok = (len(events) > 0 and bool(np.all(drops < 0)) and strict and never_down and deterministic
          and elapsed < 30)
    acceptance.record("3", ok, f"{len(events)} jumps, all Δω̄ < 0: {bool(np.all(drops < 0))} "
                               f"(largest {drops.max():.3g}); strict recovery on {int(resolvable.sum())} resolvable "
                               f"steps: {strict}; no decrease on {dW.size}: {never_down}; "
                               f"byte-identical rerun: {deterministic}; {elapsed:.1f}s")
    assert ok


def test_criterion_4_hawkes(acceptance):
    t0 = time.perf_counter()
    # (a) compensator
    ens = simulate_hawkes_ensemble(EXCITED, 10.0, 10_000, seed=41)
    diff = ens.counts_T[:, 0] - ens.compensator[:, 0]
    se_a = diff.std(ddof=1) / math.sqrt(diff.size)
    ok_a = abs(diff.mean()) <= 4 * se_a
    # (b) stationary mean from batch time averages of one long path
    T = 20_000.0
    path = simulate_hawkes(EXCITED, None, T, seed=42)
    means = batch_integrals(path.times, path.lam_after[:, 0], 1.0, 2.0, 1.0, T, 40) / (T / 40)
    mbar = stationary_mean(EXCITED)[0]
    se_b = means.std(ddof=1) / math.sqrt(means.size)
    ok_b = abs(means.mean() - mbar) <= 3 * se_b
    # (c) Poisson reduction
    pois = HawkesParams([2.0], [2.0], [2.0], [[0.0]])
    counts = simulate_hawkes_ensemble(pois, 5.0, 10_000, seed=43).counts_T[:, 0]
    ok_c = abs(counts.mean() / 10 - 1) <= 0.05 and abs(counts.var(ddof=1) / 10 - 1) <= 0.05
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and elapsed < 120
    acceptance.record("4", ok, f"(a) mean N−Λ = {diff.mean():.4f}, 4·SE = {4 * se_a:.4f}: {ok_a}; "
                               f"(b) time average {means.mean():.4f} vs {mbar:.4f}, 3·SE = {3 * se_b:.4f}: {ok_b}; "
                               f"(c) Poisson mean {counts.mean():.3f} var {counts.var(ddof=1):.3f} vs 10: {ok_c}; "
                               f"{elapsed:.1f}s")
    assert ok


def test_criterion_5_charfn(acceptance):
    t0 = time.perf_counter()
    configs = {"d=0": HawkesParams([2.0], [1.5], [1.5], [[0.0]]), "rho*=0.8": HawkesParams([2.0], [1.0], [1.0], [[1.6]])}
    worst = {}
    ok = True
    for name, params in configs.items():
        worst[name] = 0.0
        for T in (0.5, 1.0, 2.0):
            counts, lam_T = terminal_samples(params, T, 20_000, seed=51)
            for u in (0.5, 1.0, 2.0):
                est = estimate_from_samples(counts, lam_T, [u], [0.0])
                gap = abs(riccati_solve(params, u, 0.0, T).phi - est.phi)
                worst[name] = max(worst[name], gap / (4 * est.stderr + 1e-8))
                ok &= gap <= 4 * est.stderr + 1e-8
    pois_gap = max(abs(riccati_solve(configs["d=0"], u, 0.0, T).phi - poisson_cf(1.5, T, u))
                   for u in (0.5, 1.0, 2.0) for T in (0.5, 1.0, 2.0))
    elapsed = time.perf_counter() - t0
    ok = ok and pois_gap <= 1e-8 and elapsed < 120
    acceptance.record("5", ok, "max gap / (4·SE + 1e-8): " + ", ".join(f"{k} {v:.2f}" for k, v in worst.items())
                      + f"; Poisson analytic gap {pois_gap:.1e} (tol 1e-8); {elapsed:.1f}s")
    assert ok


def test_criterion_6_value_function(acceptance):
    t0 = time.perf_counter()
    mk, beta = one_class_market(), 0.5
    util = UtilitySpec("log", beta)
    # (a) constant intensity: the discounted integral of F equals F(λ∞)/β, and f is its negative
    fk = feynman_kac_integral(FLAT, lambda lam: F_of_lambda(mk, util, lam), beta, [1.5], paths=500, seed=61)
    exact = F_of_lambda(mk, util, np.array([1.5])) / beta
    signed = f_feynman_kac(mk, FLAT, beta, [1.5], paths=500, seed=61)
    ok_a = (abs(fk.value - exact) <= 3 * fk.stderr + fk.tail_bound + 1e-12 * abs(exact)
            and signed.value == -fk.value)
    # (b) HJB residual for an excited m=1 config on the default grid
    f = f_field(mk, EXCITED, util, paths=2000, seed=62)
    rep = hjb_residual_log(mk, EXCITED, util, f)
    ok_b = rep.pass_fraction >= 0.95
    # (c) transversality under the optimal policy
    tr = transversality_check(mk, EXCITED, util, np.linspace(0, 40, 11), paths=2000, seed=63, f=f)
    ok_c = tr.verdict
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and elapsed < 300
    acceptance.record("6", ok, f"(a) FK {fk.value:.6f} vs {exact:.6f}, 3·SE + tail = "
                               f"{3 * fk.stderr + fk.tail_bound:.1e}: {ok_a}; (b) HJB pass fraction "
                               f"{rep.pass_fraction:.3f} over {int(np.sum(rep.evaluated))} interior nodes: {ok_b}; "
                               f"(c) |mean(T={tr.t[-1]:g})| = {abs(tr.mean[-1]):.2e} vs 3·max SE = {tr.tolerance:.2e}, "
                               f"decays {tr.decays} (ratio to own SE at T: {tr.final_ratio:.0f}): {ok_c}; "
                               f"{elapsed:.0f}s")
    assert ok


def test_criterion_7_fixed_points(acceptance):
    t0 = time.perf_counter()
    beta, r, gamma = 0.1, 0.03, -1.0
    theta_sq = (0.06 / 0.2) ** 2
    power = UtilitySpec("power", beta, gamma)
    # (a) no-jump power case on the default 17-point grid
    res_a = g_fixed_point_power(one_class_market(j=0.0), EXCITED, power, paths=1000, seed=71, max_iters=50)
    g_ref = merton_power_g(beta, r, gamma, theta_sq)[0]
    oracle_agree = abs(g_ref / merton_power_g_root(beta, r, gamma, theta_sq) - 1) < 1e-12
    err_a = float(np.max(np.abs(res_a.field.values / g_ref - 1)))
    ok_a = res_a.converged and err_a <= 1e-6 and len(res_a.iterations) <= 50 and oracle_agree
    # (b) d = 0 leaves intensities undistorted
    res_b = g_fixed_point_power(one_class_market(), FLAT, power, paths=1000, seed=72)
    ok_b = bool(np.array_equal(res_b.h, res_b.field.grid.points()))
    # (c) structural identity with jumps, power and exponential
    mk = one_class_market()
    res_c = g_fixed_point_power(mk, EXCITED, power, paths=1000, seed=73)
    expo = UtilitySpec("exponential", 0.2, 2.0, r)
    res_e = g_fixed_point_exponential(mk, EXCITED, expo, paths=1000, seed=74)
    gap_c = max(float(np.max(np.abs(res.weights - solve_classes(mk, res.h, u)[0] / mk.k)
                             / np.maximum(1.0, np.abs(res.weights))))
                for res, u in ((res_c, UtilitySpec("power", beta, gamma, r)), (res_e, expo)))
    ok_c = res_c.converged and res_e.converged and gap_c <= 1e-12
    # (d) κ = rγ enforced and reported
    ok_d = res_e.kappa == r * 2.0 and res_e.field.sidecar()["flags"]["kappa"] == r * 2.0
    # (e) magnification: reported only
    mag = res_c.magnification()
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and ok_d and elapsed < 600
    acceptance.record("7", ok, f"(a) {len(res_a.iterations)} iterations, max rel error vs g = {g_ref:.6f}: "
                               f"{err_a:.1e}: {ok_a}; (b) h = λ exactly: {ok_b}; (c) max gap {gap_c:.1e} "
                               f"(power {len(res_c.iterations)} it, exponential {len(res_e.iterations)} it): {ok_c}; "
                               f"(d) κ = {res_e.kappa:g}: {ok_d}; (e) reported: magnified at "
                               f"{mag['fraction_magnified']:.0%} of nodes, h/λ in [{mag['h_over_lambda_min']:.3f}, "
                               f"{mag['h_over_lambda_max']:.3f}]; {elapsed:.0f}s")
    assert ok


def test_criterion_8_filter(acceptance):
    t0 = time.perf_counter()
    g = np.random.default_rng(81)
    # (a) recursion against the explicit double sum
    worst_a = 0.0
    for _ in range(40):
        m = int(g.integers(1, 5))
        p = random_hawkes(g, m).with_start(g.uniform(0.1, 3, m))
        times = tuple(np.sort(g.uniform(0, 10, g.integers(0, 20))) for _ in range(m))
        ev = EventStream(times, 0.0, 10.0)
        out = filter_intensity(ev, p, dt=0.25)
        t, c = ev.merged()
        ref = intensity_double_sum(t, c, p.alpha, p.lambda_inf, p.lambda0, p.d, out.times)
        worst_a = max(worst_a, float(np.max(np.abs(out.lam - ref) / np.maximum(1.0, np.abs(ref)))))
    ok_a = worst_a <= 1e-12
    # (b) Gaussian tail rate; a 1000-day window makes σ̂ close enough to σ for the normal rate
    n, window = 200_000, 1000
    r = g.normal(0, 0.012, n)
    hits = int(detect_jumps(r, window=window, threshold=3.0).counts[0])
    ok_b, z_b = binomial_tail_check(hits, n - window, norm.cdf(-3.0))
    # (c) MLE recovery, m=1 (α=2, λ∞=1, d=1), T=2000
    truth = HawkesParams([2.0], [1.0], [1.0], [[1.0]])
    init = HawkesParams([1.0], [0.5], [0.5], [[0.3]])
    path = simulate_hawkes(truth, None, 2000.0, seed=0)
    fit = calibrate_mle(EventStream((path.times,), 0.0, 2000.0), init).params
    rel = np.abs(np.array([fit.alpha[0] / 2 - 1, fit.lambda_inf[0] - 1, fit.d[0, 0] - 1]))
    ok_c = bool(np.all(rel <= 0.15))
    # supplementary, reported only: how often T=2000 recovery lands within 15% across seeds
    within = 0
    for seed in range(1, 21):
        p2 = simulate_hawkes(truth, None, 2000.0, seed=seed)
        f2 = calibrate_mle(EventStream((p2.times,), 0.0, 2000.0), init).params
        within += bool(max(abs(f2.alpha[0] / 2 - 1), abs(f2.lambda_inf[0] - 1), abs(f2.d[0, 0] - 1)) <= 0.15)
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and elapsed < 180
    acceptance.record("8", ok, f"(a) max rel gap {worst_a:.1e} (tol 1e-12): {ok_a}; (b) {hits} hits vs "
                               f"{(n - window) * norm.cdf(-3.0):.1f} expected, z = {z_b:.2f}: {ok_b}; (c) seed 0 "
                               f"rel errors α {rel[0]:.3f} λ∞ {rel[1]:.3f} d {rel[2]:.3f}: {ok_c} "
                               f"(reported: {within}/20 further seeds within 15%); {elapsed:.0f}s")
    assert ok


SMALL = str(HERE / "data" / "small_m1.json")
RETURNS = str(HERE / "data" / "returns_m1.csv")
CLI_ARGS = {
    "simulate": ["--config", SMALL, "--paths", "20", "--horizon", "2"],
    "policy": ["--lambda", "1.0,2.0"],
    "value": ["--config", SMALL, "--paths", "200"],
    "charfn": ["--config", SMALL, "--paths", "2000"],
    "filter": [RETURNS, "--config", SMALL, "--calibrate", "--window", "60"],
    "moments": ["--config", SMALL, "--paths", "200", "--horizon", "100"],
    "scenario": [],
}


def test_criterion_9_determinism(acceptance, tmp_path):
    t0 = time.perf_counter()
    verdicts = {}
    for cmd in COMMANDS:
        runs = []
        for tag, workers in (("w1", "1"), ("w1again", "1"), ("w4", "4")):
            out = tmp_path / cmd / tag
            code = run([cmd, *CLI_ARGS[cmd], "--seed", "9", "--workers", workers, "--out", str(out)])
            runs.append((code, {p.relative_to(out).as_posix(): p.read_bytes()
                                for p in sorted(out.rglob("*")) if p.is_file()}))
        verdicts[cmd] = all(c == 0 for c, _ in runs) and bool(runs[0][1]) and runs[0][1] == runs[1][1] == runs[2][1]
    elapsed = time.perf_counter() - t0
    ok = all(verdicts.values()) and elapsed < 60
    acceptance.record("9", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in verdicts.items())
                      + f" (workers 1, 1, 4); {elapsed:.1f}s")
    assert ok
