"""Command-line front end: ``contagion <command> [options]``.

Every command reads one JSON config (default: the bundled two-asset
example), takes one seed and writes into one output directory.  Each run
leaves ``<command>.meta.json`` next to its artifacts with the resolved
config, the options and the tool version.  Exit status is 0 on success, 2 for
invalid input and 1 for numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys

import numpy as np

from . import __version__
from ._io import Writer, load_config, parse_floats, parse_grid
from .charfn import estimate_from_samples, riccati_solve, terminal_samples
from .errors import ConfigError, NumericalError
from .filter import (DEFAULT_WINDOW, calibrate_mle, detect_jumps, filter_intensity, read_returns_csv)
from .grid import IntensityGrid, default_box
from .hawkes import HawkesParams, check_stationarity, stationary_mean
from .policy import optimal_policy, solve_classes, weights_function
from .simulate import ProportionalPolicy, fmt, simulate_hawkes_ensemble, simulate_market
from .value import (f_field, g_fixed_point_exponential, g_fixed_point_power, hjb_residual_log,
                    transversality_check)

COMMANDS = ("simulate", "policy", "value", "charfn", "filter", "moments", "scenario")
DEFAULT_PATHS = {"simulate": 1, "policy": 0, "value": 1000, "charfn": 2000, "filter": 0, "moments": 20,
                 "scenario": 1}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (default: bundled two-asset example)")
    common.add_argument("--seed", type=int, default=0, metavar="N")
    common.add_argument("--out", default="out", metavar="DIR")
    common.add_argument("--paths", type=int, metavar="N")
    common.add_argument("--horizon", type=float, metavar="T")
    common.add_argument("--dt", type=float, metavar="X")
    common.add_argument("--grid", metavar="SPEC", help="N, N1xN2, or lo:hi:N[,lo:hi:N]")
    common.add_argument("--tol", type=float, metavar="X")
    common.add_argument("--lambda", dest="lam", metavar="L1[,L2...]", help="intensity vector for `policy`")
    common.add_argument("--workers", type=int, default=1, metavar="N")
    common.add_argument("--calibrate", action="store_true", help="`filter`: fit parameters by MLE first")
    common.add_argument("--threshold", type=float, default=3.0, metavar="X")
    common.add_argument("--window", type=int, default=DEFAULT_WINDOW, metavar="N")

    parser = argparse.ArgumentParser(prog="contagion", description="Portfolio choice under Hawkes contagion.")
    parser.add_argument("--version", action="version", version=f"contagion {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    helps = {
        "simulate": "simulate market paths under the log-optimal policy",
        "policy": "optimal weights at one intensity vector and on a grid",
        "value": "value function on a grid with residual and convergence reports",
        "charfn": "Riccati vs Monte Carlo characteristic function",
        "filter": "detect jumps in a return CSV and filter intensities",
        "moments": "stationary mean and ergodic check",
        "scenario": "two-class contagion episode: intensities, weights, prices",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "filter":
            p.add_argument("input", metavar="RETURNS_CSV")
    return parser


def _options(args) -> dict:
    """Options that can influence results (everything but --out and --workers)."""
    keep = ("seed", "paths", "horizon", "dt", "grid", "tol", "lam", "calibrate", "threshold", "window")
    out = {k: getattr(args, k) for k in keep}
    out["lambda"] = out.pop("lam")
    if args.command == "filter":
        out["input"] = args.input
    return out


def _check_args(args):
    if not 0 <= args.seed < 2 ** 64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    if args.paths is None:
        args.paths = DEFAULT_PATHS[args.command]
    elif args.paths < 1:
        raise ConfigError("paths", "must be >= 1")
    for name in ("horizon", "dt", "tol"):
        val = getattr(args, name)
        if val is not None and not (math.isfinite(val) and val > 0):
            raise ConfigError(name, f"must be > 0, got {val}")
    if args.workers < 1:
        raise ConfigError("workers", "must be >= 1")


def _rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else fmt(v))
                    for v in row])
    return buf.getvalue()


def _log_policy(cfg):
    return ProportionalPolicy(weights_function(cfg.market), cfg.utility.beta)


# commands -------------------------------------------------------------------

def cmd_simulate(args, cfg, out: Writer):
    sim = cfg.simulation
    T = args.horizon or sim["horizon"]
    dt = args.dt or sim["dt"]
    if cfg.utility.kind != "log":
        raise ConfigError("utility.kind", "simulate runs the log-optimal policy; set utility.kind to 'log'")
    policy = _log_policy(cfg)
    summary = []
    for p in range(args.paths):
        sp = simulate_market(cfg.market, cfg.hawkes, policy, sim["x0"], T, dt, args.seed, p, sim["scheme"])
        out.text(f"path_{p}.csv", sp.to_csv())
        out.text(f"events_{p}.csv", sp.events_csv())
        summary.append({"path": p, "events": len(sp.events), "final_wealth": float(sp.wealth[-1]),
                        "ruined": sp.ruined, "ruin_time": sp.ruin_time})
    return {"horizon": T, "dt": dt, "paths": summary}


def _policy_box(hawkes: HawkesParams, n: int = 17) -> IntensityGrid:
    mean = stationary_mean(hawkes)
    hi = np.maximum(3 * mean, hawkes.lambda_inf + 3 * hawkes.d.max(axis=1))
    return IntensityGrid(np.zeros(hawkes.m), hi, (n,) * hawkes.m)


def cmd_policy(args, cfg, out: Writer):
    if args.lam is not None:
        lam = parse_floats(args.lam, "lambda")
        if lam.shape != (cfg.hawkes.m,) or np.any(lam < 0):
            raise ConfigError("lambda", f"expected {cfg.hawkes.m} non-negative intensities")
    elif cfg.lam is not None:
        lam = cfg.lam
    else:
        lam = stationary_mean(cfg.hawkes)
    res = optimal_policy(cfg.market, lam, cfg.utility)
    merton = cfg.market.Rbar / cfg.market.kappa1
    body = res.to_dict()
    body["merton_omega_bar"] = merton
    out.json("policy.json", body)
    grid = parse_grid(args.grid, _policy_box(cfg.hawkes))
    pts = grid.points()
    w, resid, _, _ = solve_classes(cfg.market, pts, cfg.utility)
    m = cfg.hawkes.m
    header = [f"lambda_{l + 1}" for l in range(m)] + [f"omega_bar_{l + 1}" for l in range(m)]
    out.text("policy_grid.csv", _rows(header, np.hstack([pts, w / cfg.market.k])))
    return {"lambda": lam, "omega_bar": res.omega_bar, "max_grid_residual": float(np.max(np.abs(resid)))}


def cmd_value(args, cfg, out: Writer):
    kind = cfg.utility.kind
    box = default_box(cfg.hawkes, seed=args.seed)
    grid = parse_grid(args.grid, box)
    m = cfg.hawkes.m
    if kind == "log":
        f = f_field(cfg.market, cfg.hawkes, cfg.utility, grid, paths=args.paths, seed=args.seed,
                    workers=args.workers)
        out.text("value.csv", f.to_csv())
        results = {"field": f.sidecar()}
        if all(c >= 5 for c in grid.counts):
            rep = hjb_residual_log(cfg.market, cfg.hawkes, cfg.utility, f)
            header = ([f"lambda_{l + 1}" for l in range(m)]
                      + ["residual", "budget", "stderr", "interp_error", "fd_error", "evaluated", "passed"])
            rows = [list(p) + [r, b, s, i, d, str(bool(e)), str(bool(ok))] for p, r, b, s, i, d, e, ok in
                    zip(rep.points, rep.residual, rep.budget, rep.stderr, rep.interp_error, rep.fd_error,
                        rep.evaluated, rep.passed)]
            out.text("residual.csv", _rows(header, rows))
            results["residual_pass_fraction"] = rep.pass_fraction
        T = args.horizon or 20.0 / cfg.utility.beta
        t_grid = np.linspace(0.0, T, 11)
        tr = transversality_check(cfg.market, cfg.hawkes, cfg.utility, t_grid, min(args.paths, 500), args.seed,
                                  f=f, x0=cfg.simulation["x0"], dt=args.dt or min(0.05, T / 200),
                                  scheme="log", workers=args.workers)
        out.text("transversality.csv", _rows(["t", "mean", "stderr"], zip(tr.t, tr.mean, tr.stderr)))
        results["transversality"] = tr.to_dict()
        return results
    solver = g_fixed_point_power if kind == "power" else g_fixed_point_exponential
    kw = {"tol": args.tol} if args.tol else {}
    res = solver(cfg.market, cfg.hawkes, cfg.utility, grid, paths=args.paths, seed=args.seed,
                 workers=args.workers, **kw)
    out.text("value.csv", res.field.to_csv())
    pts = grid.points()
    header = ([f"lambda_{l + 1}" for l in range(m)] + [f"h_{l + 1}" for l in range(m)]
              + [f"omega_star_{l + 1}" for l in range(m)] + [f"omega_noncontagion_{l + 1}" for l in range(m)]
              + ["consumption_fraction" if kind == "power" else "consumption_offset"])
    out.text("value_policy.csv", _rows(header, np.hstack([pts, res.h, res.weights, res.weights_noncontagion,
                                                            res.consumption[:, None]])))
    results = {"field": res.field.sidecar(), "converged": res.converged,
               "contraction_verdict": res.contraction_verdict, "discount": res.discount,
               "magnification": res.magnification(), "units": "dollars" if kind == "exponential" else "wealth fractions"}
    if kind == "exponential":
        results["kappa"] = res.kappa
    return results


def cmd_charfn(args, cfg, out: Writer):
    hawkes = cfg.hawkes
    T_max = args.horizon or 1.0
    tol = args.tol or 1e-10
    us = (0.5, 1.0, 2.0)
    Ts = (T_max / 3, 2 * T_max / 3, T_max)
    v = np.zeros(hawkes.m)
    rows, worst = [], 0.0
    for T in Ts:
        counts, lam_T = terminal_samples(hawkes, T, args.paths, args.seed, args.workers)
        for u in us:
            rc = riccati_solve(hawkes, np.full(hawkes.m, u), v, T, tol)
            mc = estimate_from_samples(counts, lam_T, np.full(hawkes.m, u), v)
            diff = abs(rc.phi - mc.phi)
            z = diff / mc.stderr if mc.stderr > 0 else (0.0 if diff == 0 else math.inf)
            worst = max(worst, z)
            rows.append([u, T, rc.phi.real, rc.phi.imag, mc.phi.real, mc.phi.imag, mc.stderr, diff])
    out.text("charfn.csv", _rows(["u", "T", "re_riccati", "im_riccati", "re_mc", "im_mc", "mc_stderr", "abs_diff"],
                                 rows))
    return {"paths": args.paths, "max_diff_over_stderr": worst, "v": v}


def cmd_filter(args, cfg, out: Writer):
    t, r, names = read_returns_csv(args.input)
    if r.shape[1] != cfg.hawkes.m:
        raise ConfigError("hawkes.m", f"returns file has {r.shape[1]} series, config has m={cfg.hawkes.m}")
    try:
        events = detect_jumps(r, args.window, args.threshold, times=t, names=names)
    except ValueError as exc:
        raise ConfigError("returns", str(exc)) from None
    params = cfg.hawkes
    results = {"events_per_class": events.counts, "names": list(names)}
    if args.calibrate:
        cal = calibrate_mle(events, params)
        out.json("calibration.json", cal.to_dict())
        params = cal.params
        results["calibration"] = {"converged": cal.converged, "loglik": cal.loglik, "stationary": cal.stationary}
    fi = filter_intensity(events, params, dt=args.dt, t_grid=None if args.dt else t)
    out.text("intensity.csv", fi.to_csv())
    ev_t, ev_c = events.merged()
    marks = {(float(x), int(c)): float(z) for c in range(events.m) for x, z in zip(events.times[c], events.marks[c])}
    out.text("events.csv", _rows(["t", "class", "z"], [[x, int(c) + 1, marks[(float(x), int(c))]]
                                                      for x, c in zip(ev_t, ev_c)]))
    return results


def cmd_moments(args, cfg, out: Writer):
    hawkes = cfg.hawkes
    rep = check_stationarity(hawkes)
    mean = stationary_mean(hawkes)
    T = args.horizon or 500.0 / float(np.min(hawkes.alpha))
    ens = simulate_hawkes_ensemble(hawkes.with_start(mean), T, args.paths, args.seed, workers=args.workers)
    avg = ens.compensator / T
    n = avg.shape[0]
    se = avg.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(hawkes.m, np.nan)
    tavg = avg.mean(axis=0)
    z = np.abs(tavg - mean) / se
    mart = ens.counts_T - ens.compensator
    mart_se = mart.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(hawkes.m, np.nan)
    body = {
        "stationary_mean": mean, "gamma_matrix": rep.gamma_matrix,
        "spectral_radius_of_alpha_inv_d": rep.spectral_radius_of_alpha_inv_d, "is_stationary": rep.is_stationary,
        "ergodic_check": {"horizon": T, "paths": n, "time_average": tavg, "stderr": se, "z": z,
                          "within_3_stderr": bool(np.all(z <= 3))},
        "compensator_check": {"mean_N_minus_integral": mart.mean(axis=0), "stderr": mart_se},
    }
    out.json("moments.json", body)
    return {"within_3_stderr": body["ergodic_check"]["within_3_stderr"]}


def cmd_scenario(args, cfg, out: Writer):
    if cfg.utility.kind != "log":
        raise ConfigError("utility.kind", "scenario runs the log-optimal policy; set utility.kind to 'log'")
    sim = cfg.simulation
    T = args.horizon or sim["horizon"]
    dt = args.dt or sim["dt"]
    market, m = cfg.market, cfg.hawkes.m
    sp = simulate_market(market, cfg.hawkes, _log_policy(cfg), sim["x0"], T, dt, args.seed, 0, sim["scheme"])
    wbar = solve_classes(market, sp.lam, cfg.utility)[0] / market.k
    # one representative asset per class
    prices = sp.prices[:, 1 + market.k * np.arange(m)]
    header = (["t"] + [f"lambda_{l + 1}" for l in range(m)] + [f"omega_bar_{l + 1}" for l in range(m)]
              + [f"S_{l + 1}" for l in range(m)] + [f"N_{l + 1}" for l in range(m)])
    rows = [[t] + list(lam) + list(w) + list(s) + [int(c) for c in n]
            for t, lam, w, s, n in zip(sp.times, sp.lam, wbar, prices, sp.counts)]
    out.text("scenario.csv", _rows(header, rows))
    ev_rows = []
    for t, c, z, _, lam_l, lam_r in sp.events:
        wl = solve_classes(market, lam_l, cfg.utility)[0] / market.k
        wr = solve_classes(market, lam_r, cfg.utility)[0] / market.k
        ev_rows.append([t, int(c) + 1, z] + list(lam_l) + list(lam_r) + list(wl) + list(wr))
    ev_header = (["t", "class", "z"] + [f"lambda_left_{l + 1}" for l in range(m)] + [f"lambda_{l + 1}" for l in range(m)]
                 + [f"omega_bar_left_{l + 1}" for l in range(m)] + [f"omega_bar_{l + 1}" for l in range(m)])
    out.text("scenario_events.csv", _rows(ev_header, ev_rows))
    return {"horizon": T, "dt": dt, "events": len(sp.events), "final_wealth": float(sp.wealth[-1]),
            "ruined": sp.ruined}


HANDLERS = {"simulate": cmd_simulate, "policy": cmd_policy, "value": cmd_value, "charfn": cmd_charfn,
            "filter": cmd_filter, "moments": cmd_moments, "scenario": cmd_scenario}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _check_args(args)
        needs_market = args.command not in ("charfn", "filter", "moments")
        cfg = load_config(args.config, require_market=needs_market)
        out = Writer(args.out, args.command, cfg.resolved(), _options(args))
        results = HANDLERS[args.command](args, cfg, out)
        out.sidecar(results)
        if results.get("converged") is False:
            last = results["field"]["iterations"][-1]
            raise NumericalError(f"fixed point not converged after {last['iteration']} iterations "
                                 f"(last sup relative change {last['sup_rel_change']:.3g}); outputs kept in {args.out}")
    except ConfigError as exc:
        print(f"contagion {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"contagion {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"contagion {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
