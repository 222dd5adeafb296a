"""
Command line interface.

    pinned-balls [--config PATH] [--seed U64] [--out DIR] [--threads N] <command> [options]

Commands: simulate, estimate, diagnose, verify-theorem, verify-integrals,
solve-pde, compare, calibrate.  Exit codes: 0 success, 2 configuration
error, 3 resource cap, 4 data compatibility, 5 numerical instability.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import closedform as cf
from . import compare as cmp
from . import dynamics, pde, stats
from ._io import read_csv, write_csv, write_ndjson
from .core import (ConfigError, DataCompatError, InitialCondition, PinnedBallsError, SimConfig,
                   load_config)

MOMENTS_SCHEMA = "pinned-balls/moments"
PDE_SNAP_SCHEMA = "pinned-balls/pde-snapshots"
PDE_FUNC_SCHEMA = "pinned-balls/pde-functionals"
PDE_SMAX_SCHEMA = "pinned-balls/pde-sigma-max"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _config(args) -> SimConfig:
    if not getattr(args, "config", None):
        raise ConfigError("this command needs --config PATH")
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_moments(path, m: stats.EnsembleMoments) -> None:
    defined = np.isfinite(m.sigma_hat)
    rows = []
    for s, t in enumerate(m.snapshot_times):
        for x in range(m.n):
            sig = float(m.sigma_hat[s, x]) if defined[s, x] else ""
            rows.append((int(t), x + 1, float(m.mu_hat[s, x]), sig, int(defined[s, x])))
    write_csv(path, ("t", "x", "mu_hat", "sigma_hat", "sigma_defined"), rows, MOMENTS_SCHEMA)


def read_moments_series(path) -> cmp.ProfileSeries:
    header, rows = read_csv(path, MOMENTS_SCHEMA)
    t = np.array([float(r[0]) for r in rows])
    x = np.array([int(r[1]) for r in rows])
    mu = np.array([float(r[2]) for r in rows])
    sg = np.array([float(r[3]) if r[3] != "" else np.nan for r in rows])
    times = np.unique(t)
    n = int(x.max())
    return cmp.ProfileSeries(times, np.arange(n) / (n - 1), mu.reshape(times.size, n),
                             sg.reshape(times.size, n))


def read_pde_series(path) -> cmp.ProfileSeries:
    header, rows = read_csv(path, PDE_SNAP_SCHEMA)
    arr = np.array([[float(v) for v in r] for r in rows])
    times = np.unique(arr[:, 1])
    J = arr.shape[0] // times.size
    x = arr[:J, 0]
    return cmp.ProfileSeries(times, x, arr[:, 2].reshape(times.size, J), arr[:, 3].reshape(times.size, J),
                             (float(x[0]), float(x[-1])))


def read_sigma_max(path) -> tuple[np.ndarray, np.ndarray]:
    _, rows = read_csv(path, PDE_SMAX_SCHEMA)
    arr = np.array([[float(v) for v in r] for r in rows])
    return arr[:, 0], arr[:, 1]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    dynamics._check_storage(cfg)
    out = _out(args)
    ck = out / "checkpoints"
    if not args.no_checkpoints:
        ck.mkdir(exist_ok=True)
    acc = stats.MomentAccumulator()
    cons = []
    for tr in dynamics.iter_runs(cfg, threads=args.threads):
        acc.add(tr)
        cons.append({"run": tr.run_index, "drift_momentum": tr.drift_momentum,
                     "drift_energy": tr.drift_energy})
        if not args.no_checkpoints:
            dynamics.write_checkpoint(ck / f"run_{tr.run_index:06d}.bin", cfg, tr.run_index, tr.final())
    _write_moments(out / "moments.csv", acc.result())
    write_ndjson(out / "conservation.ndjson", cons, "pinned-balls/conservation")
    dm = max(c["drift_momentum"] for c in cons)
    de = max(c["drift_energy"] for c in cons)
    print(f"runs={cfg.runs} steps={cfg.steps} max relative drift: momentum {dm:.3e}, energy {de:.3e}")
    if acc.count == 1:
        print("single run: sigma_hat undefined (flagged in moments.csv)")
    return 0


def cmd_estimate(args) -> int:
    out = _out(args)
    if args.checkpoints:
        files = sorted(Path(args.checkpoints).glob("run_*.bin"))
        if len(files) < 2:
            raise DataCompatError("need at least two checkpoint files")
        recs = [dynamics.read_checkpoint(f) for f in files]
        digests = {r["config_hash"] for r in recs}
        steps = {r["state"].t for r in recs}
        if len(digests) != 1 or len(steps) != 1:
            raise DataCompatError("checkpoints come from different configurations or steps")
        v = np.stack([r["state"].v for r in recs])
        m = stats.EnsembleMoments((steps.pop(),), v.mean(axis=0)[None], v.std(axis=0, ddof=1)[None],
                                  len(recs), digests.pop())
    else:
        m = stats.stream_moments(_config(args), threads=args.threads)
    _write_moments(out / "moments.csv", m)
    print(f"moments of {m.runs} runs at {len(m.snapshot_times)} snapshots -> {out / 'moments.csv'}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    out = _out(args)
    trajs = dynamics.run_ensemble(cfg, threads=args.threads)
    m = stats.estimate_moments(trajs)
    noise = stats.residuals(trajs, m)
    if args.snapshot_step is not None:
        k = m.index_of(args.snapshot_step)
    else:
        k = args.snapshot_index % len(m.snapshot_times)
    rep = stats.normality_report(noise, snapshot=k)
    lags = stats.lag_correlation_series(noise, args.max_lag, snapshot=k)
    x_pair = args.pair_site or max(1, int(round(0.3 * cfg.n)))
    pairs = stats.pair_scatter(noise, x_pair, snapshot=k)
    t = m.snapshot_times[k]
    summary = {k2: v for k2, v in rep.items() if not k2.startswith("hist")}
    summary.update({"t": t, "lag_bound": 4 / math.sqrt(cfg.n - 1), "max_abs_lag": float(np.abs(lags).max()),
                    "pair_site": x_pair, "pair_correlation": stats.pair_correlation(pairs)
                    if len(pairs) > 2 else None, "excluded_sites": int(noise.excluded[k])})
    write_ndjson(out / "normality.ndjson", [summary], "pinned-balls/normality")
    edges = rep["hist_edges"]
    write_csv(out / "histogram.csv", ("lo", "hi", "count"),
              [(edges[i], edges[i + 1], c) for i, c in enumerate(rep["hist_counts"])], "pinned-balls/histogram")
    write_csv(out / "lags.csv", ("k", "corr"), [(i + 1, float(c)) for i, c in enumerate(lags)],
              "pinned-balls/lag-correlation")
    write_csv(out / "scatter.csv", ("run", "w_x", "w_x1"),
              [(i, float(p[0]), float(p[1])) for i, p in enumerate(pairs)], "pinned-balls/scatter")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_verify_theorem(args) -> int:
    out = _out(args)
    prof = cf.PolynomialProfile(tuple(args.mu_coef), tuple(args.sigma_coef))
    seed = 0 if args.seed is None else args.seed
    reps = []
    for n in args.n:
        x = args.site if args.site else (n + 1) // 2
        rep = cf.verify_theorem(prof, n, x, args.samples, seed=seed, theta_nodes=args.theta_nodes,
                                control_variates=not args.no_control_variates, threads=args.threads)
        reps.append(rep)
        print(f"n={n} x={x}: drift err {rep.drift_error:+.3e} (se {rep.drift_se:.1e}), "
              f"energy err {rep.energy_error:+.3e} (se {rep.energy_se:.1e})")
    write_ndjson(out / "drift.ndjson", [r.as_record() for r in reps], "pinned-balls/drift-report")
    rows = [(r.n, r.x, r.empirical_drift, r.rhs_drift, r.drift_error, r.drift_se, r.drift_error / r.drift_se,
             r.empirical_energy_drift, r.rhs_energy, r.energy_error, r.energy_se, r.energy_error / r.energy_se)
            for r in reps]
    write_csv(out / "drift_summary.csv",
              ("n", "x", "drift", "drift_rhs", "drift_err", "drift_se", "drift_z",
               "energy", "energy_rhs", "energy_err", "energy_se", "energy_z"), rows, "pinned-balls/drift-summary")
    return 0


def integral_suite(samples: int = 10**6, seed: int = 0) -> list[dict]:
    """Run every closed-form check; one record per check with a 'pass' flag."""
    from .core import RngStream
    recs = []
    rng = RngStream(seed, 2**32 + 101)
    # circle gaps
    for a in (0.0, 1.0):
        for r in (1.0, 2.0):
            mc = cf.circle_gap_mc(a, r, samples, rng.substream(int(10 * a + r)))
            z1 = (mc["gap"] - cf.expected_gap(r)) / mc["gap_se"]
            se2 = mc["sq_gap_se"]
            z2 = (mc["sq_gap"] - cf.expected_sq_gap(a, r)) / se2 if se2 > 0 else 0.0
            ok2 = abs(z2) <= 4 if se2 > 0 else abs(mc["sq_gap"]) < 1e-12
            recs.append({"check": "circle_gap", "a": a, "r": r, "z_gap": z1, "z_sq_gap": z2,
                         "pass": bool(abs(z1) <= 4 and ok2)})
    # P closed form and moments
    recs.append({"check": "P_origin", "value": cf.P_closed(0, 0, 0), "expected": (2 * math.pi) ** 2 / 2,
                 "pass": cf.P_closed(0, 0, 0) == (2 * math.pi) ** 2 / 2})
    worst = 0.0
    for q in np.array(np.meshgrid(*[(0.0, 0.5, 1.0)] * 3)).reshape(3, -1).T:
        exact = cf.P_closed(*q)
        worst = max(worst, abs(cf.P_quad(*q)[0] - exact) / exact)
    recs.append({"check": "P_grid", "max_rel_err": worst, "pass": worst <= 1e-6})
    for w in cf.MOMENT_NAMES:
        rel = abs(cf.gaussian_moment_quad(w) / cf.gaussian_moment(w) - 1)
        recs.append({"check": "moment", "which": w, "rel_err": rel, "pass": rel <= 1e-6})
    # I1/I2 by two routes
    for i in range(5):
        g = np.random.default_rng(seed + i)
        t = cf.GaussianTriple(tuple(g.uniform(-1, 1, 3)), tuple(g.uniform(0.5, 2, 3)))
        for name, fn in (("I1", cf.I1), ("I2", cf.I2)):
            q, qe = fn(t)
            m, me = fn(t, "mc", samples=samples, rng=rng.substream(100 + i))
            z = (m - q) / math.hypot(me, qe)
            recs.append({"check": f"{name}_mc_vs_quad", "alpha": t.alpha, "beta": t.beta, "z": z,
                         "pass": abs(z) <= 4})
    # expansion error scaling
    for prof in ASYM_PROFILES:
        recs.append(asym_scaling(prof, 0.7))
    return recs


ASYM_PROFILES = ((1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 0.0), (1.0, 1.0, 0.5, 0.3),
                 (2.0, -1.0, 1.0, 0.5), (0.5, 0.5, -1.0, 1.0))
ASYM_EPS = (0.02, 0.04, 0.08)


def asym_scaling(profile, alpha_bar: float = 0.0, eps_values=ASYM_EPS) -> dict:
    """Errors of I1_asym / I2_asym against quadrature and their C = err/eps^3 spread."""
    d1, d2, g1, g2 = profile
    e1, e2 = [], []
    for eps in eps_values:
        ex = cf.EpsExpansion(alpha_bar, 1.0, d1, d2, g1, g2, eps)
        t = ex.triple()
        e1.append(abs(cf.I1(t)[0] - cf.I1_asym(ex)))
        e2.append(abs(cf.I2(t)[0] - cf.I2_asym(ex)))
    eps = np.array(eps_values)
    rec = {"check": "asym_scaling", "profile": list(profile), "alpha_bar": alpha_bar, "eps": list(eps_values),
           "err_I1": e1, "err_I2": e2}
    ok = True
    for key, e in (("I1", e1), ("I2", e2)):
        e = np.array(e)
        if np.all(e < 1e-13):
            rec[f"C_{key}"] = 0.0
            rec[f"C_spread_{key}"] = 1.0
            continue
        c = e / eps**3
        order = np.polyfit(np.log(eps), np.log(np.maximum(e, 1e-300)), 1)[0]
        rec[f"C_{key}"] = c.tolist()
        rec[f"C_spread_{key}"] = float(c.max() / c.min())
        rec[f"order_{key}"] = float(order)
        ok = ok and c.max() / c.min() <= 3.0
    rec["pass"] = bool(ok)
    return rec


def cmd_verify_integrals(args) -> int:
    out = _out(args)
    recs = integral_suite(args.samples, 0 if args.seed is None else args.seed)
    write_ndjson(out / "integrals.ndjson", recs, "pinned-balls/integrals")
    for r in recs:
        print(("PASS " if r["pass"] else "FAIL ") + r["check"])
    return 0


def cmd_solve_pde(args) -> int:
    out = _out(args)
    lam = args.lam if args.lam is not None else pde.lambda_from_n(args.n)
    st = pde.make_state(InitialCondition(mirror=args.mirror), args.J, lam, coords=args.coords,
                        b_form=args.b_form)
    t_end = args.t_end
    traj = pde.solve(st, t_end, snapshot_every=args.snapshot_every or t_end / 50, c_stab=args.c_stab)
    rows = []
    for s in traj.states:
        sig = pde.sigma_field(s)
        rows.extend((float(x), float(s.time), float(m), float(g)) for x, m, g in zip(s.x, s.field1, sig))
    write_csv(out / "pde_snapshots.csv", ("x", "t", "mu", "sigma"), rows, PDE_SNAP_SCHEMA)
    write_csv(out / "pde_functionals.csv", ("t", "M", "E", "F"),
              [(float(t), f.M, f.E_total, f.F) for t, f in zip(traj.times, traj.funcs)], PDE_FUNC_SCHEMA)
    stride = max(1, traj.step_times.size // 20000)
    write_csv(out / "pde_sigma_max.csv", ("t", "sigma_max"),
              [(float(a), float(b)) for a, b in zip(traj.step_times[::stride], traj.sigma_max[::stride])],
              PDE_SMAX_SCHEMA)
    meta = dict(traj.meta)
    try:
        meta["freeze_time"] = pde.freeze_time(traj, threshold_fraction=args.threshold)
    except PinnedBallsError:
        meta["freeze_time"] = None
    meta["threshold"] = args.threshold
    (out / "pde_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"lambda={lam:.4f} J={args.J} dt={meta['dt']:.3e} freeze_time={meta['freeze_time']}")
    return 0


def cmd_calibrate(args) -> int:
    out = _out(args)
    mc = read_moments_series(args.mc_moments)
    t, smax = read_sigma_max(args.pde_sigma_max)
    ref = cmp.ProfileSeries(t, np.zeros(1), np.zeros((t.size, 1)), smax[:, None])
    cal = cmp.calibrate(mc, ref, args.threshold, n=mc.x.size)
    (out / "calibration.json").write_text(json.dumps(cal, indent=2, sort_keys=True) + "\n")
    print(json.dumps(cal, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    out = _out(args)
    cal = json.loads(Path(args.calibration).read_text())
    for key in ("steps_per_unit", "pde_freeze"):
        if key not in cal or cal[key] is None:
            raise DataCompatError(f"calibration file lacks {key!r}")
    mc = read_moments_series(args.mc_moments)
    mc.times = mc.times / cal["steps_per_unit"]
    ref = read_pde_series(args.pde_snapshots)
    rows = cmp.compare(mc, ref, [f * cal["pde_freeze"] for f in args.fractions], interior=args.interior)
    for f, r in zip(args.fractions, rows):
        r["fraction"] = f
    write_ndjson(out / "comparison.ndjson", rows, "pinned-balls/comparison")
    for r in rows:
        print(f"t={r['t']:.4g} ({r['fraction']}T): |dmu|max={r['mu_max']:.4f} |dsigma|max={r['sigma_max']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config (SimConfig fields)")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="override the master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (created if absent)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")

    p = argparse.ArgumentParser(prog="pinned-balls", parents=[common], description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run an ensemble, write checkpoints and moments")
    s.add_argument("--no-checkpoints", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="ensemble moments (streamed or from checkpoints)")
    s.add_argument("--checkpoints", help="directory of run_*.bin files")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("diagnose", parents=[common], help="white-noise diagnostics at one snapshot")
    s.add_argument("--snapshot-index", type=int, default=-1)
    s.add_argument("--snapshot-step", type=int)
    s.add_argument("--max-lag", type=int, default=50)
    s.add_argument("--pair-site", type=int)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("verify-theorem", parents=[common], help="one-step drift vs the analytic right-hand sides")
    s.add_argument("--n", type=int, nargs="+", default=[51, 101, 201])
    s.add_argument("--samples", type=int, default=10**7)
    s.add_argument("--site", type=int)
    s.add_argument("--mu-coef", type=float, nargs="+", default=[0.0, 0.0, 1.0])
    s.add_argument("--sigma-coef", type=float, nargs="+", default=[0.2, 0.1])
    s.add_argument("--theta-nodes", type=int, default=48)
    s.add_argument("--no-control-variates", action="store_true")
    s.set_defaults(func=cmd_verify_theorem)

    s = sub.add_parser("verify-integrals", parents=[common], help="gap, I1/I2, P and moment checks")
    s.add_argument("--samples", type=int, default=10**6)
    s.set_defaults(func=cmd_verify_integrals)

    s = sub.add_parser("solve-pde", parents=[common], help="integrate the (mu, w) system")
    s.add_argument("--n", type=int, default=1000, help="ball count defining lambda")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--J", type=int, default=3201)
    s.add_argument("--t-end", type=float, default=5e-4)
    s.add_argument("--coords", choices=("A", "B", "C"), default="B")
    s.add_argument("--mirror", action="store_true", help="use the decreasing initial profile")
    s.add_argument("--snapshot-every", type=float)
    s.add_argument("--threshold", type=float, default=1e-3)
    s.add_argument("--c-stab", type=float, default=0.2)
    s.add_argument("--b-form", choices=("consistent", "literal"), default="consistent",
                   help="coupling in the w system: sqrt(2w) (consistent) or sqrt(w) (literal)")
    s.set_defaults(func=cmd_solve_pde)

    s = sub.add_parser("calibrate", parents=[common], help="match MC and PDE freeze times")
    s.add_argument("--mc-moments", required=True)
    s.add_argument("--pde-sigma-max", required=True)
    s.add_argument("--threshold", type=float, default=0.1)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("compare", parents=[common], help="MC vs PDE profile discrepancies")
    s.add_argument("--mc-moments", required=True)
    s.add_argument("--pde-snapshots", required=True)
    s.add_argument("--calibration", required=True)
    s.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.2, 0.4, 0.6, 0.8, 0.99])
    s.add_argument("--interior", action="store_true", help="exclude the two endpoint sites")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "."), ("threads", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except PinnedBallsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
