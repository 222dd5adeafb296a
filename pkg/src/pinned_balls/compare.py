"""
Monte Carlo versus PDE: freeze-time calibration and profile discrepancies.

Both sides are reduced to a ``ProfileSeries`` (times, mu, sigma on sites of
the unit interval).  ``calibrate`` converts MC steps to PDE time by matching
the freeze times of the two sides; ``compare`` interpolates both series to
common times and sites and reports max-norm and RMS discrepancies.
``mc_pde_experiment`` chains everything for the desk-scale reproduction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import pde, stats
from .core import DataCompatError, InitialCondition, NotFoundError, SimConfig
from .dynamics import run_ensemble

__all__ = ["ProfileSeries", "series_from_moments", "series_from_pde", "steps_per_time_unit",
           "calibrate", "compare", "mc_pde_experiment"]


@dataclass
class ProfileSeries:
    """Profiles at ``times`` on sites ``x`` of ``domain``; ``mu``/``sigma`` have shape (len(times), len(x))."""
    times: np.ndarray
    x: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    domain: tuple[float, float] = (0.0, 1.0)

    def sigma_max(self) -> np.ndarray:
        return np.nanmax(self.sigma, axis=1)

    def at(self, t: float, x: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Profiles linearly interpolated in time, then (optionally) in space."""
        ts = self.times
        if not ts[0] - 1e-12 * max(1.0, abs(ts[-1])) <= t <= ts[-1] * (1 + 1e-12) + 1e-300:
            raise DataCompatError(f"time {t:g} outside the series range [{ts[0]:g}, {ts[-1]:g}]")
        j = int(np.clip(np.searchsorted(ts, t), 1, len(ts) - 1))
        w = 0.0 if ts[j] == ts[j - 1] else (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        w = min(max(w, 0.0), 1.0)
        mu = (1 - w) * self.mu[j - 1] + w * self.mu[j]
        sg = (1 - w) * self.sigma[j - 1] + w * self.sigma[j]
        if x is not None:
            mu = np.interp(x, self.x, mu)
            sg = np.interp(x, self.x, sg)
        return mu, sg


def series_from_moments(m: stats.EnsembleMoments, steps_per_unit: float = 1.0) -> ProfileSeries:
    """MC moments on sites x~ = (x-1)/(n-1); time = step / steps_per_unit."""
    n = m.n
    return ProfileSeries(np.asarray(m.snapshot_times, dtype=np.float64) / steps_per_unit,
                         np.arange(n) / (n - 1), m.mu_hat, m.sigma_hat)


def series_from_pde(traj: pde.PdeTrajectory) -> ProfileSeries:
    return ProfileSeries(np.asarray(traj.times), traj.states[0].x, traj.mu(), traj.sigma(),
                         tuple(traj.states[0].domain))


def steps_per_time_unit(n: int) -> dict:
    """Analytic step-to-time factors.

    ``derived``: (n-2)(n-1)^2/2, from matching the one-step drift with the
    PDE (each step moves mu by (2/(n-2)) (n-1)^-2 (mu_zz - lam sigma_z)).
    ``with_extra_n``: n (n-1)^2 (n-2)/2, which keeps an extra factor n.
    """
    return {"derived": (n - 2) * (n - 1) ** 2 / 2.0, "with_extra_n": n * (n - 1) ** 2 * (n - 2) / 2.0}


def calibrate(mc: ProfileSeries, pde_side: ProfileSeries | pde.PdeTrajectory,
              threshold: float = 0.1, n: int | None = None) -> dict:
    """Match freeze times: returns MC freeze (in MC time units, e.g. steps), PDE freeze and their ratio.

    Raises DataCompatError (exit 4) if either side never freezes.
    """
    try:
        mc_freeze = pde.freeze_time(mc.times, mc.sigma_max(), threshold)
    except NotFoundError as exc:
        raise DataCompatError(f"calibration failed on the Monte Carlo side: {exc}") from exc
    try:
        if isinstance(pde_side, pde.PdeTrajectory):
            pde_freeze = pde.freeze_time(pde_side, threshold_fraction=threshold)
        else:
            pde_freeze = pde.freeze_time(pde_side.times, pde_side.sigma_max(), threshold)
    except NotFoundError as exc:
        raise DataCompatError(f"calibration failed on the PDE side: {exc}") from exc
    if pde_freeze <= 0:
        raise DataCompatError("PDE freeze time is zero; nothing to calibrate")
    out = {"threshold": threshold, "mc_freeze": mc_freeze, "pde_freeze": pde_freeze,
           "steps_per_unit": mc_freeze / pde_freeze}
    if n is not None:
        for k, v in steps_per_time_unit(n).items():
            out[f"analytic_{k}"] = v
            out[f"ratio_to_{k}"] = out["steps_per_unit"] / v
    return out


def compare(mc: ProfileSeries, ref: ProfileSeries, times, interior: bool = False) -> list[dict]:
    """Discrepancies at each time (in the common time unit) on the MC sites.

    ``interior=True`` drops the two endpoint sites.
    """
    if tuple(map(float, mc.domain)) != tuple(map(float, ref.domain)):
        raise DataCompatError(f"domains differ: {mc.domain} vs {ref.domain}")
    sl = slice(1, -1) if interior else slice(None)
    rows = []
    for t in times:
        m1, s1 = mc.at(t)
        m2, s2 = ref.at(t, mc.x)
        dm = np.abs(m1 - m2)[sl]
        ds = np.abs(s1 - s2)[sl]
        rows.append({"t": float(t), "mu_max": float(dm.max()), "sigma_max": float(ds.max()),
                     "mu_l2": float(math.sqrt(np.mean(dm**2))), "sigma_l2": float(math.sqrt(np.mean(ds**2))),
                     "mu_argmax": int(np.argmax(dm)) + (1 if interior else 0) + 1,
                     "sigma_argmax": int(np.argmax(ds)) + (1 if interior else 0) + 1})
    return rows


def mc_pde_experiment(n: int = 200, runs: int = 2000, seed: int = 2024, J: int = 801,
                      threshold: float = 0.1, fractions=(0.2, 0.6), noise_fraction: float = 0.37,
                      mirror: bool = True, dense_snapshots: int = 150, threads: int = 1,
                      max_lag: int = 50, pair_site: int | None = None) -> dict:
    """Desk-scale MC-vs-PDE reproduction with white-noise diagnostics.

    1. solve the PDE with lam = lambda_from_n(n) until it freezes;
    2. run the MC ensemble with dense snapshots (streamed moments) and find
       its freeze step;
    3. steps_per_unit = MC freeze step / PDE freeze time;
    4. rerun the same streams with snapshots at the requested fractions
       (same seeds, hence identical trajectories) and compare profiles;
    5. standardise the ``noise_fraction`` snapshot and run the diagnostics.
    """
    ic = InitialCondition(mirror=mirror)
    lam = pde.lambda_from_n(n)
    st = pde.make_state(ic, J, lam)
    t_end = 3.0 / lam
    traj0 = pde.solve(st, t_end, snapshot_every=t_end / 300)
    T = pde.freeze_time(traj0, threshold_fraction=threshold)

    factors = steps_per_time_unit(n)
    s_max = int(math.ceil(1.5 * T * factors["derived"]))
    snaps = tuple(int(round(s)) for s in np.linspace(0, s_max, dense_snapshots + 1))
    cfg1 = SimConfig(n=n, steps=s_max, runs=runs, seed=seed, initial_condition=ic, snapshot_times=snaps)
    mom1 = stats.stream_moments(cfg1, threads=threads)
    mc1 = series_from_moments(mom1)
    cal = calibrate(mc1, traj0, threshold, n=n)
    spu = cal["steps_per_unit"]

    fr = sorted(set(list(fractions) + [noise_fraction]))
    steps2 = tuple(int(round(f * cal["mc_freeze"])) for f in fr)
    cfg2 = SimConfig(n=n, steps=steps2[-1], runs=runs, seed=seed, initial_condition=ic, snapshot_times=steps2)
    trajs = run_ensemble(cfg2, threads=threads)
    mom2 = stats.estimate_moments(trajs)
    traj_pde = pde.solve(st, fr[-1] * T, snapshot_times=[f * T for f in fr])
    mc2 = series_from_moments(mom2, spu)
    ref = series_from_pde(traj_pde)
    tcmp = [s / spu for s in steps2]
    rows_all = compare(mc2, ref, tcmp)
    rows_int = compare(mc2, ref, tcmp, interior=True)
    mu0 = ic.site_profiles(n)[0]
    amplitude = 0.5 * float(mu0.max() - mu0.min())

    k_noise = fr.index(noise_fraction)
    noise = stats.residuals(trajs, mom2)
    norm = stats.normality_report(noise, snapshot=k_noise)
    lags = stats.lag_correlation_series(noise, max_lag, snapshot=k_noise)
    lags_single = stats.lag_correlation_series(noise, max_lag, snapshot=k_noise, run=0)
    x_pair = int(round(0.3 * n)) if pair_site is None else pair_site
    pairs = stats.pair_scatter(noise, x_pair, snapshot=k_noise)
    return {
        "n": n, "runs": runs, "seed": seed, "J": J, "lambda": lam, "threshold": threshold,
        "pde_freeze": T, "calibration": cal, "fractions": fr, "mc_steps": list(steps2),
        "amplitude": amplitude,
        "discrepancy": {f: r for f, r in zip(fr, rows_all)},
        "discrepancy_interior": {f: r for f, r in zip(fr, rows_int)},
        "noise_fraction": noise_fraction, "normality": norm,
        "lag_correlations": lags, "lag_correlations_run0": lags_single,
        "pair_site": x_pair, "pairs": pairs, "pair_correlation": stats.pair_correlation(pairs),
        "excluded_sites": int(noise.excluded[k_noise]),
    }
