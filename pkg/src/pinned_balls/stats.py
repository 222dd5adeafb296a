"""
Ensemble moments and white-noise diagnostics.

The ansatz under test is v(x, t) = mu(x, t) + sigma(x, t) W(x, t) with W
i.i.d. standard normal.  ``estimate_moments`` gives (mu_hat, sigma_hat)
across runs; ``residuals`` standardises every run into a ``NoiseField``;
the remaining functions test that field for normality, spatial
decorrelation and rotational symmetry of neighbouring pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import DataCompatError, DomainError, InsufficientDataError, SimConfig, erf, log_beta
from .dynamics import Trajectory, iter_runs

__all__ = [
    "EnsembleMoments", "NoiseField", "MomentAccumulator",
    "estimate_moments", "stream_moments", "residuals",
    "lag_correlation", "lag_correlation_series", "empirical_corr_density",
    "normality_report", "pair_scatter", "pair_correlation", "moments_rows",
    "ks_statistic", "ks_critical", "sigma_floor", "HIST_EDGES",
]


@dataclass
class EnsembleMoments:
    """mu_hat and sigma_hat on an (n_snapshots, n) grid."""
    snapshot_times: tuple[int, ...]
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    runs: int
    config_hash: bytes | None = None

    @property
    def n(self) -> int:
        return self.mu_hat.shape[1]

    def index_of(self, t: int) -> int:
        try:
            return self.snapshot_times.index(int(t))
        except ValueError:
            raise KeyError(f"no snapshot at step {t}") from None


class MomentAccumulator:
    """Streaming Welford accumulator over runs (merge order = run order)."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None
        self.times = None
        self.config_hash = None

    def add(self, traj: Trajectory) -> None:
        digest = traj.config.config_hash()
        if self.config_hash is None:
            self.config_hash = digest
            self.times = tuple(traj.times)
        elif digest != self.config_hash:
            raise DataCompatError("trajectories come from different configurations")
        x = traj.as_array()
        self.count += 1
        if self.mean is None:
            self.mean = x.copy()
            self.m2 = np.zeros_like(x)
            return
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def result(self) -> EnsembleMoments:
        if self.count < 1:
            raise InsufficientDataError("no runs accumulated")
        if self.count == 1:
            sig = np.full_like(self.mean, np.nan)
        else:
            sig = np.sqrt(np.maximum(self.m2, 0.0) / (self.count - 1))
        return EnsembleMoments(self.times, self.mean.copy(), sig, self.count, self.config_hash)


def estimate_moments(trajectories: Iterable[Trajectory], allow_single: bool = False) -> EnsembleMoments:
    """Sample mean and (1/(R-1)) standard deviation across runs.

    Requires two or more runs unless ``allow_single`` is set, in which case
    sigma_hat is returned as NaN (undefined) for a single run.
    """
    acc = MomentAccumulator()
    for tr in trajectories:
        acc.add(tr)
    if acc.count < 2 and not allow_single:
        raise InsufficientDataError("estimate_moments needs at least 2 runs")
    return acc.result()


def stream_moments(config: SimConfig, threads: int = 1) -> EnsembleMoments:
    """Moments of a full ensemble without holding every trajectory in memory."""
    acc = MomentAccumulator()
    for tr in iter_runs(config, threads=threads):
        acc.add(tr)
    if acc.count < 2:
        raise InsufficientDataError("stream_moments needs at least 2 runs")
    return acc.result()


def sigma_floor(values) -> float:
    """1e-12 * max(1, max|v|): below this a site counts as frozen."""
    vmax = float(np.max(np.abs(values))) if np.size(values) else 0.0
    return 1e-12 * max(1.0, vmax)


@dataclass
class NoiseField:
    """Standardised residuals, shape (runs, n_snapshots, n); NaN marks excluded sites."""
    w_hat: np.ndarray
    snapshot_times: tuple[int, ...]
    run_indices: tuple[int, ...]
    excluded: np.ndarray          # per snapshot: number of excluded sites

    @property
    def retained(self) -> np.ndarray:
        return np.isfinite(self.w_hat)

    def snapshot_slice(self, snapshot) -> np.ndarray:
        """(runs, n_selected, n) block for one snapshot index, or all of them if None."""
        if snapshot is None:
            return self.w_hat
        return self.w_hat[:, [snapshot], :]

    def values(self, snapshot=-1) -> np.ndarray:
        block = self.snapshot_slice(snapshot)
        return block[np.isfinite(block)]


def residuals(trajectories, moments: EnsembleMoments) -> NoiseField:
    """W_hat = (v - mu_hat)/sigma_hat, excluding sites with sigma_hat <= sigma_floor."""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    trajectories = list(trajectories)
    for tr in trajectories:
        if moments.config_hash is not None and tr.config.config_hash() != moments.config_hash:
            raise DataCompatError("trajectory and moments come from different configurations")
        if tuple(tr.times) != tuple(moments.snapshot_times):
            raise DataCompatError("snapshot times differ between trajectory and moments")
    v = np.stack([tr.as_array() for tr in trajectories])
    ok = np.zeros(moments.sigma_hat.shape, dtype=bool)
    for s in range(v.shape[1]):
        floor = sigma_floor(v[:, s, :])
        sig = moments.sigma_hat[s]
        ok[s] = np.isfinite(sig) & (sig > floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = (v - moments.mu_hat[None]) / moments.sigma_hat[None]
    w = np.where(ok[None], w, np.nan)
    excluded = (~ok).sum(axis=1)
    return NoiseField(w, tuple(moments.snapshot_times),
                      tuple(tr.run_index for tr in trajectories), excluded)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        raise InsufficientDataError("zero variance in correlation input")
    return float(np.dot(a, b)) / den


def lag_correlation(noise: NoiseField, k: int, snapshot: int | None = -1, run: int | None = None) -> float:
    """Pearson correlation of the pairs (W(x), W(x+k)) pooled over retained x.

    By default the pairs of every run are pooled; ``run`` restricts to one
    run (a single spatial series, as in a one-realisation figure).
    """
    if k < 1:
        raise DomainError("lag must be >= 1")
    w = noise.snapshot_slice(snapshot)
    if run is not None:
        w = w[[run]]
    n = w.shape[-1]
    if n <= k:
        raise DomainError("lag must be smaller than n")
    left = w[..., :-k].ravel()
    right = w[..., k:].ravel()
    keep = np.isfinite(left) & np.isfinite(right)
    if keep.sum() < 10:
        raise InsufficientDataError("fewer than 10 pairs for lag correlation")
    return _pearson(left[keep], right[keep])


def lag_correlation_series(noise: NoiseField, kmax: int, snapshot: int | None = -1,
                           run: int | None = None) -> np.ndarray:
    return np.array([lag_correlation(noise, k, snapshot, run) for k in range(1, kmax + 1)])


def empirical_corr_density(r, n: int):
    """Null density of a sample correlation coefficient of n points:
    f(r) = (1 - r^2)^((n-4)/2) / B(1/2, (n-2)/2)."""
    if n < 5:
        raise DomainError("empirical_corr_density needs n >= 5")
    r = np.asarray(r, dtype=np.float64)
    if np.any(np.abs(r) >= 1):
        raise DomainError("correlation must lie in (-1, 1)")
    out = np.exp(0.5 * (n - 4) * np.log1p(-r * r) - log_beta(0.5, 0.5 * (n - 2)))
    return float(out) if out.ndim == 0 else out


def _normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x) / math.sqrt(2.0)))


def ks_statistic(sample) -> float:
    """Kolmogorov-Smirnov distance between the sample and N(0, 1)."""
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = x.size
    if n == 0:
        raise InsufficientDataError("empty sample")
    cdf = _normal_cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    """Asymptotic one-sample KS critical value sqrt(-ln(alpha/2)/2)/sqrt(n) (1.63/sqrt(n) at 1%)."""
    return math.sqrt(-0.5 * math.log(alpha / 2.0)) / math.sqrt(n)


HIST_EDGES = np.round(np.linspace(-5.0, 5.0, 101), 10)


def normality_report(noise_or_sample, snapshot: int | None = -1) -> dict:
    """KS distance to N(0,1), skewness, excess kurtosis and a 0.1-wide histogram on [-5, 5]."""
    if isinstance(noise_or_sample, NoiseField):
        x = noise_or_sample.values(snapshot)
    else:
        x = np.asarray(noise_or_sample, dtype=np.float64).ravel()
    n = x.size
    if n < 1000:
        raise InsufficientDataError("normality_report needs at least 1000 residuals")
    mean = float(np.mean(x))
    d = x - mean
    var = float(np.mean(d * d))
    degenerate = var == 0.0
    skew = float(np.mean(d**3) / var**1.5) if not degenerate else float("nan")
    kurt = float(np.mean(d**4) / var**2 - 3.0) if not degenerate else float("nan")
    counts, _ = np.histogram(x, bins=HIST_EDGES)
    ks = ks_statistic(x)
    return {
        "size": int(n), "ks": ks, "ks_critical_1pct": ks_critical(n),
        "mean": mean, "variance": var, "skewness": skew, "excess_kurtosis": kurt,
        "degenerate": bool(degenerate),
        "hist_edges": HIST_EDGES.tolist(), "hist_counts": counts.tolist(),
        "below_range": int(np.sum(x < HIST_EDGES[0])), "above_range": int(np.sum(x > HIST_EDGES[-1])),
    }


def pair_scatter(noise: NoiseField, x: int, snapshot: int = -1) -> np.ndarray:
    """Pairs (W(x), W(x+1)) one per run in run order; ``x`` is 1-based."""
    n = noise.w_hat.shape[-1]
    if not 1 <= x < n:
        raise DomainError("x must satisfy 1 <= x <= n-1")
    w = noise.w_hat[:, snapshot, :]
    pairs = np.stack([w[:, x - 1], w[:, x]], axis=1)
    keep = np.all(np.isfinite(pairs), axis=1)
    return pairs[keep]


def pair_correlation(pairs: np.ndarray) -> float:
    return _pearson(pairs[:, 0], pairs[:, 1])


def moments_rows(m: EnsembleMoments) -> Sequence[tuple]:
    """Rows (t, x, mu_hat, sigma_hat) for CSV output, x 1-based."""
    rows = []
    for s, t in enumerate(m.snapshot_times):
        for x in range(m.n):
            rows.append((int(t), x + 1, float(m.mu_hat[s, x]), float(m.sigma_hat[s, x])))
    return rows
