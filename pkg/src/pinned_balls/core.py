"""
Shared building blocks: error types, special functions, the RNG contract
and the simulation configuration.

The special functions (erf, modified Bessel I0/I1, log-Gamma/log-Beta) are
implemented here rather than taken from scipy so that every module, and
every golden file, sees the same numerics.  They accept scalars or numpy
arrays and return the same shape.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "PinnedBallsError", "ConfigError", "ResourceError", "DataCompatError",
    "InstabilityError", "DomainError", "NotFoundError", "InsufficientDataError",
    "erf", "bessel_i", "log_gamma", "log_beta",
    "RngStream", "InitialCondition", "SimConfig", "VelocityState",
    "load_config",
]


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

class PinnedBallsError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""
    exit_code = 1


class ConfigError(PinnedBallsError, ValueError):
    exit_code = 2


class ResourceError(PinnedBallsError):
    exit_code = 3


class DataCompatError(PinnedBallsError):
    exit_code = 4


class InstabilityError(PinnedBallsError, FloatingPointError):
    exit_code = 5


class DomainError(PinnedBallsError, ValueError):
    exit_code = 2


class NotFoundError(PinnedBallsError, LookupError):
    exit_code = 4


class InsufficientDataError(PinnedBallsError, ValueError):
    exit_code = 4


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

_TWO_OVER_SQRTPI = 2.0 / math.sqrt(math.pi)
_ERF_SPLIT = 3.0
_ERF_ONE = 6.5          # erfc(6.5) < 1e-19


def _as_float_array(z):
    arr = np.asarray(z, dtype=np.float64)
    return arr, arr.ndim == 0


def erf(z):
    """Error function, absolute error below 1e-12 for every finite input.

    |z| < 3 uses the everywhere-positive series
    erf(z) = 2/sqrt(pi) exp(-z^2) sum_k 2^k z^(2k+1) / (2k+1)!!,
    which has no cancellation.  Larger |z| uses the Laplace continued
    fraction for erfc.  The function is evaluated on |z| and the sign
    restored afterwards, so erf(-z) == -erf(z) bit for bit.
    """
    arr, scalar = _as_float_array(z)
    if not np.all(np.isfinite(arr)):
        raise DomainError("erf requires finite input")
    x = np.abs(arr)
    out = np.empty_like(x)

    small = x < _ERF_SPLIT
    if np.any(small):
        xs = x[small]
        two_x2 = 2.0 * xs * xs
        term = xs.copy()
        acc = xs.copy()
        for k in range(1, 90):
            term = term * two_x2 / (2 * k + 1)
            acc = acc + term
        out[small] = _TWO_OVER_SQRTPI * np.exp(-xs * xs) * acc

    mid = (~small) & (x < _ERF_ONE)
    if np.any(mid):
        xm = x[mid]
        # erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
        frac = np.zeros_like(xm)
        for k in range(80, 0, -1):
            frac = (0.5 * k) / (xm + frac)
        out[mid] = 1.0 - np.exp(-xm * xm) / math.sqrt(math.pi) / (xm + frac)

    out[x >= _ERF_ONE] = 1.0
    out = np.where(arr < 0, -out, out)
    return float(out) if scalar else out


def bessel_i(order: int, z):
    """Modified Bessel function of the first kind, orders 0 and 1.

    Power series with all-positive terms; relative error ~1e-15 on [0, 50]
    and still accurate well beyond (the series is simply longer).
    """
    if order not in (0, 1):
        raise DomainError("bessel_i supports order 0 or 1 only")
    arr, scalar = _as_float_array(z)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError("bessel_i requires finite z >= 0")
    q = 0.25 * arr * arr
    term = np.ones_like(arr) if order == 0 else 0.5 * arr
    acc = term.copy()
    kmax = int(40 + 2.0 * float(np.max(arr, initial=0.0)))
    for k in range(1, kmax):
        term = term * q / (k * (k + order))
        acc = acc + term
        if np.all(term <= 1e-17 * acc):
            break
    return float(acc) if scalar else acc


# Stirling series coefficients B_{2k} / (2k (2k-1))
_STIRLING = (1.0 / 12, -1.0 / 360, 1.0 / 1260, -1.0 / 1680, 1.0 / 1188,
             -691.0 / 360360, 1.0 / 156, -3617.0 / 122400)
_LGAMMA_SHIFT = 15.0


def log_gamma(x):
    """ln Gamma(x) for x > 0 via upward shift and the Stirling series."""
    arr, scalar = _as_float_array(x)
    if np.any(~(arr > 0)) or not np.all(np.isfinite(arr)):
        raise DomainError("log_gamma requires finite x > 0")
    y = arr.copy()
    log_shift = np.zeros_like(arr)
    while True:
        low = y < _LGAMMA_SHIFT
        if not np.any(low):
            break
        log_shift[low] += np.log(y[low])
        y[low] += 1.0
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for c in reversed(_STIRLING):
        series = series * inv2 + c
    series *= inv
    out = (y - 0.5) * np.log(y) - y + 0.5 * math.log(2 * math.pi) + series - log_shift
    return float(out) if scalar else out


def log_beta(a, b):
    """ln B(a, b) = lnG(a) + lnG(b) - lnG(a+b); raises DomainError unless a, b > 0."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any(~(a_arr > 0)) or np.any(~(b_arr > 0)):
        raise DomainError("log_beta requires a > 0 and b > 0")
    return log_gamma(a) + log_gamma(b) - log_gamma(a_arr + b_arr)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

class RngStream:
    """Deterministic random stream keyed by ``(seed, index)``.

    Backed by the counter-based Philox generator, seeded through
    ``SeedSequence(seed, spawn_key=(index, ...))``.  Distinct keys give
    independent streams, so runs can be scheduled in any order.
    """

    def __init__(self, seed: int, index: int = 0, *, _key: tuple[int, ...] | None = None):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.key = (int(index),) if _key is None else tuple(_key)
        ss = np.random.SeedSequence(seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    @property
    def index(self) -> int:
        return self.key[0]

    def substream(self, j: int) -> "RngStream":
        """An independent child stream (used for sharding MC loops)."""
        return RngStream(self.seed, _key=self.key + (int(j),))

    def uniform(self, size=None):
        """Doubles on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_VARIANTS = ("sort_only", "redistribute_sort")
_IC_KINDS = ("paper_default", "custom_table")


@dataclass(frozen=True)
class InitialCondition:
    """Initial mean/std profiles.

    ``paper_default``: mu0 = erf(27 (xt - 1/2)^3), sigma0 = (1 - cos 2 pi xt)/1000
    with xt = (x-1)/(n-1).  ``mirror=True`` uses xt -> 1 - xt, i.e. the
    decreasing profile, which the min-left sorting rule has to reorder.
    ``custom_table``: explicit per-site ``mu`` and ``sigma``.
    """
    kind: str = "paper_default"
    mirror: bool = False
    mu: tuple[float, ...] | None = None
    sigma: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in _IC_KINDS:
            raise ConfigError(f"unknown initial condition kind {self.kind!r}")
        if self.kind == "custom_table":
            if self.mu is None or self.sigma is None:
                raise ConfigError("custom_table requires both 'mu' and 'sigma'")
            if len(self.mu) != len(self.sigma):
                raise ConfigError("custom_table 'mu' and 'sigma' lengths differ")
            object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
            object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
            if any(s < 0 for s in self.sigma):
                raise ConfigError("custom_table sigma must be >= 0")
            if not all(math.isfinite(v) for v in self.mu + self.sigma):
                raise ConfigError("custom_table entries must be finite")
        elif self.mu is not None or self.sigma is not None:
            raise ConfigError("'mu'/'sigma' are only allowed for custom_table")

    # profiles on the unit interval (used by the PDE side as well)
    def mu_profile(self, xt):
        xt = np.asarray(xt, dtype=np.float64)
        if self.kind != "paper_default":
            raise ConfigError("continuous profiles exist only for paper_default")
        s = 1.0 - xt if self.mirror else xt
        return erf(27.0 * (s - 0.5) ** 3)

    def sigma_profile(self, xt):
        xt = np.asarray(xt, dtype=np.float64)
        if self.kind != "paper_default":
            raise ConfigError("continuous profiles exist only for paper_default")
        return (1.0 - np.cos(2.0 * np.pi * xt)) / 1000.0

    def site_profiles(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(mu0, sigma0) at sites x = 1..n."""
        if self.kind == "custom_table":
            if len(self.mu) != n:
                raise ConfigError(f"custom_table has {len(self.mu)} sites, config n = {n}")
            return np.array(self.mu), np.array(self.sigma)
        xt = np.arange(n, dtype=np.float64) / (n - 1)
        return self.mu_profile(xt), self.sigma_profile(xt)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "paper_default":
            d["mirror"] = self.mirror
        else:
            d["mu"] = list(self.mu)
            d["sigma"] = list(self.sigma)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InitialCondition":
        if not isinstance(d, dict):
            raise ConfigError("initial_condition must be an object")
        allowed = {"kind", "mirror", "mu", "sigma"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown initial_condition keys: {sorted(unknown)}")
        mu = d.get("mu")
        sigma = d.get("sigma")
        return cls(kind=d.get("kind", "paper_default"), mirror=bool(d.get("mirror", False)),
                   mu=None if mu is None else tuple(mu),
                   sigma=None if sigma is None else tuple(sigma))


DEFAULT_SNAPSHOT_CAP = 2 * 1024**3


@dataclass(frozen=True)
class SimConfig:
    """Ensemble configuration; mirrors the JSON config file field for field."""
    n: int
    steps: int
    runs: int = 1
    seed: int = 0
    variant: str = "redistribute_sort"
    initial_condition: InitialCondition = field(default_factory=InitialCondition)
    snapshot_times: tuple[int, ...] | None = None
    snapshot_cap_bytes: int = DEFAULT_SNAPSHOT_CAP

    def __post_init__(self):
        for name in ("n", "steps", "runs", "seed", "snapshot_cap_bytes"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer")
        if self.variant not in _VARIANTS:
            raise ConfigError(f"variant must be one of {_VARIANTS}")
        nmin = 3 if self.variant == "redistribute_sort" else 2
        if self.n < nmin:
            raise ConfigError(f"n must be >= {nmin} for {self.variant}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not isinstance(self.initial_condition, InitialCondition):
            raise ConfigError("initial_condition must be an InitialCondition")
        if self.initial_condition.kind == "custom_table" and len(self.initial_condition.mu) != self.n:
            raise ConfigError("custom_table length must equal n")
        if self.snapshot_times is None:
            times = (0, self.steps) if self.steps > 0 else (0,)
        else:
            times = tuple(int(t) for t in self.snapshot_times)
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("snapshot_times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > self.steps):
            raise ConfigError("snapshot_times must lie within [0, steps]")
        object.__setattr__(self, "snapshot_times", times)

    def to_dict(self) -> dict:
        return {
            "n": int(self.n), "steps": int(self.steps), "runs": int(self.runs),
            "seed": int(self.seed), "variant": self.variant,
            "initial_condition": self.initial_condition.to_dict(),
            "snapshot_times": [int(t) for t in self.snapshot_times],
            "snapshot_cap_bytes": int(self.snapshot_cap_bytes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> bytes:
        """SHA-256 of the canonical JSON form (32 bytes)."""
        return hashlib.sha256(self.to_json().encode()).digest()

    def replace(self, **changes) -> "SimConfig":
        d = self.to_dict()
        d.update(changes)
        if isinstance(d["initial_condition"], InitialCondition):
            d["initial_condition"] = d["initial_condition"].to_dict()
        return SimConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"n", "steps", "runs", "seed", "variant", "initial_condition",
                   "snapshot_times", "snapshot_cap_bytes"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for req in ("n", "steps"):
            if req not in d:
                raise ConfigError(f"missing required key {req!r}")
        ic = InitialCondition.from_dict(d.get("initial_condition", {}))
        snaps = d.get("snapshot_times")
        return cls(n=d["n"], steps=d["steps"], runs=d.get("runs", 1), seed=d.get("seed", 0),
                   variant=d.get("variant", "redistribute_sort"), initial_condition=ic,
                   snapshot_times=None if snaps is None else tuple(snaps),
                   snapshot_cap_bytes=d.get("snapshot_cap_bytes", DEFAULT_SNAPSHOT_CAP))


def load_config(path: str | Path) -> SimConfig:
    """Read a JSON config; malformed JSON or bad fields raise ConfigError."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return SimConfig.from_dict(data)


@dataclass(frozen=True)
class VelocityState:
    """Pseudo-velocities v(x, t) for x = 1..n (stored 0-based)."""
    t: int
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("v must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("velocities must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.v.size

    def momentum(self) -> float:
        return math.fsum(self.v)

    def energy(self) -> float:
        return math.fsum(self.v * self.v)

