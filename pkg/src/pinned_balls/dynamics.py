"""
Stochastic dynamics of the pinned billiard ball chain.

Two variants are provided.  ``redistribute_sort`` picks a center site,
moves the triple around it to a uniform point of the circle cut out by
the momentum and energy constraints, then orders one adjacent pair of the
triple.  ``sort_only`` orders a uniformly chosen adjacent pair.

Random-draw contract (what makes every trajectory reproducible):

* run ``k`` of an ensemble owns ``RngStream(seed, k)``;
* it first draws ``n`` standard normals for the initial sample
  ``v = mu0 + sigma0 * Z``;
* each ``redistribute_sort`` step then consumes three uniforms
  ``(u_center, u_theta, u_kappa)`` and each ``sort_only`` step one uniform.

The uniforms are pulled from the stream in blocks, which yields exactly
the same sequence as drawing them step by step, so neither chunking nor
snapshot placement can change a trajectory.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .core import DataCompatError, ResourceError, RngStream, SimConfig, VelocityState

__all__ = [
    "CollisionEvent", "Trajectory",
    "local_mean_radius", "circle_point", "redistribute", "sort_pair_step",
    "draw_event", "step", "step_sort_only", "advance",
    "simulate_run", "run_ensemble", "iter_runs",
    "write_checkpoint", "read_checkpoint",
]

TWO_PI = 2.0 * math.pi
_SHIFT1 = TWO_PI / 3.0
_SHIFT2 = 2.0 * TWO_PI / 3.0
CHUNK_STEPS = 1 << 16


# ---------------------------------------------------------------------------
# triple-level operations
# ---------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _mean_radius(v0, v1, v2):
    a = (v0 + v1 + v2) / 3.0
    d0 = v0 - a
    d1 = v1 - a
    d2 = v2 - a
    return a, math.sqrt((2.0 / 3.0) * (d0 * d0 + d1 * d1 + d2 * d2))


def local_mean_radius(v3) -> tuple[float, float]:
    """Mean ``a`` and circle radius ``r`` of a triple, r^2 = (2/3) sum (v_i - a)^2."""
    v0, v1, v2 = (float(t) for t in v3)
    a, r = _mean_radius(v0, v1, v2)
    return float(a), float(r)


def circle_point(a: float, r: float, theta: float) -> tuple[float, float, float]:
    """The point (a + r sin t, a + r sin(t + 2pi/3), a + r sin(t + 4pi/3))."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    return (a + r * math.sin(theta), a + r * math.sin(theta + _SHIFT1),
            a + r * math.sin(theta + _SHIFT2))


def redistribute(v3, rng: RngStream) -> tuple[float, float, float]:
    """Uniform point on the conservation circle through ``v3`` (one uniform draw)."""
    a, r = local_mean_radius(v3)
    theta = TWO_PI * rng.uniform()
    if r < 1e-15 * (1.0 + abs(a)):
        return tuple(float(t) for t in v3)
    return circle_point(a, r, theta)


def sort_pair_step(v3, kappa: int) -> tuple[float, float, float]:
    """Order the first (kappa = -1) or last (kappa = +1) pair, smaller value left."""
    p, q, s = (float(t) for t in v3)
    if kappa == -1:
        return (min(p, q), max(p, q), s)
    if kappa == 1:
        return (p, min(q, s), max(q, s))
    raise ValueError("kappa must be -1 or +1")


@dataclass(frozen=True)
class CollisionEvent:
    """Exogenous randomness of one step: 1-based center, sorting side, angle."""
    x_t: int
    kappa: int
    theta: float

    def __post_init__(self):
        if self.kappa not in (-1, 1):
            raise ValueError("kappa must be -1 or +1")
        if not 0.0 <= self.theta < TWO_PI:
            raise ValueError("theta must lie in [0, 2 pi)")


def draw_event(u, n: int, variant: str = "redistribute_sort") -> CollisionEvent:
    """Map the per-step uniforms to the event they encode.

    For ``redistribute_sort`` the center is uniform on {2..n-1}; for
    ``sort_only`` ``x_t`` is the left ball of the pair, uniform on {1..n-1}
    (kappa and theta are then unused and reported as -1 and 0).
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if variant == "sort_only":
        return CollisionEvent(1 + int(u[0] * (n - 1)), -1, 0.0)
    return CollisionEvent(2 + int(u[0] * (n - 2)), -1 if u[2] < 0.5 else 1, TWO_PI * u[1])


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _advance_redistribute(v, u):
    n = v.size
    m = n - 2
    for i in range(u.shape[0]):
        c = 1 + int(u[i, 0] * m)          # 0-based center in 1..n-2
        if c > n - 2:                     # guard against u*m rounding up to m
            c = n - 2
        p = v[c - 1]
        q = v[c]
        s = v[c + 1]
        a, r = _mean_radius(p, q, s)
        if r >= 1e-15 * (1.0 + abs(a)):
            th = TWO_PI * u[i, 1]
            p = a + r * math.sin(th)
            q = a + r * math.sin(th + _SHIFT1)
            s = a + r * math.sin(th + _SHIFT2)
        if u[i, 2] < 0.5:
            if p > q:
                p, q = q, p
        else:
            if q > s:
                q, s = s, q
        v[c - 1] = p
        v[c] = q
        v[c + 1] = s


@nb.njit(cache=True, nogil=True)
def _advance_sort_only(v, u):
    m = v.size - 1
    for i in range(u.shape[0]):
        j = int(u[i] * m)
        if j > m - 1:
            j = m - 1
        if v[j] > v[j + 1]:
            t = v[j]
            v[j] = v[j + 1]
            v[j + 1] = t


def advance(v: np.ndarray, nsteps: int, rng: RngStream, variant: str = "redistribute_sort") -> None:
    """Advance ``v`` in place by ``nsteps`` steps, drawing from ``rng``."""
    done = 0
    while done < nsteps:
        m = min(CHUNK_STEPS, nsteps - done)
        if variant == "sort_only":
            _advance_sort_only(v, rng.uniform(m))
        else:
            _advance_redistribute(v, rng.uniform((m, 3)))
        done += m


def step(state: VelocityState, rng: RngStream) -> VelocityState:
    """One redistribute-then-sort step (three uniform draws)."""
    if state.n < 3:
        raise ValueError("redistribute_sort needs n >= 3")
    v = state.v.copy()
    _advance_redistribute(v, rng.uniform((1, 3)))
    return VelocityState(state.t + 1, v)


def step_sort_only(state: VelocityState, rng: RngStream) -> VelocityState:
    """One step of the baseline sorting model (one uniform draw)."""
    if state.n < 2:
        raise ValueError("sort_only needs n >= 2")
    v = state.v.copy()
    _advance_sort_only(v, rng.uniform(1))
    return VelocityState(state.t + 1, v)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Snapshots of one run at ``config.snapshot_times``.

    ``drift_momentum`` / ``drift_energy`` are the largest relative changes of
    sum(v) and sum(v^2) seen over the recorded snapshots, normalised by
    sum|v(., 0)| and sum v(., 0)^2 respectively.
    """
    config: SimConfig
    run_index: int
    snapshots: list[VelocityState] = field(default_factory=list)
    drift_momentum: float = 0.0
    drift_energy: float = 0.0

    @property
    def times(self) -> list[int]:
        return [s.t for s in self.snapshots]

    def as_array(self) -> np.ndarray:
        """Snapshots stacked into an array of shape (len(times), n)."""
        return np.stack([s.v for s in self.snapshots])

    def final(self) -> VelocityState:
        return self.snapshots[-1]


def initial_sample(config: SimConfig, rng: RngStream) -> np.ndarray:
    mu0, sig0 = config.initial_condition.site_profiles(config.n)
    return mu0 + sig0 * rng.normal(config.n)


def simulate_run(config: SimConfig, run_index: int) -> Trajectory:
    """Simulate run ``run_index`` of ``config`` (pure function of its arguments)."""
    rng = RngStream(config.seed, run_index)
    v = initial_sample(config, rng)
    vabs0 = math.fsum(np.abs(v))
    p0 = math.fsum(v)
    e0 = math.fsum(v * v)
    traj = Trajectory(config, run_index)
    t = 0
    for ts in config.snapshot_times:
        advance(v, ts - t, rng, config.variant)
        t = ts
        traj.snapshots.append(VelocityState(t, v))
        dp = abs(math.fsum(v) - p0) / vabs0 if vabs0 > 0 else 0.0
        de = abs(math.fsum(v * v) - e0) / e0 if e0 > 0 else 0.0
        traj.drift_momentum = max(traj.drift_momentum, dp)
        traj.drift_energy = max(traj.drift_energy, de)
    return traj


def _check_storage(config: SimConfig) -> None:
    need = config.runs * len(config.snapshot_times) * config.n * 8
    if need > config.snapshot_cap_bytes:
        raise ResourceError(
            f"snapshot storage {need} bytes exceeds cap {config.snapshot_cap_bytes}")


def iter_runs(config: SimConfig, runs=None, threads: int = 1, block: int = 64):
    """Yield trajectories in run order; work is spread over ``threads`` threads.

    Kernels release the GIL, so threads give real parallelism.  Results are
    always yielded in run-index order, whatever the scheduling.
    """
    indices = range(config.runs) if runs is None else list(runs)
    if threads <= 1:
        for k in indices:
            yield simulate_run(config, k)
        return
    idx = list(indices)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, len(idx), block):
            chunk = idx[start:start + block]
            yield from pool.map(lambda k: simulate_run(config, k), chunk)


def run_ensemble(config: SimConfig, threads: int = 1) -> list[Trajectory]:
    """All ``config.runs`` trajectories, bit-identical for any ``threads``."""
    _check_storage(config)
    return list(iter_runs(config, threads=threads))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"PBCKPT01"
_CKPT_HEADER = struct.Struct("<8s32sQQQ")


def write_checkpoint(path, config: SimConfig | bytes, run_index: int, state: VelocityState) -> None:
    """Header (magic, config hash, run, step, n) then little-endian float64 velocities."""
    digest = config.config_hash() if isinstance(config, SimConfig) else bytes(config)
    if len(digest) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, digest, run_index, state.t, state.n))
        fh.write(np.asarray(state.v, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise DataCompatError(f"{path}: truncated checkpoint header")
    magic, digest, run, t, n = _CKPT_HEADER.unpack_from(data)
    if magic != _CKPT_MAGIC:
        raise DataCompatError(f"{path}: not a checkpoint file")
    body = data[_CKPT_HEADER.size:]
    if len(body) != 8 * n:
        raise DataCompatError(f"{path}: expected {n} velocities, found {len(body) // 8}")
    v = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return {"config_hash": digest, "run_index": run, "state": VelocityState(t, v)}
