"""
Method-of-lines solver for the coupled mean/variance system.

Three equivalent coordinate systems are supported:

* ``A``: (mu, sigma)   mu_t = mu_xx - lam sigma_x,
                       sigma_t = sigma_xx - lam mu_x + (sigma_x^2 + mu_x^2)/sigma
* ``B``: (mu, w)       mu_t - mu_xx = -lam (sqrt(2w))_x,
  with w = sigma^2/2   w_t - w_xx = -lam mu_x sqrt(2w) + mu_x^2
* ``C``: (mu, E)       mu_t - mu_xx = -lam (sqrt(2E - mu^2))_x,
  E = (mu^2+sigma^2)/2 E_t - E_xx = -lam (mu sqrt(2E - mu^2))_x

Boundary conditions: mu_x = 0 (ghost-point reflection) and sigma = 0 at
both ends, i.e. w = 0 in B and E = mu^2/2 in C.  Time stepping is classic
RK4 with dt = c_stab * min(dx^2, dx/lam).

Substituting sigma = sqrt(2w) into A gives the B system above.  Writing
sqrt(w) in place of sqrt(2w) (``b_form="literal"``) is the same system
with lam replaced by lam/sqrt(2); it is kept for comparison only, since it
is not equivalent to A or C under w = sigma^2/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numba as nb
import numpy as np

from .core import DomainError, InitialCondition, InstabilityError, NotFoundError

__all__ = [
    "PdeState", "Functionals", "PdeTrajectory",
    "lambda_from_n", "make_state", "convert", "rhs", "step_pde", "stable_dt",
    "solve", "functionals", "freeze_time", "reorder_monitor", "wave_speed",
    "mu_field", "sigma_field",
]

_COORDS = ("A", "B", "C")
_B_FORMS = ("consistent", "literal")
_SIGMA_CUT = 1e-8
_SQRT2 = math.sqrt(2.0)


def lambda_from_n(n: int) -> float:
    """Coupling strength (n-1)/(2 sqrt(pi)) for a chain of n balls."""
    if n < 2:
        raise DomainError("n must be >= 2")
    return (n - 1) / (2.0 * math.sqrt(math.pi))


@dataclass(frozen=True)
class PdeState:
    """Fields on J equispaced points of [a, b]; ``field2`` is sigma, w or E for coords A, B, C."""
    domain: tuple[float, float]
    x: np.ndarray
    coords: str
    field1: np.ndarray
    field2: np.ndarray
    lam: float
    time: float = 0.0
    b_form: str = "consistent"

    def __post_init__(self):
        if self.coords not in _COORDS:
            raise DomainError(f"coords must be one of {_COORDS}")
        if self.b_form not in _B_FORMS:
            raise DomainError(f"b_form must be one of {_B_FORMS}")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")
        if self.field1.shape != self.x.shape or self.field2.shape != self.x.shape:
            raise DomainError("field shapes must match the grid")

    @property
    def J(self) -> int:
        return self.x.size

    @property
    def dx(self) -> float:
        return (self.domain[1] - self.domain[0]) / (self.J - 1)


def make_state(ic: InitialCondition | tuple, J: int, lam: float, domain=(0.0, 1.0),
               coords: str = "B", b_form: str = "consistent") -> PdeState:
    """Grid state from an initial condition (continuous profiles) or ``(mu, sigma)`` arrays."""
    a, b = map(float, domain)
    x = np.linspace(a, b, J)
    if isinstance(ic, InitialCondition):
        xt = (x - a) / (b - a)
        mu = ic.mu_profile(xt)
        sig = ic.sigma_profile(xt)
    else:
        mu, sig = (np.asarray(t, dtype=np.float64) for t in ic)
    sig = np.array(sig, dtype=np.float64)
    sig[0] = sig[-1] = 0.0
    st = PdeState((a, b), x, "A", np.array(mu, dtype=np.float64), sig, float(lam), b_form=b_form)
    return convert(st, coords)


def mu_field(state: PdeState) -> np.ndarray:
    return state.field1


def sigma_field(state: PdeState) -> np.ndarray:
    if state.coords == "A":
        return state.field2
    if state.coords == "B":
        return np.sqrt(2.0 * np.maximum(state.field2, 0.0))
    return np.sqrt(np.maximum(2.0 * state.field2 - state.field1**2, 0.0))


def convert(state: PdeState, target: str) -> PdeState:
    """Change coordinates; C -> A raises DomainError if 2E - mu^2 < -1e-12 anywhere."""
    if target not in _COORDS:
        raise DomainError(f"coords must be one of {_COORDS}")
    if target == state.coords:
        return state
    mu = state.field1
    if state.coords == "C":
        gap = 2.0 * state.field2 - mu**2
        if np.any(gap < -1e-12):
            raise DomainError("2E - mu^2 is negative beyond rounding")
        sig = np.sqrt(np.maximum(gap, 0.0))
    elif state.coords == "B":
        sig = np.sqrt(2.0 * np.maximum(state.field2, 0.0))
    else:
        sig = state.field2
    if target == "A":
        f2 = sig
    elif target == "B":
        f2 = 0.5 * sig * sig
    else:
        f2 = 0.5 * (mu * mu + sig * sig)
    return replace(state, coords=target, field2=np.array(f2, dtype=np.float64))


# ---------------------------------------------------------------------------
# spatial operators
# ---------------------------------------------------------------------------

def _lap_neumann(f, dx):
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / (dx * dx)
    out[0] = 2.0 * (f[1] - f[0]) / (dx * dx)
    out[-1] = 2.0 * (f[-2] - f[-1]) / (dx * dx)
    return out


def _lap_interior(f, dx):
    out = np.zeros_like(f)
    out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / (dx * dx)
    return out


def _d1(f, dx):
    """Central differences inside, one-sided second order at the ends."""
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * dx)
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dx)
    out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * dx)
    return out


def _d1_neumann(f, dx):
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * dx)
    out[0] = out[-1] = 0.0
    return out


@nb.njit(cache=True, nogil=True)
def _rhs_b(mu, w, dx, lam, mt, wt):
    """(B) system with sqrt(w) coupling: same stencils as the numpy operators
    above, fused into one loop.  The sqrt(2w) form calls it with sqrt(2) lam."""
    J = mu.size
    idx2 = 1.0 / (dx * dx)
    h = 0.5 / dx
    s0 = math.sqrt(max(w[0], 0.0))
    s1 = math.sqrt(max(w[1], 0.0))
    s2 = math.sqrt(max(w[2], 0.0))
    mt[0] = 2.0 * (mu[1] - mu[0]) * idx2 - lam * (-3.0 * s0 + 4.0 * s1 - s2) * h
    sa = math.sqrt(max(w[J - 1], 0.0))
    sb = math.sqrt(max(w[J - 2], 0.0))
    sc = math.sqrt(max(w[J - 3], 0.0))
    mt[J - 1] = 2.0 * (mu[J - 2] - mu[J - 1]) * idx2 - lam * (3.0 * sa - 4.0 * sb + sc) * h
    wt[0] = 0.0
    wt[J - 1] = 0.0
    sm = s0
    sj = s1
    for j in range(1, J - 1):
        sp = math.sqrt(max(w[j + 1], 0.0))
        mux = (mu[j + 1] - mu[j - 1]) * h
        mt[j] = (mu[j + 1] - 2.0 * mu[j] + mu[j - 1]) * idx2 - lam * (sp - sm) * h
        wt[j] = (w[j + 1] - 2.0 * w[j] + w[j - 1]) * idx2 - lam * mux * sj + mux * mux
        sm = sj
        sj = sp


def _rhs_arrays(coords, mu, f2, dx, lam, nonlinear=True, b_form="consistent"):
    if coords == "B":
        mt = np.empty_like(mu)
        wt = np.empty_like(mu)
        _rhs_b(mu, f2, dx, lam * _SQRT2 if b_form == "consistent" else lam, mt, wt)
        return mt, wt
    mux = _d1_neumann(mu, dx)
    if coords == "A":
        mt = _lap_neumann(mu, dx) - lam * _d1(f2, dx)
        st = _lap_interior(f2, dx) - lam * mux
        if nonlinear:
            sx = _d1(f2, dx)
            big = f2 > _SIGMA_CUT
            st[big] += (sx[big] ** 2 + mux[big] ** 2) / f2[big]
        st[0] = st[-1] = 0.0
        return mt, st
    # C coordinates
    s = np.sqrt(np.maximum(2.0 * f2 - mu * mu, 0.0))
    mt = _lap_neumann(mu, dx) - lam * _d1(s, dx)
    et = _lap_interior(f2, dx) - lam * _d1(mu * s, dx)
    et[0] = mu[0] * mt[0]
    et[-1] = mu[-1] * mt[-1]
    return mt, et


def rhs(state: PdeState, nonlinear: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Semi-discrete time derivatives (d field1/dt, d field2/dt).

    ``nonlinear=False`` (A coordinates only) drops (sigma_x^2 + mu_x^2)/sigma,
    leaving the linear wave-like coupling.
    """
    return _rhs_arrays(state.coords, state.field1, state.field2, state.dx, state.lam, nonlinear, state.b_form)


def stable_dt(state: PdeState, c_stab: float = 0.2) -> float:
    dx = state.dx
    return c_stab * min(dx * dx, dx / state.lam)


def _impose_bc(coords, mu, f2):
    if coords == "C":
        f2[0] = 0.5 * mu[0] ** 2
        f2[-1] = 0.5 * mu[-1] ** 2
    else:
        f2[0] = f2[-1] = 0.0


@dataclass
class StepInfo:
    clamped_mass: float = 0.0
    min_w: float = 0.0


def step_pde(state: PdeState, dt: float, ref_norm: float | None = None,
             info: StepInfo | None = None, nonlinear: bool = True) -> PdeState:
    """One RK4 step; boundary values re-imposed; in B w is clamped at 0 (clamp mass in ``info``).

    Raises InstabilityError if a field becomes non-finite or exceeds
    1e6 * ``ref_norm`` (default: the current max-norm of the fields).
    """
    co, dx, lam, bf = state.coords, state.dx, state.lam, state.b_form
    mu, f2 = state.field1, state.field2
    if ref_norm is None:
        ref_norm = max(np.abs(mu).max(), np.abs(f2).max(), 1e-300)
    k1 = _rhs_arrays(co, mu, f2, dx, lam, nonlinear, bf)
    k2 = _rhs_arrays(co, mu + 0.5 * dt * k1[0], f2 + 0.5 * dt * k1[1], dx, lam, nonlinear, bf)
    k3 = _rhs_arrays(co, mu + 0.5 * dt * k2[0], f2 + 0.5 * dt * k2[1], dx, lam, nonlinear, bf)
    k4 = _rhs_arrays(co, mu + dt * k3[0], f2 + dt * k3[1], dx, lam, nonlinear, bf)
    mu_new = mu + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    f2_new = f2 + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    _impose_bc(co, mu_new, f2_new)
    if co in ("A", "B"):
        neg = f2_new < 0.0
        if np.any(neg):
            if info is not None:
                info.clamped_mass += float(-f2_new[neg].sum() * dx)
                info.min_w = min(info.min_w, float(f2_new.min()))
            f2_new[neg] = 0.0
    if not (np.all(np.isfinite(mu_new)) and np.all(np.isfinite(f2_new))):
        raise InstabilityError(f"non-finite field at t = {state.time + dt:g}")
    if max(np.abs(mu_new).max(), np.abs(f2_new).max()) > 1e6 * ref_norm:
        raise InstabilityError(f"field exceeded 1e6 x its initial norm at t = {state.time + dt:g}")
    return replace(state, field1=mu_new, field2=f2_new, time=state.time + dt)


# ---------------------------------------------------------------------------
# functionals and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Functionals:
    M: float
    E_total: float
    F: float


def _trapz(f, dx):
    return float(dx * (f.sum() - 0.5 * (f[0] + f[-1])))


def functionals(state: PdeState, c: float | None = None) -> Functionals:
    """M = int mu, E_total = int mu^2 + 2w, F = int x (mu + c); c defaults to -min mu of this state."""
    mu = state.field1
    sig = sigma_field(state)
    if c is None:
        c = -float(mu.min())
    dx = state.dx
    return Functionals(_trapz(mu, dx), _trapz(mu * mu + sig * sig, dx), _trapz(state.x * (mu + c), dx))


@dataclass
class PdeTrajectory:
    """Snapshots plus the per-step series of max sigma used for freeze detection."""
    times: list[float]
    states: list[PdeState]
    funcs: list[Functionals]
    c_shift: float
    step_times: np.ndarray
    sigma_max: np.ndarray
    meta: dict = field(default_factory=dict)

    def mu(self) -> np.ndarray:
        return np.stack([s.field1 for s in self.states])

    def sigma(self) -> np.ndarray:
        return np.stack([sigma_field(s) for s in self.states])

    def at(self, t: float) -> PdeState:
        """Snapshot whose time is closest to ``t``."""
        return self.states[int(np.argmin(np.abs(np.asarray(self.times) - t)))]


def solve(state: PdeState, t_end: float, snapshot_times: Sequence[float] | None = None,
          snapshot_every: float | None = None, c_stab: float = 0.2, dt: float | None = None) -> PdeTrajectory:
    """Integrate to ``t_end``; steps are shortened to land exactly on snapshot times.

    Snapshots are taken at ``snapshot_times`` and/or every ``snapshot_every``
    time units, always including the initial and final states.  M, E_total
    and F are recorded at every snapshot, max sigma after every step.
    """
    if not t_end > state.time:
        raise DomainError("t_end must exceed the current time")
    dt = stable_dt(state, c_stab) if dt is None else float(dt)
    targets = {state.time, float(t_end)}
    if snapshot_times is not None:
        targets.update(float(t) for t in snapshot_times if state.time <= t <= t_end)
    if snapshot_every:
        k = 1
        while state.time + k * snapshot_every < t_end:
            targets.add(state.time + k * snapshot_every)
            k += 1
    targets = sorted(targets)

    c_shift = -float(state.field1.min())
    ref = max(np.abs(state.field1).max(), np.abs(state.field2).max(), 1e-300)
    info = StepInfo()
    times, states, funcs = [state.time], [state], [functionals(state, c_shift)]
    tser = [state.time]
    smax = [float(sigma_field(state).max())]
    cur = state
    nsteps = 0
    for target in targets[1:]:
        while cur.time < target - 1e-12 * dt:
            h = min(dt, target - cur.time)
            cur = step_pde(cur, h, ref, info)
            nsteps += 1
            tser.append(cur.time)
            smax.append(float(sigma_field(cur).max()))
        cur = replace(cur, time=target)
        times.append(target)
        states.append(cur)
        funcs.append(functionals(cur, c_shift))
    meta = {"scheme": "RK4 method of lines", "coords": state.coords, "b_form": state.b_form,
            "J": state.J, "dt": dt,
            "lambda": state.lam, "steps": nsteps, "clamped_mass": info.clamped_mass,
            "min_w_before_clamp": info.min_w, "domain": list(state.domain)}
    return PdeTrajectory(times, states, funcs, c_shift, np.array(tser), np.array(smax), meta)


def freeze_time(times, sigma_max=None, threshold_fraction: float = 1e-3) -> float:
    """First time max_x sigma <= threshold * (running max of max_x sigma), linearly interpolated.

    Accepts a ``PdeTrajectory`` (its per-step series is used) or explicit
    arrays of times and max-sigma values.  Raises NotFoundError if the
    threshold is never reached.
    """
    if isinstance(times, PdeTrajectory):
        times, sigma_max = times.step_times, times.sigma_max
    t = np.asarray(times, dtype=np.float64)
    s = np.asarray(sigma_max, dtype=np.float64)
    g = s - threshold_fraction * np.maximum.accumulate(s)
    hit = np.nonzero(g <= 0.0)[0]
    if hit.size == 0:
        raise NotFoundError(f"max sigma never fell to {threshold_fraction:g} of its running max")
    i = int(hit[0])
    if i == 0:
        return float(t[0])
    g0, g1 = g[i - 1], g[i]
    return float(t[i - 1] + (t[i] - t[i - 1]) * g0 / (g0 - g1))


def reorder_monitor(traj: PdeTrajectory, eps: float = 0.1) -> dict:
    """Check F'(t) >= mu(a,t) - mu(b,t) at snapshot midpoints and time the weak reordering.

    The reorder time is the first snapshot with mu(b) >= mu(a) - eps; the
    bound is (int (mu + c)(., 0)) (b - a) / eps.
    """
    if len(traj.times) < 3:
        raise DomainError("reorder_monitor needs at least 3 snapshots")
    t = np.asarray(traj.times)
    F = np.array([f.F for f in traj.funcs])
    ma = np.array([s.field1[0] for s in traj.states])
    mb = np.array([s.field1[-1] for s in traj.states])
    dF = np.diff(F) / np.diff(t)
    gap_mid = 0.5 * ((ma[1:] - mb[1:]) + (ma[:-1] - mb[:-1]))
    ok = np.nonzero(mb >= ma - eps)[0]
    a, b = traj.states[0].domain
    s0 = traj.states[0]
    bound = _trapz(s0.field1 + traj.c_shift, s0.dx) * (b - a) / eps
    return {
        "t_mid": 0.5 * (t[1:] + t[:-1]), "dF_dt": dF, "mu_gap": gap_mid,
        "min_margin": float(np.min(dF - gap_mid)),
        "reorder_time": float(t[ok[0]]) if ok.size else None,
        "bound": bound, "eps": eps,
    }


def wave_speed(lam: float, J: int = 801, width: float = 0.02, t_end: float | None = None) -> float:
    """Propagation speed of a small pulse in the linearised (A) system.

    Dropping the nonlinear term and linearising about a constant sigma
    leaves mu_t = mu_xx - lam s_x, s_t = s_xx - lam mu_x for the
    perturbation s, so mu + s is advected to the right at speed lam.
    Returns the measured speed of that half, for comparison with ``lam``.
    """
    x = np.linspace(0.0, 1.0, J)
    dx = x[1] - x[0]
    mu = np.exp(-0.5 * ((x - 0.5) / width) ** 2)
    s = np.zeros(J)
    t_end = 0.2 / lam if t_end is None else float(t_end)
    nsteps = max(1, int(math.ceil(t_end / (0.2 * min(dx * dx, dx / lam)))))
    h = t_end / nsteps

    def f(m, q):
        return (_lap_neumann(m, dx) - lam * _d1_neumann(q, dx),
                _lap_neumann(q, dx) - lam * _d1_neumann(m, dx))

    for _ in range(nsteps):
        k1 = f(mu, s)
        k2 = f(mu + 0.5 * h * k1[0], s + 0.5 * h * k1[1])
        k3 = f(mu + 0.5 * h * k2[0], s + 0.5 * h * k2[1])
        k4 = f(mu + h * k3[0], s + h * k3[1])
        mu = mu + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        s = s + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    right = 0.5 * (mu + s)
    half = x > 0.5
    return float((x[half][np.argmax(right[half])] - 0.5) / t_end)
