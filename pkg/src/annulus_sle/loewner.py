"""Annulus, radial and disc Loewner flows.

Points are integrated in the covering (lifted) coordinate ``w~`` with
``phi = exp(i w~)``, so that the annulus equation

    d/dt phi_t(z) = phi_t(z) S_{p-t}(phi_t(z) / chi_t)

becomes ``d/dt w~ = S~_{p-t}(w~ - xi_t)`` with ``chi_t = exp(i xi_t)``.  In
this coordinate ``log|phi| = -Im w~``, so the inner circle ``|z| = e^{-p}``
is the line ``Im w~ = p``.  The radial equation is integrated in direct
coordinates together with ``log phi_t'(z)``.

All flows go through :func:`integrate`, a vectorised Dormand-Prince 5(4)
integrator in which every point carries its own clock and step size.  Steps
never cross a node of the driving grid, where the piecewise-linear driving
function has kinks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import HorizonExceedsModulus, NoConvergence, SeedTooCentral, StepFailure
from .kernel import covering_values

__all__ = [
    "DrivingPath",
    "IntegratorOptions",
    "LoewnerState",
    "TraceSample",
    "DrivingTable",
    "sample_driving",
    "integrate",
    "evolve_annulus",
    "evolve_radial",
    "evolve_disc",
    "trace_annulus",
    "trace_disc",
    "annulus_flow",
    "disc_flow",
    "annulus_trace_points",
    "disc_trace_points",
    "geometric_grid",
    "brownian_table",
    "write_trajectory_csv",
    "write_trace_csv",
]


# ---------------------------------------------------------------------------
# driving functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DrivingPath:
    """Sampled driving angle ``xi`` on a time grid.

    The driving point is ``chi_t = exp(i xi_t)`` with ``xi`` interpolated
    linearly between grid points.  For disc drivers the grid variable is
    ``s = |t|`` and ``xi(0)`` is the uniform initial angle.

    Attributes
    ----------
    kappa : float
    times : ndarray
        Strictly increasing grid starting at 0.
    xi : ndarray
        Driving angle at each grid point.
    initial_angle : float
    kind : str
    """

    kappa: float
    times: np.ndarray
    xi: np.ndarray
    initial_angle: float = 0.0
    kind: str = "custom"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        if times.ndim != 1 or times.size < 2 or times.shape != xi.shape:
            raise ValueError("times and xi must be 1-d arrays of equal length >= 2")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xi", xi)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def at(self, t):
        """Driving angle at time(s) ``t`` (linear interpolation)."""
        return np.interp(t, self.times, self.xi)

    def chi(self, t):
        return np.exp(1j * self.at(t))

    def table(self) -> "DrivingTable":
        return DrivingTable(self.times, self.xi[None, :])


@dataclass(frozen=True)
class DrivingTable:
    """Several driving angles sharing one grid (one row per replica)."""

    times: np.ndarray
    xi: np.ndarray

    def at(self, t, rep):
        times = self.times
        k = np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2)
        t0 = times[k]
        lam = (t - t0) / (times[k + 1] - t0)
        x0 = self.xi[rep, k]
        return x0 + lam * (self.xi[rep, k + 1] - x0)


def geometric_grid(horizon: float, dt0: float, growth: float = 0.0,
                   dt_max: Optional[float] = None) -> np.ndarray:
    """Grid on ``[0, horizon]`` with spacing ``dt0 + growth * s``.

    ``growth = 0`` gives a uniform grid.  The last spacing is shortened so
    that the grid ends exactly at ``horizon``.
    """
    if horizon <= 0 or dt0 <= 0:
        raise ValueError("horizon and dt0 must be positive")
    if growth == 0.0 and dt_max is None:
        n = int(np.ceil(horizon / dt0 - 1e-9))
        return np.linspace(0.0, horizon, n + 1)
    pts = [0.0]
    s = 0.0
    while s < horizon:
        h = dt0 + growth * s
        if dt_max is not None:
            h = min(h, dt_max)
        s = s + h
        pts.append(min(s, horizon))
    if pts[-1] - pts[-2] < 1e-3 * dt0 and len(pts) > 2:
        pts.pop(-2)
    return np.asarray(pts)


def sample_driving(kind: str, kappa: float, horizon: float, dt: float, seed: int,
                   func: Optional[Callable] = None,
                   times: Optional[np.ndarray] = None) -> DrivingPath:
    """Sample a driving angle.

    Parameters
    ----------
    kind : {"annulus", "radial", "disc", "constant", "custom"}
        ``annulus``/``radial`` give ``xi = B(kappa t)``; ``disc`` adds a
        uniform initial angle; ``constant`` is ``xi = 0``; ``custom``
        evaluates ``func`` on the grid.
    kappa : float
        Speed of the Brownian motion.
    horizon : float
        Last grid time.
    dt : float
        Grid spacing (ignored when ``times`` is given).
    seed : int
        Seed for :func:`numpy.random.default_rng`.
    func : callable, optional
        Driving angle as a function of time, for ``custom``.
    times : ndarray, optional
        Explicit grid starting at 0.

    Returns
    -------
    DrivingPath
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if times is None:
        if dt <= 0 or horizon <= 0:
            raise ValueError("dt and horizon must be positive")
        times = geometric_grid(horizon, dt)
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng(seed)
    init = 0.0
    if kind in ("annulus", "radial", "disc"):
        if kind == "disc":
            init = float(rng.uniform(0.0, 2.0 * np.pi))
        steps = rng.standard_normal(times.size - 1) * np.sqrt(kappa * np.diff(times))
        xi = init + np.concatenate(([0.0], np.cumsum(steps)))
    elif kind == "constant":
        xi = np.zeros_like(times)
    elif kind == "custom":
        if func is None:
            raise ValueError("custom driving needs func")
        xi = np.asarray([func(t) for t in times], dtype=float)
        init = float(xi[0])
    else:
        raise ValueError(f"unknown driving kind {kind!r}")
    return DrivingPath(kappa=float(kappa), times=times, xi=xi, initial_angle=init, kind=kind)


def brownian_table(kappa: float, times: np.ndarray, n_rep: int, rng: np.random.Generator,
                   uniform_start: bool = False) -> DrivingTable:
    """Independent Brownian driving angles on a common grid."""
    inc = rng.standard_normal((n_rep, times.size - 1)) * np.sqrt(kappa * np.diff(times))
    xi = np.concatenate((np.zeros((n_rep, 1)), np.cumsum(inc, axis=1)), axis=1)
    if uniform_start:
        xi = xi + rng.uniform(0.0, 2.0 * np.pi, size=(n_rep, 1))
    return DrivingTable(times, xi)


# ---------------------------------------------------------------------------
# integrator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntegratorOptions:
    """Settings for :func:`integrate` and the flows built on it."""

    rtol: float = 1e-10
    atol: float = 1e-10
    h_init: float = 1e-4
    h_min: float = 1e-14
    max_steps: int = 2_000_000
    swallow_threshold: float = 1e-3
    kernel_tol: float = 1e-12
    trace_eps: float = 1e-3
    trace_tol: float = 1e-6
    trace_max_refine: int = 8


_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class FlowResult:
    y: np.ndarray
    t: np.ndarray
    stopped: np.ndarray
    stop_time: np.ndarray
    steps: int


def integrate(rhs, y0, t0, t1, nodes=None, opts: IntegratorOptions = IntegratorOptions(),
              event=None, stopped=None, stop_time=None) -> FlowResult:
    """Integrate ``dy/dt = rhs(t, y, idx)`` for many points at once.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, y, idx)`` with ``t`` of shape ``(k,)``, ``y`` of shape
        ``(k, m)`` and ``idx`` the point indices; returns shape ``(k, m)``.
    y0 : ndarray, shape (n, m)
    t0, t1 : float or ndarray, shape (n,)
        Start and end time per point; all points must move in the same
        direction.
    nodes : ndarray, optional
        Sorted times that no step may cross.
    event : callable, optional
        ``event(t, y, idx) -> bool mask``; a point whose mask is true after an
        accepted step stops there (used for swallowing).
    stopped, stop_time : ndarray, optional
        Points already stopped are left untouched.

    Returns
    -------
    FlowResult
    """
    y = np.array(y0, dtype=complex, copy=True)
    n = y.shape[0]
    t = np.broadcast_to(np.asarray(t0, dtype=float), (n,)).copy()
    tend = np.broadcast_to(np.asarray(t1, dtype=float), (n,)).copy()
    stopped = np.zeros(n, bool) if stopped is None else stopped.copy()
    stop_time = np.full(n, np.nan) if stop_time is None else stop_time.copy()
    if n == 0:
        return FlowResult(y, t, stopped, stop_time, 0)
    span = tend - t
    direction = 1.0 if np.all(span >= 0) else -1.0
    if direction < 0 and np.any(span > 0):
        raise ValueError("all points must integrate in the same direction")
    h = np.full(n, opts.h_init)
    k1 = np.zeros_like(y)
    have_k1 = np.zeros(n, bool)
    steps = 0
    if nodes is not None:
        nodes = np.asarray(nodes, dtype=float)
    while True:
        active = np.nonzero(~stopped & (direction * (tend - t) > 1e-15 * np.maximum(1.0, np.abs(tend))))[0]
        if active.size == 0:
            break
        steps += 1
        if steps > opts.max_steps:
            raise StepFailure("maximum number of integrator steps exceeded")
        ta = t[active]
        ya = y[active]
        ha = np.minimum(h[active], direction * (tend[active] - ta))
        if nodes is not None:
            if direction > 0:
                j = np.searchsorted(nodes, ta * (1 + 1e-15) + 1e-15, side="right")
                nxt = nodes[np.minimum(j, nodes.size - 1)]
                lim = np.where(j < nodes.size, nxt - ta, np.inf)
            else:
                j = np.searchsorted(nodes, ta * (1 + 1e-15) - 1e-15, side="left") - 1
                prv = nodes[np.maximum(j, 0)]
                lim = np.where(j >= 0, ta - prv, np.inf)
            lim = np.where(lim > 1e-15, lim, np.inf)
            ha = np.minimum(ha, lim)
        hs = direction * ha
        ks = []
        need = ~have_k1[active]
        kk = k1[active]
        if np.any(need):
            sel = np.nonzero(need)[0]
            kk[sel] = rhs(ta[sel], ya[sel], active[sel])
        ks.append(kk)
        for s in range(1, 7):
            acc = ya.copy()
            for j, a in enumerate(_A[s]):
                if a != 0.0:
                    acc = acc + (hs * a)[:, None] * ks[j]
            ks.append(rhs(ta + _C[s] * hs, acc, active))
        y5 = ya.copy()
        for j in range(7):
            if _B5[j] != 0.0:
                y5 = y5 + (hs * _B5[j])[:, None] * ks[j]
        errv = np.zeros_like(ya)
        for j in range(7):
            errv = errv + (hs * _E[j])[:, None] * ks[j]
        scale = opts.atol + opts.rtol * np.maximum(np.abs(ya), np.abs(y5))
        err = np.max(np.abs(errv) / scale, axis=1)
        bad = ~np.isfinite(err) | ~np.all(np.isfinite(y5), axis=1)
        err = np.where(bad, np.inf, err)
        ok = err <= 1.0
        fac = 0.9 * np.maximum(err, 1e-12) ** -0.2
        fac = np.clip(fac, 0.2, 5.0)
        fac = np.where(bad, 0.1, fac)
        hnew = ha * fac
        acc_idx = active[ok]
        t[acc_idx] = ta[ok] + hs[ok]
        y[acc_idx] = y5[ok]
        k1[acc_idx] = ks[6][ok]
        have_k1[acc_idx] = True
        # k1 stays valid for rejected points (they did not move); a step that
        # was shortened by a node or the end time keeps its previous size
        hprev = h[active]
        h[active] = np.where(ok & (ha < hprev), np.maximum(hprev, hnew), hnew)
        if np.any(~ok & (hnew < opts.h_min)):
            raise StepFailure("step size underflow: tolerance cannot be met")
        if event is not None and acc_idx.size:
            hit = event(t[acc_idx], y[acc_idx], acc_idx)
            if np.any(hit):
                w = acc_idx[hit]
                stopped[w] = True
                stop_time[w] = t[w]
    return FlowResult(y, t, stopped, stop_time, steps)


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoewnerState:
    """Snapshot of a Loewner flow at one time.

    Attributes
    ----------
    p : float
        Initial modulus (annulus), start time (disc) or ``inf`` (radial).
    t : float
        Time of the snapshot.
    seeds : ndarray
        Initial points.
    z : ndarray
        Current images ``phi_t(seed)``; frozen at swallowing.
    swallowed : ndarray of bool
    swallow_time : ndarray
        ``nan`` for points not swallowed.
    drift_adjusted : bool
    kind : str
        ``"annulus"``, ``"radial"`` or ``"disc"``.
    log_derivative : ndarray, optional
        ``log phi_t'(seed)`` (radial flow only).
    """

    p: float
    t: float
    seeds: np.ndarray
    z: np.ndarray
    swallowed: np.ndarray
    swallow_time: np.ndarray
    drift_adjusted: bool = False
    kind: str = "annulus"
    log_derivative: Optional[np.ndarray] = None

    @property
    def reflected(self) -> np.ndarray:
        """Disc flows: ``e^t / phi``, which approximates the seed itself early on."""
        return np.exp(self.t) / self.z

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "p": self.p,
            "t": self.t,
            "drift_adjusted": self.drift_adjusted,
            "seeds": [[float(v.real), float(v.imag)] for v in self.seeds],
            "z": [[float(v.real), float(v.imag)] for v in self.z],
            "swallowed": [bool(b) for b in self.swallowed],
            "swallow_time": [None if np.isnan(s) else float(s) for s in self.swallow_time],
        }
        return d


@dataclass(frozen=True)
class TraceSample:
    """Trace positions ``beta(t)`` on a time grid."""

    times: np.ndarray
    points: np.ndarray
    eps_used: np.ndarray = field(default_factory=lambda: np.zeros(0))


def write_trajectory_csv(states: Sequence[LoewnerState], path) -> None:
    """CSV with columns ``time, point_id, re, im, swallowed``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "point_id", "re", "im", "swallowed"])
        for st in states:
            for i, (z, s) in enumerate(zip(st.z, st.swallowed)):
                w.writerow([repr(st.t), i, repr(z.real), repr(z.imag), int(s)])


def write_trace_csv(trace: TraceSample, path) -> None:
    """CSV with columns ``time, re, im``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "re", "im"])
        for t, z in zip(trace.times, trace.points):
            w.writerow([repr(float(t)), repr(z.real), repr(z.imag)])


def states_to_json(states: Sequence[LoewnerState]) -> str:
    return json.dumps([s.to_dict() for s in states])


# ---------------------------------------------------------------------------
# flows on tables of drivers (used by the public wrappers and experiments)
# ---------------------------------------------------------------------------


def _lift(z):
    return -1j * np.log(np.asarray(z, dtype=complex))


def _swallow_event(table, rep, thr, t_to_s=None):
    def event(t, y, idx):
        s = t if t_to_s is None else t_to_s(t)
        xi = table.at(s, rep[idx])
        return np.abs(np.exp(1j * (y[:, 0] - xi)) - 1.0) < thr
    return event


def annulus_flow(p, table: DrivingTable, rep, w, t0, t1, opts=IntegratorOptions(),
                 drift_adjusted=False, stopped=None, stop_time=None, detect_swallow=True):
    """Flow lifted points under the annulus equation from ``t0`` to ``t1``.

    Works in either time direction (backward flows are used for traces).
    ``rep`` gives the driving row of every point.
    """
    rep = np.asarray(rep)
    tol = opts.kernel_tol

    def rhs(t, y, idx):
        r = p - t
        xi = table.at(t, rep[idx])
        vals, _ = covering_values(r, y[:, 0] - xi, tol=tol)
        out = vals[0]
        if drift_adjusted:
            c, _ = covering_values(r, 1j * r - xi, tol=tol)
            out = out - c[0].real
        return out[:, None]

    event = _swallow_event(table, rep, opts.swallow_threshold) if detect_swallow else None
    res = integrate(rhs, np.asarray(w, complex)[:, None], t0, t1, nodes=table.times, opts=opts,
                    event=event, stopped=stopped, stop_time=stop_time)
    return res


def disc_flow(table: DrivingTable, rep, w, t0, t1, opts=IntegratorOptions(),
              stopped=None, stop_time=None, detect_swallow=True):
    """Flow lifted raw disc coordinates; times are negative, ``xi`` read at ``|t|``."""
    rep = np.asarray(rep)
    tol = opts.kernel_tol

    def rhs(t, y, idx):
        r = -t
        xi = table.at(r, rep[idx])
        vals, _ = covering_values(r, y[:, 0] - xi, tol=tol)
        return vals[0][:, None]

    event = _swallow_event(table, rep, opts.swallow_threshold, t_to_s=lambda t: -t) if detect_swallow else None
    nodes = -table.times[::-1]
    return integrate(rhs, np.asarray(w, complex)[:, None], t0, t1, nodes=nodes, opts=opts,
                     event=event, stopped=stopped, stop_time=stop_time)


def _refine_trace(flow_from, xi_start, opts):
    """Shared epsilon-refinement of backward trace flows.

    ``flow_from(w_start, sel)`` returns the endpoint of the backward flow for
    the subset ``sel`` of trace points.
    """
    n = xi_start.size
    eps = np.full(n, opts.trace_eps)
    prev = flow_from(xi_start + 1j * eps, np.arange(n))
    done = np.zeros(n, bool)
    out = prev.copy()
    for _ in range(opts.trace_max_refine):
        todo = np.nonzero(~done)[0]
        if todo.size == 0:
            break
        eps[todo] *= 0.5
        cur = flow_from(xi_start[todo] + 1j * eps[todo], todo)
        diff = np.abs(cur - prev[todo])
        ok = diff < opts.trace_tol
        out[todo] = cur
        done[todo[ok]] = True
        prev[todo] = cur
    if not np.all(done):
        bad = np.nonzero(~done)[0]
        raise NoConvergence(f"trace refinement stalled at {bad.size} times",
                            last=out[bad], previous=prev[bad])
    return out, eps


def annulus_trace_points(p, table, rep, times, opts=IntegratorOptions()):
    """Trace ``beta(t)`` for the annulus flow, one entry per ``(rep, time)``."""
    times = np.asarray(times, float)
    rep = np.asarray(rep)
    xi = table.at(times, rep)

    def flow_from(w, sel):
        res = annulus_flow(p, table, rep[sel], w, times[sel], 0.0, opts, detect_swallow=False)
        return np.exp(1j * res.y[:, 0])

    pts = np.ones(times.size, complex)
    pos = times > 0
    eps = np.zeros(times.size)
    if np.any(pos):
        idx = np.nonzero(pos)[0]
        sub = _refine_trace(lambda w, sel: flow_from(w, idx[sel]), xi[idx], opts)
        pts[idx], eps[idx] = sub
    return pts, eps


def disc_trace_points(r_start, table, rep, times, opts=IntegratorOptions()):
    """Disc trace ``gamma(t) = g_t^{-1}(chi_t)`` for negative ``times``."""
    times = np.asarray(times, float)
    rep = np.asarray(rep)
    xi = table.at(-times, rep)

    def flow_from(w, sel):
        res = disc_flow(table, rep[sel], w, times[sel], r_start, opts, detect_swallow=False)
        return np.exp(r_start) / np.exp(1j * res.y[:, 0])

    return _refine_trace(flow_from, xi, opts)


# ---------------------------------------------------------------------------
# public engines
# ---------------------------------------------------------------------------


def _checkpoints(checkpoints, default_end):
    if checkpoints is None:
        return np.array([0.0, default_end])
    cp = np.asarray(checkpoints, dtype=float)
    if np.any(np.diff(cp) < 0):
        raise ValueError("checkpoints must be non-decreasing")
    return cp


def evolve_annulus(p: float, driving: DrivingPath, seeds, opts: IntegratorOptions = IntegratorOptions(),
                   checkpoints=None, drift_adjusted: bool = False) -> list[LoewnerState]:
    """Integrate the annulus Loewner equation for a set of seeds.

    Parameters
    ----------
    p : float
        Modulus of the initial annulus.
    driving : DrivingPath
    seeds : array_like of complex
        Points of the closed annulus ``e^{-p} <= |z| <= 1``.
    opts : IntegratorOptions
    checkpoints : array_like, optional
        Times at which states are returned (default ``[0, horizon]``).
    drift_adjusted : bool
        Remove the rotation drift so that ``e^{-p}`` maps to ``e^{t-p}``.

    Returns
    -------
    list of LoewnerState
    """
    seeds = np.atleast_1d(np.asarray(seeds, dtype=complex))
    cps = _checkpoints(checkpoints, driving.horizon)
    if cps.size and (cps[-1] >= p):
        raise HorizonExceedsModulus(f"time {cps[-1]} reaches modulus {p}")
    if cps.size and (cps[-1] > driving.horizon + 1e-12 or cps[0] < 0):
        raise ValueError("checkpoints outside the driving horizon")
    table = driving.table()
    rep = np.zeros(seeds.size, int)
    w = _lift(seeds)
    stopped = np.zeros(seeds.size, bool)
    stop_time = np.full(seeds.size, np.nan)
    t_cur = 0.0
    states = []
    for tc in cps:
        res = annulus_flow(p, table, rep, w, t_cur, tc, opts, drift_adjusted, stopped, stop_time)
        w, stopped, stop_time, t_cur = res.y[:, 0], res.stopped, res.stop_time, float(tc)
        states.append(LoewnerState(p=p, t=float(tc), seeds=seeds, z=np.exp(1j * w),
                                   swallowed=stopped.copy(), swallow_time=stop_time.copy(),
                                   drift_adjusted=drift_adjusted, kind="annulus"))
    return states


def evolve_radial(driving: DrivingPath, seeds, opts: IntegratorOptions = IntegratorOptions(),
                  checkpoints=None) -> list[LoewnerState]:
    """Integrate the radial Loewner equation with derivative tracking.

    Alongside ``phi`` the flow carries ``L = log phi_t'(z)`` through
    ``dL/dt = K(u) + u K'(u)`` with ``u = phi / chi`` and
    ``K(u) = (1 + u) / (1 - u)``; at the origin this gives ``|phi_t'(0)| = e^t``.
    """
    seeds = np.atleast_1d(np.asarray(seeds, dtype=complex))
    cps = _checkpoints(checkpoints, driving.horizon)
    table = driving.table()
    rep = np.zeros(seeds.size, int)

    def rhs(t, y, idx):
        chi = np.exp(1j * table.at(t, rep[idx]))
        u = y[:, 0] / chi
        k = (1.0 + u) / (1.0 - u)
        return np.stack([y[:, 0] * k, k + 2.0 * u / (1.0 - u) ** 2], axis=1)

    def event(t, y, idx):
        chi = np.exp(1j * table.at(t, rep[idx]))
        return np.abs(y[:, 0] / chi - 1.0) < opts.swallow_threshold

    y = np.stack([seeds, np.zeros_like(seeds)], axis=1)
    stopped = np.zeros(seeds.size, bool)
    stop_time = np.full(seeds.size, np.nan)
    t_cur = 0.0
    states = []
    for tc in cps:
        res = integrate(rhs, y, t_cur, tc, nodes=table.times, opts=opts, event=event,
                        stopped=stopped, stop_time=stop_time)
        y, stopped, stop_time, t_cur = res.y, res.stopped, res.stop_time, float(tc)
        states.append(LoewnerState(p=np.inf, t=float(tc), seeds=seeds, z=y[:, 0].copy(),
                                   swallowed=stopped.copy(), swallow_time=stop_time.copy(),
                                   kind="radial", log_derivative=y[:, 1].copy()))
    return states


def evolve_disc(r_start: float, driving: DrivingPath, seeds, opts: IntegratorOptions = IntegratorOptions(),
                checkpoints=None) -> list[LoewnerState]:
    """Finite-start approximation of the disc Loewner maps.

    The flow ``phi^r_t`` of ``d/dt phi = phi S_{|t|}(phi / chi_t)`` started at
    the identity at ``t = r_start`` is applied to ``e^{r_start} / z``; the
    result approximates ``g_t(z)``.  In the reflected coordinate
    ``e^t / g_t(z)`` the truncation error is at most ``8 e^{r_start}``.

    Parameters
    ----------
    r_start : float
        Negative start time.
    driving : DrivingPath
        Disc driver; the angle at time ``t`` is ``driving.at(|t|)``.
    seeds : array_like of complex
        Points with ``12 e^{r_start} <= |z| <= 1``.
    checkpoints : array_like, optional
        Times in ``[r_start, 0)`` (default ``[r_start]``).
    """
    if r_start >= 0:
        raise ValueError("r_start must be negative")
    if driving.horizon < -r_start - 1e-12:
        raise ValueError("driving horizon shorter than |r_start|")
    seeds = np.atleast_1d(np.asarray(seeds, dtype=complex))
    if np.any(np.abs(seeds) < 12.0 * np.exp(r_start)) or np.any(np.abs(seeds) > 1.0 + 1e-12):
        raise SeedTooCentral("seeds must satisfy 12 e^{r_start} <= |z| <= 1")
    cps = np.array([r_start]) if checkpoints is None else np.asarray(checkpoints, float)
    if np.any(cps < r_start) or np.any(cps >= 0) or np.any(np.diff(cps) < 0):
        raise ValueError("checkpoints must be sorted within [r_start, 0)")
    table = driving.table()
    rep = np.zeros(seeds.size, int)
    w = _lift(np.exp(r_start) / seeds)
    stopped = np.zeros(seeds.size, bool)
    stop_time = np.full(seeds.size, np.nan)
    t_cur = r_start
    states = []
    for tc in cps:
        res = disc_flow(table, rep, w, t_cur, tc, opts, stopped, stop_time)
        w, stopped, stop_time, t_cur = res.y[:, 0], res.stopped, res.stop_time, float(tc)
        states.append(LoewnerState(p=r_start, t=float(tc), seeds=seeds, z=np.exp(1j * w),
                                   swallowed=stopped.copy(), swallow_time=stop_time.copy(),
                                   kind="disc"))
    return states


def trace_annulus(p: float, driving: DrivingPath, trace_times,
                  opts: IntegratorOptions = IntegratorOptions()) -> TraceSample:
    """Annulus trace by backward flow from just inside the driving point.

    For each ``t`` the lifted point ``xi_t + i eps`` is flowed back to time 0;
    ``eps`` is halved until successive results agree within
    ``opts.trace_tol``.

    Raises
    ------
    NoConvergence
        If the refinement stalls.
    """
    times = np.asarray(trace_times, float)
    if np.any(times < 0) or np.any(times > driving.horizon + 1e-12):
        raise ValueError("trace times outside the driving horizon")
    if np.any(times >= p):
        raise HorizonExceedsModulus("trace time reaches the modulus")
    pts, eps = annulus_trace_points(p, driving.table(), np.zeros(times.size, int), times, opts)
    return TraceSample(times=times, points=pts, eps_used=eps)


def trace_disc(r_start: float, driving: DrivingPath, trace_times,
               opts: IntegratorOptions = IntegratorOptions()) -> TraceSample:
    """Disc trace ``gamma(t)`` for ``r_start < t < 0`` (finite-start approximation)."""
    times = np.asarray(trace_times, float)
    if np.any(times <= r_start) or np.any(times >= 0):
        raise ValueError("trace times must lie in (r_start, 0)")
    pts, eps = disc_trace_points(r_start, driving.table(), np.zeros(times.size, int), times, opts)
    return TraceSample(times=times, points=pts, eps_used=eps)
