"""Experiments and command line interface.

Every experiment takes a configuration dictionary (missing keys fall back to
:data:`DEFAULTS`), a seed base and optionally an output directory, and
returns a report dictionary::

    {"experiment": ..., "config": ..., "seed_base": ..., "metrics": [...],
     "verdict": bool, ...}

Each metric records its value, tolerance and pass flag; the verdict is the
conjunction of all metric flags.  Replica ``i`` uses seed ``seed_base + i``.

The command line wraps the experiments::

    annulus-sle <subcommand> [--config cfg.json] [--seed N] [--out DIR] [--threads N]

Exit codes: 0 all verdicts pass, 1 some verdict fails, 2 configuration or
runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import AnnulusSLEError, ConfigError, MartingaleStop, TipIsolated
from .grid import B1, B2, INTERIOR, DomainSpec, LatticeDomain, build_cylinder, build_lattice, prune_reachable
from .harmonic import (
    SlitEngine,
    cut_flux,
    flux,
    solve_h,
    solve_q,
    estimate_modulus,
    hitting_distribution,
    solve_f,
    solve_g,
    uniformize_annulus,
    _martingale_fields,
)
from .kernel import KernelContext, covering_values, reflected_S, schwarz_S
from .lerw import (
    access_probability,
    exact_lerw_law,
    extract_driving,
    lerw_path_probability,
    mirror_map,
    sample_lerw,
)
from .loewner import (
    IntegratorOptions,
    annulus_flow,
    brownian_table,
    disc_flow,
    disc_trace_points,
    evolve_annulus,
    evolve_disc,
    evolve_radial,
    geometric_grid,
    sample_driving,
    states_to_json,
    trace_annulus,
    trace_disc,
    write_trace_csv,
    write_trajectory_csv,
)

log = logging.getLogger("annulus_sle")

THREADS_ENV = "ANNULUS_SLE_THREADS"

DEFAULTS = {
    "check-kernel": {"r_min": 0.3, "r_max": 5.0, "n_r": 20, "n_z": 50, "tol": 1e-8,
                     "kernel_tol": 1e-12, "n_boundary": 200, "n_bound_r": 40},
    "ode-invariants": {"p": 1.5, "kappa": 2.0, "dt": 1e-3, "n_seeds": 16, "tol": 1e-6,
                       "delta": 0.01, "clock_times": [0.25, 0.5], "clock_tol": 0.03},
    "martingale-continuum": {"p": 2.0, "kappa": 2.0, "n_rep": 10000, "points": [[-0.5, 0.0], [0.0, 0.2207276647028654]],
                             "times": [0.0, 0.2, 0.4], "dt": 5e-3, "rtol": 1e-8, "n_se": 3.0,
                             "swallow_fraction": 0.01, "control_kappa": 4.0, "control_n_rep": 100000},
    "martingale-discrete": {"p": 1.0, "delta": 0.05, "n_seeds": 50, "tol": 1e-10,
                            "points": [[-0.5, 0.0], [0.0, 0.6], [0.0, -0.6], [0.6, 0.0]]},
    "observable-convergence": {"p": 1.0, "deltas": [0.1, 0.05, 0.025, 0.0125], "slit_end": 0.75,
                               "collar": 0.15, "collar_alt": 0.25},
    "driving-stats": {"p": 1.5, "delta": 0.01, "n_rep": 2000, "times": [0.15, 0.3, 0.45],
                      "spacing": 0.01, "var_tol": 0.15, "n_se": 3.0, "n_reflect": 3},
    "hitting-law": {"p": 1.0, "delta": 0.01, "n_rep": 10000, "p_floor": 0.01},
    "reversibility": {"tiny_n": 6, "tiny_p": 2.2, "n": 64, "p": 1.0, "n_rep": 10000,
                      "exact_tol": 1e-12, "p_floor": 0.01},
    "disc-harmonic-measure": {"kappa": 6.0, "eps": 0.02, "n_rep": 5000, "r_starts": [-10.0, -12.0],
                              "dt0": 2e-3, "growth": 0.05, "dt_max": 0.1, "scan": 12, "bisect": 8,
                              "t_min": -3.0, "t_max": -0.02, "rtol": 1e-6, "kernel_tol": 1e-9, "p_floor": 0.01, "batch": 1000},
    "run-sle": {"kind": "annulus", "kappa": 2.0, "p": 2.0, "horizon": 0.5, "dt": 1e-3,
                "seeds": [[-0.5, 0.0], [0.0, 0.5]], "checkpoints": [0.0, 0.25, 0.5],
                "trace_times": [0.1, 0.2, 0.3], "r_start": -10.0},
    "sample-lerw": {"domain": "annulus", "p": 1.0, "delta": 0.05, "n": 16, "n_samples": 5,
                    "capacity": True, "driving": False, "spacing": 0.01},
}


def merge_config(name: str, cfg: Optional[dict]) -> dict:
    """Defaults for ``name`` updated with ``cfg``; unknown keys raise :class:`ConfigError`."""
    if name not in DEFAULTS:
        raise ConfigError(f"unknown experiment {name!r}")
    out = copy.deepcopy(DEFAULTS[name])
    for k, v in (cfg or {}).items():
        if k in ("experiment",):
            continue
        if k not in out:
            raise ConfigError(f"unknown key {k!r} for {name}")
        out[k] = v
    for key in ("n_rep", "n_seeds", "n_samples"):
        if key in out and int(out[key]) < 1:
            raise ConfigError(f"{key} must be at least 1")
    return out


def _metric(name, value, tol, passed, **extra):
    return {"name": name, "value": _jsonable(value), "tolerance": _jsonable(tol), "pass": bool(passed), **extra}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return None if not np.isfinite(x) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def _report(name, cfg, seed, metrics, t0, **extra):
    return _jsonable({"experiment": name, "config": cfg, "seed_base": int(seed), "metrics": metrics,
                      "verdict": all(m["pass"] for m in metrics), "runtime_s": time.time() - t0, **extra})


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _annulus_domain(p, delta):
    return prune_reachable(build_lattice(DomainSpec.annulus(p), delta))


def _nearest(g: LatticeDomain, z: complex, mask=None) -> int:
    d = np.abs(g.complex_points - z)
    if mask is not None:
        d = np.where(mask, d, np.inf)
    return int(np.argmin(d))


def _threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    return max(1, int(threads))


def _pmap(func: Callable, chunks: list, threads: int) -> list:
    if threads <= 1 or len(chunks) <= 1:
        return [func(c) for c in chunks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(func, chunks))


def _chunks(seq, k):
    seq = list(seq)
    k = max(1, min(k, len(seq)))
    size = -(-len(seq) // k)
    return [seq[i:i + size] for i in range(0, len(seq), size)]


# ---------------------------------------------------------------------------
# kernel identities
# ---------------------------------------------------------------------------

def exp_kernel_suite(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Residuals of the covering-kernel identities over an ``(r, z)`` sweep.

    Metrics: the modulus-derivative identity
    ``d/dr S~ - S~ S~' - S~''``, boundary values of ``Re S_r`` on both
    circles, the reflected-kernel bound ``8 e^{-r} / |z|`` and agreement of
    the direct series with the theta route.
    """
    name = "check-kernel"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    rng = np.random.default_rng(seed)
    rs = np.linspace(cfg["r_min"], cfg["r_max"], cfg["n_r"])
    ktol = cfg["kernel_tol"]
    ident, cross, bd_in, bd_out, viol = 0.0, 0.0, 0.0, 0.0, 0
    rows = []
    for r in rs:
        z = rng.uniform(-np.pi, np.pi, cfg["n_z"]) + 1j * r * rng.uniform(-0.9, 0.9, cfg["n_z"])
        z = np.where(np.abs(z) < 0.05, z + 0.1, z)
        d, dr = covering_values(r, z, nderiv=2, with_dr=True, tol=ktol)
        res = np.abs(dr - d[0] * d[1] - d[2])
        scale = np.maximum(1.0, np.abs(d[0] * d[1]) + np.abs(d[2]))
        ident = max(ident, float(np.max(res / scale)))
        a = covering_values(r, z, nderiv=2, tol=ktol, method="series")[0]
        b = covering_values(r, z, nderiv=2, tol=ktol, method="theta")[0]
        disc = max(float(np.max(np.abs(x - y) / np.maximum(1.0, np.abs(x)))) for x, y in zip(a, b))
        cross = max(cross, disc)
        ctx = KernelContext(r, tol=ktol)
        th = np.linspace(0.05, 2 * np.pi - 0.05, cfg["n_boundary"])
        bd_in = max(bd_in, float(np.max(np.abs(np.real(schwarz_S(ctx, np.exp(-r + 1j * th))) - 1.0))))
        bd_out = max(bd_out, float(np.max(np.abs(np.real(schwarz_S(ctx, np.exp(1j * th)))))))
        rows.append([r, float(np.max(res)), disc])
        if r >= np.log(4.0) + 1e-9:
            rad = np.exp(np.linspace(np.log(4 * np.exp(-r)), 0.0, cfg["n_bound_r"]))
            zz = (rad[:, None] * np.exp(1j * th[None, ::5])).ravel()
            val = np.abs(np.asarray(reflected_S(ctx, zz)))
            viol += int(np.sum(val > 8 * np.exp(-r) / np.abs(zz) * (1 + 1e-12)))
    tol = cfg["tol"]
    metrics = [
        _metric("modulus_derivative_identity", ident, tol, ident < tol),
        _metric("inner_circle_real_part_one", bd_in, tol, bd_in < tol),
        _metric("outer_circle_real_part_zero", bd_out, tol, bd_out < tol),
        _metric("reflected_bound_violations", viol, 0, viol == 0),
        _metric("series_vs_theta", cross, 10 * ktol, cross < 10 * ktol),
    ]
    if out:
        _write_csv(Path(out) / "kernel_residuals.csv", ["r", "identity_residual", "series_theta_gap"], rows)
    return _report(name, cfg, seed, metrics, t0)


# ---------------------------------------------------------------------------
# ODE invariants
# ---------------------------------------------------------------------------

def radial_slit_path(g: LatticeDomain, x_tip: float) -> list:
    """Marked vertex followed by the lattice points of ``[x_tip, 1)`` on the real axis."""
    i0, j0 = g.lattice_ij[g.marked_vertex]
    path = [g.marked_vertex]
    i = int(i0) - 1
    while i * g.delta >= x_tip - 1e-12:
        v = g.lattice_index.get((i, int(j0)))
        if v is None or g.labels[v] != INTERIOR:
            break
        path.append(v)
        i -= 1
    return path


def exp_ode_invariants(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Inner-circle invariance, the drift-adjusted fixed point and the capacity clock."""
    name = "ode-invariants"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    p = cfg["p"]
    horizon = p / 2
    drv = sample_driving("annulus", cfg["kappa"], horizon, cfg["dt"], seed)
    th = np.linspace(0, 2 * np.pi, cfg["n_seeds"], endpoint=False) + 0.3
    seeds = np.exp(-p + 1j * th)
    cps = np.linspace(0, horizon, 6)
    st = evolve_annulus(p, drv, seeds, checkpoints=cps)
    inner = max(float(np.max(np.abs(np.abs(s.z) - np.exp(s.t - p)))) for s in st)
    sa = evolve_annulus(p, drv, [np.exp(-p)], checkpoints=cps, drift_adjusted=True)
    fixed = max(float(abs(s.z[0] - np.exp(s.t - p))) for s in sa)
    # capacity clock: constant driving grows the slit [x_t, 1]
    const = sample_driving("constant", 0.0, max(cfg["clock_times"]), cfg["dt"], seed)
    tr = trace_annulus(p, const, cfg["clock_times"])
    g = _annulus_domain(p, cfg["delta"])
    eng = SlitEngine(g)
    clock = []
    for t, z in zip(cfg["clock_times"], tr.points):
        path = radial_slit_path(g, float(z.real))
        M = float(eng.path(path).moduli([len(path) - 1])[0])
        clock.append({"t": t, "tip": float(z.real), "modulus": M, "rel_err": abs(M - (p - t)) / (p - t)})
    worst = max(c["rel_err"] for c in clock)
    metrics = [
        _metric("inner_circle_radius_error", inner, cfg["tol"], inner < cfg["tol"]),
        _metric("drift_adjusted_fixed_point_error", fixed, cfg["tol"], fixed < cfg["tol"]),
        _metric("capacity_clock_rel_error", worst, cfg["clock_tol"], worst < cfg["clock_tol"], detail=clock),
    ]
    return _report(name, cfg, seed, metrics, t0, base_modulus=eng.M_full)


# ---------------------------------------------------------------------------
# continuum martingales
# ---------------------------------------------------------------------------

def _continuum_run(p, kappa, n_rep, points, times, dt, rtol, seed):
    grid = geometric_grid(max(times), dt)
    table = brownian_table(kappa, grid, n_rep, np.random.default_rng(seed))
    npnt = len(points)
    rep = np.repeat(np.arange(n_rep), npnt)
    w = np.tile(-1j * np.log(points), n_rep)
    stopped = np.zeros(w.size, bool)
    stop_time = np.full(w.size, np.nan)
    opts = IntegratorOptions(rtol=rtol, atol=rtol)
    t_cur = 0.0
    H, P, sw = [], [], []
    for t in times:
        if t > t_cur:
            res = annulus_flow(p, table, rep, w, t_cur, t, opts, stopped=stopped, stop_time=stop_time)
            w, stopped, stop_time, t_cur = res.y[:, 0], res.stopped, res.stop_time, t
        r = p - t
        xi = table.at(t, rep) if t > 0 else np.zeros(w.size)
        h = -covering_values(r, w - xi)[0][0].imag
        H.append(h.reshape(n_rep, npnt))
        P.append((-w.imag + r * h).reshape(n_rep, npnt))
        sw.append(stopped.reshape(n_rep, npnt).copy())
    return np.array(H), np.array(P), np.array(sw)


def _flatness(H, P, sw, n_se):
    """Per (observable, time, point) means, SEs and flatness flags."""
    rows, flat = [], True
    nt, _, npnt = H.shape
    for name, X in (("H", H), ("P", P)):
        for k in range(nt):
            for j in range(npnt):
                x = X[k, :, j]
                m, se = float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))
                ref = float(np.mean(X[0, :, j]))
                z = abs(m - ref) / se if se > 0 else (0.0 if abs(m - ref) < 1e-12 else np.inf)
                swallowed = bool(np.any(sw[k, :, j]))
                ok = (z < n_se) or swallowed
                flat &= ok
                rows.append({"observable": name, "t_index": k, "point": j, "mean": m, "se": se,
                             "z": z, "swallowed_any": swallowed, "flat": ok})
    return rows, flat


def exp_continuum_martingale(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Monte Carlo flatness of ``H_t`` and ``P_t`` under annulus SLE, with a kappa control."""
    name = "martingale-continuum"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    p = cfg["p"]
    pts = np.array([complex(a, b) for a, b in cfg["points"]])
    times = sorted(cfg["times"])
    if times[0] != 0.0:
        raise ConfigError("times must include 0")
    H, P, sw = _continuum_run(p, cfg["kappa"], cfg["n_rep"], pts, times, cfg["dt"], cfg["rtol"], seed)
    exact0 = np.real(schwarz_S(KernelContext(p), pts))
    rows, flat = _flatness(H, P, sw, cfg["n_se"])
    sw_frac = float(np.max(sw[-1].mean(axis=0)))
    t0_err = float(np.max(np.abs(H[0].mean(axis=0) - exact0)))
    metrics = [
        _metric("flatness_kappa", flat, cfg["n_se"], flat, detail=rows),
        _metric("t0_matches_kernel", t0_err, 1e-12, t0_err < 1e-12),
        _metric("swallowed_fraction", sw_frac, cfg["swallow_fraction"], sw_frac <= cfg["swallow_fraction"]),
    ]
    if cfg["control_n_rep"]:
        Hc, Pc, swc = _continuum_run(p, cfg["control_kappa"], cfg["control_n_rep"], pts, times, cfg["dt"],
                                     cfg["rtol"], seed + 7919)
        rows_c, flat_c = _flatness(Hc, Pc, swc, cfg["n_se"])
        metrics.append(_metric("control_detects_drift", not flat_c, cfg["n_se"], not flat_c, detail=rows_c))
    if out:
        _write_csv(Path(out) / "continuum_means.csv", ["observable", "t", "point", "mean", "se", "z"],
                   [[r["observable"], times[r["t_index"]], r["point"], r["mean"], r["se"], r["z"]] for r in rows])
    return _report(name, cfg, seed, metrics, t0)


# ---------------------------------------------------------------------------
# exact discrete identities
# ---------------------------------------------------------------------------

def discrete_identities(g: LatticeDomain, prefix) -> dict:
    """Residuals of the exact flux identities for one slit prefix.

    With ``A = F``, ``B = E_init u prefix[:-1]`` and ``x = prefix[-1]``:
    flux antisymmetry ``L(A, B) = L(B, A)``, the source identity
    ``sum_A Delta h = f(x) (-Delta h(x))``, the three flux properties of
    ``g``, the ``2 pi`` normalization of ``q`` and the net flux of ``g`` and
    ``q`` across a circle separating the prefix from ``F``.
    """
    prefix = [int(v) for v in prefix if g.labels[int(v)] == INTERIOR]
    A = g.F
    B = np.union1d(g.E_init, np.asarray(prefix[:-1], np.int64)).astype(np.int64)
    x = prefix[-1]
    f = solve_f(g, A, B)
    f_rev = solve_f(g, B, A)
    h = solve_h(g, x, np.r_[A, B])
    gg = solve_g(g, A, B, x)
    q = solve_q(g, A, B, x)
    lap_h = h.laplacian()
    lap_g = gg.laplacian()
    lap_q = q.laplacian()
    L = flux(f, B)
    Bx = np.r_[B, x]
    free = np.ones(g.n, bool)
    free[np.r_[A, B, x]] = False
    z = np.abs(g.complex_points)
    r_cut = 0.5 * (float(np.max(z[A])) + float(np.min(z[prefix])))
    side = np.nonzero(z > r_cut)[0]
    res = {
        "flux_antisymmetry": abs(L - flux(f_rev, A)),
        "flux_balance": abs(L + flux(f, A)),
        "source_identity": abs(float(np.sum(lap_h[A])) - f.values[x] * (-lap_h[x])),
        "g_no_flux_into_A": abs(float(np.sum(lap_g[A]))),
        "g_balance_B_and_x": abs(float(np.sum(lap_g[Bx]))),
        "g_source_value": abs(lap_g[x] + L / f.values[x]),
        "g_harmonic": float(np.max(np.abs(lap_g[free]))) if free.any() else 0.0,
        "q_flux_into_A": abs(float(np.sum(lap_q[A])) - 2 * np.pi),
        "q_flux_out_of_E": abs(float(np.sum(lap_q[Bx])) + 2 * np.pi),
        "g_cut_flux": abs(cut_flux(gg, side)),
        "q_cut_flux": abs(cut_flux(q, side) - 2 * np.pi),
    }
    return {k: float(v) for k, v in res.items()}


def random_identity_instances(n: int, seed: int):
    """``n`` random small annulus lattices with LERW prefixes of random length."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        p = float(rng.uniform(0.6, 2.0))
        k = int(rng.integers(6, 16))
        g = _annulus_domain(p, 1.0 / k)
        path = sample_lerw(g, int(rng.integers(0, 2 ** 31)), access_probability(g)).path
        z = np.abs(g.complex_points[path])
        # keep the prefix outside a circle that still separates it from F
        room = np.nonzero(z < 0.5 * (1 + np.exp(-p)))[0]
        stop = int(room[0]) if room.size else path.size - 1
        if stop < 2:
            continue
        m = int(rng.integers(2, stop + 1))
        out.append((g, path[:m]))
    return out


# ---------------------------------------------------------------------------
# discrete martingales
# ---------------------------------------------------------------------------

def exp_discrete_martingale(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Exact one-step martingale residuals of ``g`` and ``q`` along sampled LERW prefixes."""
    name = "martingale-discrete"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    g = _annulus_domain(cfg["p"], cfg["delta"])
    f = access_probability(g)
    free = g.labels == INTERIOR
    v0s = [_nearest(g, complex(a, b), free) for a, b in cfg["points"]]
    worst = {"g": 0.0, "q": 0.0}
    stops: dict = {}
    n_checks = {"g": 0, "q": 0}
    rows = []
    for i in range(cfg["n_seeds"]):
        path = sample_lerw(g, seed + i, f).path
        for k in range(1, path.size):
            prefix = path[1:k + 1]
            try:
                for obs in ("g", "q"):
                    cur, nxt, prob, reach, _ = _martingale_fields(g, prefix, obs)
                    for v0 in v0s:
                        if not reach[v0]:
                            stops["DisconnectedObservationPoint"] = stops.get("DisconnectedObservationPoint", 0) + 1
                            continue
                        res = abs(float(prob @ nxt[:, v0]) - cur[v0])
                        worst[obs] = max(worst[obs], res)
                        n_checks[obs] += 1
                        rows.append([seed + i, k - 1, obs, v0, res])
            except MartingaleStop as exc:
                stops[type(exc).__name__] = stops.get(type(exc).__name__, 0) + 1
                break
    tol = cfg["tol"]
    metrics = [
        _metric("max_residual_g", worst["g"], tol, worst["g"] < tol and n_checks["g"] > 0, checks=n_checks["g"]),
        _metric("max_residual_q", worst["q"], tol, worst["q"] < tol and n_checks["q"] > 0, checks=n_checks["q"]),
        _metric("stops_logged", stops, "TipAtTarget|BlockedTip|DisconnectedObservationPoint",
                sum(stops.values()) > 0),
    ]
    if out:
        _write_csv(Path(out) / "discrete_residuals.csv", ["seed", "step", "observable", "v0", "residual"], rows)
    return _report(name, cfg, seed, metrics, t0)


# ---------------------------------------------------------------------------
# observable convergence
# ---------------------------------------------------------------------------

def observable_gap(p: float, delta: float, slit_end: float, collar: float) -> dict:
    """Sup over the inner collar of ``|g_w - u_w|`` for the radial slit ``[slit_end, 1]``.

    ``g_w`` solves the discrete problem with the slit as ``B`` and the tip as
    source; ``u_w = Re S_M(exp(-M U + i (V - V(tip))))`` is built from the
    discrete uniformization of the slit domain.
    """
    g = _annulus_domain(p, delta)
    path = radial_slit_path(g, slit_end) if slit_end < 1 else [g.marked_vertex, g.start_vertex]
    tip = path[-1]
    B = np.union1d(g.E_init, path[:-1])
    gw = solve_g(g, g.F, B, tip)
    uni = uniformize_annulus(g, np.union1d(g.E_init, path), g.F)
    V = uni.V
    # tip angle from the tip's free neighbours (the tip itself is boundary in the uniformization)
    dual = uni.dual
    cells = np.concatenate([dual.cells_at(int(w)) for w in g.neighbors(tip)] + [dual.cells_at(tip)])
    vals = uni.cell_V[cells]
    vals = vals[np.isfinite(vals)]
    v_tip = float(np.mean(vals[0] + np.angle(np.exp(1j * (vals - vals[0])))))
    z = np.abs(g.complex_points)
    inner = np.exp(-p)
    sel = (g.labels == INTERIOR) & (z < inner + collar) & np.isfinite(V)
    img = np.exp(-uni.M * uni.U.values[sel] + 1j * (V[sel] - v_tip))
    uw = np.real(schwarz_S(KernelContext(uni.M), img))
    gap = float(np.max(np.abs(gw.values[sel] - uw)))
    return {"delta": delta, "gap": gap, "n_collar": int(sel.sum()), "M": uni.M}


def exp_observable_convergence(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Decrease of ``sup |g_w - u_w|`` on the inner collar under mesh refinement."""
    name = "observable-convergence"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    deltas = sorted(cfg["deltas"], reverse=True)
    levels = [observable_gap(cfg["p"], d, cfg["slit_end"], cfg["collar"]) for d in deltas]
    alt = [observable_gap(cfg["p"], d, cfg["slit_end"], cfg["collar_alt"]) for d in deltas]
    empty = observable_gap(cfg["p"], deltas[-1], 1.0, cfg["collar"])
    gaps = [lv["gap"] for lv in levels]
    gaps_alt = [lv["gap"] for lv in alt]
    dec = all(b < a for a, b in zip(gaps[:-1], gaps[1:]))
    dec_alt = all(b < a for a, b in zip(gaps_alt[:-1], gaps_alt[1:]))
    metrics = [
        _metric("gap_decreasing", gaps, "strictly decreasing", dec, levels=levels),
        _metric("gap_decreasing_wider_collar", gaps_alt, "strictly decreasing", dec_alt),
        _metric("empty_slit_gap_finest", empty["gap"], 0.05, empty["gap"] < 0.05),
    ]
    if out:
        _write_csv(Path(out) / "observable_gaps.csv", ["delta", "gap", "gap_wide_collar"],
                   [[d, a, b] for d, a, b in zip(deltas, gaps, gaps_alt)])
    return _report(name, cfg, seed, metrics, t0)


# ---------------------------------------------------------------------------
# driving statistics
# ---------------------------------------------------------------------------

def _driving_chunk(args):
    p, delta, seeds, times, spacing = args
    g = _annulus_domain(p, delta)
    eng = SlitEngine(g)
    f = access_probability(g)
    out = []
    for s in seeds:
        smp = extract_driving(g, sample_lerw(g, s, f), engine=eng, spacing=spacing)
        out.append((s, smp.driving_at(times), float(smp.capacity_times[-1]), len(smp.meta["skipped"])))
    return out


def exp_driving_stats(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Mean and variance of the extracted LERW driving function against ``B(2t)``."""
    name = "driving-stats"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    times = np.asarray(cfg["times"], float)
    seeds = [seed + i for i in range(cfg["n_rep"])]
    nth = _threads(threads)
    parts = _pmap(_driving_chunk, [(cfg["p"], cfg["delta"], c, times, cfg["spacing"])
                                   for c in _chunks(seeds, nth)], nth)
    res = [r for part in parts for r in part]
    X = np.array([r[1] for r in res])
    reach = np.array([r[2] for r in res])
    metrics = []
    for k, t in enumerate(times):
        x = X[:, k]
        x = x[np.isfinite(x)]
        m, se = float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))
        var = float(x.var(ddof=1))
        metrics.append(_metric(f"mean_xi_t{t:g}", m, cfg["n_se"] * se, abs(m) < cfg["n_se"] * se, se=se, n=x.size))
        metrics.append(_metric(f"var_ratio_t{t:g}", var / (2 * t), cfg["var_tol"],
                               abs(var / (2 * t) - 1) < cfg["var_tol"], var=var))
    # increment correlation between the first two times
    ok = np.all(np.isfinite(X[:, :2]), axis=1)
    a, b = X[ok, 0], X[ok, 1] - X[ok, 0]
    corr = float(np.corrcoef(a, b)[0, 1])
    metrics.append(_metric("increment_correlation", corr, 3 / np.sqrt(ok.sum()), abs(corr) < 3 / np.sqrt(ok.sum())))
    # reflection equivariance on a few samples
    g = _annulus_domain(cfg["p"], cfg["delta"])
    eng = SlitEngine(g)
    mir = mirror_map(g)
    f = access_probability(g)
    worst = 0.0
    for s in seeds[:cfg["n_reflect"]]:
        smp = sample_lerw(g, s, f)
        a1 = extract_driving(g, smp, engine=eng, spacing=cfg["spacing"])
        a2 = extract_driving(g, replace(smp, path=mir[smp.path]), checkpoints=a1.checkpoints, engine=eng)
        worst = max(worst, float(np.max(np.abs(a1.driving + a2.driving))))
    metrics.append(_metric("reflection_negates_xi", worst, 1e-8, worst < 1e-8))
    if out:
        _write_csv(Path(out) / "driving_samples.csv", ["seed"] + [f"xi_t{t:g}" for t in times] + ["T_end", "skipped"],
                   [[r[0], *r[1].tolist(), r[2], r[3]] for r in res])
    return _report(name, cfg, seed, metrics, t0, max_capacity_reached=float(np.median(reach)))


# ---------------------------------------------------------------------------
# hitting law
# ---------------------------------------------------------------------------

def rotate_domain(g: LatticeDomain, angle: float) -> LatticeDomain:
    """Same graph with coordinates rotated by ``angle`` (vertex ids unchanged)."""
    z = g.complex_points * np.exp(1j * angle)
    return replace(g, points=np.stack([z.real, z.imag], axis=1))


def discrete_ks(sample_values: np.ndarray, atoms: np.ndarray, probs: np.ndarray):
    """KS statistic and p-value of a sample against a discrete law.

    The p-value uses the continuous-law Kolmogorov distribution, which is
    conservative for discrete laws.
    """
    order = np.argsort(atoms)
    atoms, probs = atoms[order], probs[order]
    cdf = np.cumsum(probs)
    x = np.sort(sample_values)
    n = x.size
    emp_hi = np.searchsorted(x, atoms, side="right") / n
    emp_lo = np.searchsorted(x, atoms, side="left") / n
    cdf_lo = np.r_[0.0, cdf[:-1]]
    D = float(max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(emp_lo - cdf_lo))))
    return D, float(stats.kstwo.sf(D, n))


def exp_hitting_law(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """LERW endpoint law on ``F`` against the exact discrete exit law of the conditioned walk."""
    name = "hitting-law"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    g = _annulus_domain(cfg["p"], cfg["delta"])
    f = access_probability(g)
    F = g.F
    law = hitting_distribution(g, g.start_vertex, F, g.E_init)
    ang = np.angle(g.complex_points[F])
    ends = np.array([sample_lerw(g, seed + i, f).path[-1] for i in range(cfg["n_rep"])])
    on_F = bool(np.all(g.labels[ends] == B2))
    D, pval = discrete_ks(np.angle(g.complex_points[ends]), ang, law)
    # chi-square on bins of roughly equal oracle mass
    order = np.argsort(ang)
    cum = np.cumsum(law[order])
    nb = 20
    bins = np.minimum((cum * nb - 1e-12).astype(int), nb - 1)
    bin_of = np.empty(F.size, int)
    bin_of[order] = bins
    pos = np.searchsorted(F, ends)
    obs = np.bincount(bin_of[pos], minlength=nb)
    exp_ = np.bincount(bin_of, weights=law, minlength=nb) * ends.size
    used = exp_ > 0  # coarse meshes leave some bins without atoms
    chi_p = float(stats.chisquare(obs[used], exp_[used]).pvalue)
    # rotation equivariance on a few seeds
    gr = rotate_domain(g, np.pi)
    rot = all(np.allclose(gr.complex_points[sample_lerw(gr, seed + i, f).path[-1]],
                          -g.complex_points[ends[i]], atol=1e-12) for i in range(min(50, ends.size)))
    metrics = [
        _metric("ks_pvalue", pval, cfg["p_floor"], pval > cfg["p_floor"], statistic=D),
        _metric("chi2_pvalue", chi_p, cfg["p_floor"], chi_p > cfg["p_floor"]),
        _metric("endpoints_on_target", on_F, True, on_F),
        _metric("rotation_equivariance", rot, True, rot),
    ]
    if out:
        _write_csv(Path(out) / "hitting_oracle.csv", ["vertex_id", "angle", "probability"],
                   [[int(v), float(a), float(q)] for v, a, q in zip(F, ang, law)])
        _write_csv(Path(out) / "hitting_samples.csv", ["seed", "vertex_id", "angle"],
                   [[seed + i, int(v), float(np.angle(g.complex_points[v]))] for i, v in enumerate(ends)])
    return _report(name, cfg, seed, metrics, t0)


# ---------------------------------------------------------------------------
# reversibility
# ---------------------------------------------------------------------------

def flip_cylinder(g: LatticeDomain) -> LatticeDomain:
    """Swap the roles of the two boundary rows."""
    lab = g.labels.copy()
    lab[g.labels == B1] = B2
    lab[g.labels == B2] = B1
    return replace(g, labels=lab)


def exact_reversibility(n: int, p: float) -> dict:
    """Exact forward and reversed LERW laws on a small cylinder.

    Returns the largest absolute difference between the law of the forward
    path (uniform bottom start) and the law of the reversed backward path
    (uniform top start), and the largest gap between the next-step products
    and the determinant formula.
    """
    g = build_cylinder(n, p)
    bottom = np.nonzero(g.labels == B1)[0]
    top = np.nonzero(g.labels == B2)[0]
    fwd = exact_lerw_law(g, bottom)
    bwd = exact_lerw_law(flip_cylinder(g), top)
    keys = set(fwd) | {k[::-1] for k in bwd}
    diff = max(abs(fwd.get(k, 0) - bwd.get(k[::-1], 0)) for k in keys)
    dets = {k: lerw_path_probability(g, k) for k in fwd}
    Z = sum(dets.values())
    det_gap = max(abs(dets[k] / Z - v) for k, v in fwd.items())
    total = sum(fwd.values())
    return {"paths": len(fwd), "max_law_gap": float(diff), "max_det_gap": float(det_gap),
            "total_mass": float(total), "exact_equal": diff == 0}


def _cylinder_functionals(g: LatticeDomain, path: np.ndarray) -> tuple:
    n = g.meta["n"]
    k = g.lattice_ij[path, 0]
    steps = np.diff(k)
    steps = (steps + n // 2) % n - n // 2
    winding = float(np.sum(steps)) * 2 * np.pi / n
    # column on the top row, then the net displacement
    return int(k[0]), int((k[-1] - k[0]) % n), winding, int(path.size)


def exp_reversibility(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Reversibility of cylinder LERW: exact on a tiny cylinder, statistical on a larger one."""
    name = "reversibility"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    ex = exact_reversibility(cfg["tiny_n"], cfg["tiny_p"])
    g = build_cylinder(cfg["n"], cfg["p"])
    gb = flip_cylinder(g)
    n = cfg["n"]
    rows = g.meta["rows"]
    f_f = access_probability(g)
    f_b = access_probability(gb)
    rng = np.random.default_rng(seed)
    cols_f = rng.integers(0, n, cfg["n_rep"])
    cols_b = rng.integers(0, n, cfg["n_rep"])
    fw, bw = [], []
    for i in range(cfg["n_rep"]):
        k = int(cols_f[i])
        s = sample_lerw(g, seed + i, f_f, start=k + n, marked=k)
        fw.append(_cylinder_functionals(g, s.path[::-1]))
        k = int(cols_b[i])
        s = sample_lerw(gb, seed + cfg["n_rep"] + i, f_b, start=(rows - 2) * n + k, marked=(rows - 1) * n + k)
        bw.append(_cylinder_functionals(gb, s.path))
    fw, bw = np.array(fw, float), np.array(bw, float)
    # the forward walk's hitting column on the top row is the start of its reversal
    chi_end = float(stats.chisquare(np.bincount(fw[:, 0].astype(int), minlength=n)).pvalue)
    ct = np.vstack([np.bincount(fw[:, 1].astype(int), minlength=n), np.bincount(bw[:, 1].astype(int), minlength=n)])
    ct = ct[:, ct.sum(0) > 0]
    disp_p = float(stats.chi2_contingency(ct)[1])
    wind_p = float(stats.ks_2samp(fw[:, 2], bw[:, 2]).pvalue)
    len_p = float(stats.ks_2samp(fw[:, 3], bw[:, 3]).pvalue)
    pf = cfg["p_floor"]
    metrics = [
        _metric("exact_law_gap", ex["max_law_gap"], cfg["exact_tol"], ex["max_law_gap"] <= cfg["exact_tol"], detail=ex),
        _metric("exact_determinant_gap", ex["max_det_gap"], cfg["exact_tol"], ex["max_det_gap"] <= cfg["exact_tol"]),
        _metric("endpoint_uniform_pvalue", chi_end, pf, chi_end > pf),
        _metric("displacement_two_sample_pvalue", disp_p, pf, disp_p > pf),
        _metric("winding_two_sample_pvalue", wind_p, pf, wind_p > pf),
        _metric("length_two_sample_pvalue", len_p, pf, len_p > pf),
    ]
    if out:
        hdr = ["family", "top_column", "displacement", "winding", "length"]
        _write_csv(Path(out) / "reversibility_functionals.csv", hdr,
                   [["reversed_forward", *r] for r in fw.tolist()] + [["backward", *r] for r in bw.tolist()])
    return _report(name, cfg, seed, metrics, t0)


# ---------------------------------------------------------------------------
# disc harmonic measure
# ---------------------------------------------------------------------------

def first_approach_angles(kappa: float, r_start: float, eps: float, n_rep: int, seed: int, cfg: dict) -> np.ndarray:
    """Angle of the disc trace when it first reaches ``|z| >= 1 - eps``.

    Trace points are computed on a scan grid of times in ``[t_min, 0)`` and
    the first crossing is refined by bisection; replicas are vectorized.
    """
    grid = geometric_grid(-r_start, cfg["dt0"], cfg["growth"], cfg["dt_max"])
    # disc drivers live on s = |t|; the grid must be fine near s = 0 and s = |r_start| alike
    rng = np.random.default_rng(seed)
    table = brownian_table(kappa, grid, n_rep, rng, uniform_start=True)
    opts = IntegratorOptions(rtol=cfg["rtol"], atol=cfg["rtol"], kernel_tol=cfg["kernel_tol"],
                             trace_eps=1e-3, trace_tol=1e-4)
    scan = -np.geomspace(-cfg["t_min"], -cfg["t_max"], cfg["scan"])
    rep_all = np.arange(n_rep)
    rad = np.zeros((n_rep, scan.size))
    pts = np.zeros((n_rep, scan.size), complex)
    for j, t in enumerate(scan):
        z, _ = disc_trace_points(r_start, table, rep_all, np.full(n_rep, t), opts)
        rad[:, j] = np.abs(z)
        pts[:, j] = z
    hit = rad >= 1 - eps
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), scan.size - 1)
    lo = np.where(first > 0, scan[np.maximum(first - 1, 0)], r_start + 1e-6)
    hi = scan[first]
    z_hi = pts[rep_all, first]
    for _ in range(cfg["bisect"]):
        mid = 0.5 * (lo + hi)
        z, _ = disc_trace_points(r_start, table, rep_all, mid, opts)
        up = np.abs(z) >= 1 - eps
        hi = np.where(up, mid, hi)
        z_hi = np.where(up, z, z_hi)
        lo = np.where(up, lo, mid)
    return np.angle(z_hi)


def exp_disc_harmonic_measure(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Uniformity of the first ``eps``-approach angle of disc SLE from 0."""
    name = "disc-harmonic-measure"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    metrics, rows = [], []
    nth = _threads(threads)
    for r_start in cfg["r_starts"]:
        batches = _chunks(range(cfg["n_rep"]), max(1, -(-cfg["n_rep"] // cfg["batch"])))
        args = [(cfg["kappa"], r_start, cfg["eps"], len(b), seed + int(b[0]), cfg) for b in batches]
        angs = np.concatenate(_pmap(_disc_batch, args, nth))
        u = (angs % (2 * np.pi)) / (2 * np.pi)
        pval = float(stats.kstest(u, "uniform").pvalue)
        metrics.append(_metric(f"ks_uniform_r{r_start:g}", pval, cfg["p_floor"], pval > cfg["p_floor"]))
        rows += [[r_start, i, float(a)] for i, a in enumerate(angs)]
    verdicts = [m["pass"] for m in metrics]
    metrics.append(_metric("truncation_robust", verdicts, "all equal", len(set(verdicts)) == 1))
    if out:
        _write_csv(Path(out) / "disc_angles.csv", ["r_start", "replica", "angle"], rows)
    return _report(name, cfg, seed, metrics, t0)


def _disc_batch(args):
    kappa, r_start, eps, n, s, cfg = args
    return first_approach_angles(kappa, r_start, eps, n, s, cfg)


# ---------------------------------------------------------------------------
# plain runs
# ---------------------------------------------------------------------------

def run_sle(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Integrate one Loewner flow and its trace; writes trajectory and trace CSVs."""
    name = "run-sle"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    kind = cfg["kind"]
    seeds = np.array([complex(a, b) for a, b in cfg["seeds"]])
    if kind == "annulus":
        drv = sample_driving("annulus", cfg["kappa"], cfg["horizon"], cfg["dt"], seed)
        states = evolve_annulus(cfg["p"], drv, seeds, checkpoints=cfg["checkpoints"])
        trace = trace_annulus(cfg["p"], drv, cfg["trace_times"])
    elif kind == "radial":
        drv = sample_driving("radial", cfg["kappa"], cfg["horizon"], cfg["dt"], seed)
        states = evolve_radial(drv, seeds, checkpoints=cfg["checkpoints"])
        trace = None
    elif kind == "disc":
        r0 = cfg["r_start"]
        drv = sample_driving("disc", cfg["kappa"], -r0, cfg["dt"], seed)
        cps = [t for t in cfg["checkpoints"] if r0 <= t < 0] or [r0]
        states = evolve_disc(r0, drv, seeds, checkpoints=cps)
        trace = trace_disc(r0, drv, [t for t in cfg["trace_times"] if r0 < t < 0])
    else:
        raise ConfigError(f"unknown kind {kind!r}")
    if out:
        write_trajectory_csv(states, Path(out) / "trajectory.csv")
        if trace is not None:
            write_trace_csv(trace, Path(out) / "trace.csv")
        (Path(out) / "states.json").write_text(states_to_json(states))
        _write_csv(Path(out) / "driving.csv", ["time", "xi"], zip(drv.times.tolist(), drv.xi.tolist()))
    swallowed = int(np.sum(states[-1].swallowed))
    metrics = [_metric("completed", True, True, True, swallowed=swallowed)]
    return _report(name, cfg, seed, metrics, t0)


def sample_lerw_run(cfg=None, seed: int = 0, out=None, threads=None) -> dict:
    """Sample LERW curves, optionally with capacity times and driving; writes CSV and JSON sidecars."""
    name = "sample-lerw"
    cfg = merge_config(name, cfg)
    t0 = time.time()
    if cfg["domain"] == "annulus":
        g = _annulus_domain(cfg["p"], cfg["delta"])
    elif cfg["domain"] == "cylinder":
        g = build_cylinder(cfg["n"], cfg["p"])
    else:
        raise ConfigError("domain must be 'annulus' or 'cylinder'")
    f = access_probability(g)
    eng = SlitEngine(g) if cfg["capacity"] or cfg["driving"] else None
    lengths = []
    for i in range(cfg["n_samples"]):
        smp = sample_lerw(g, seed + i, f)
        if cfg["driving"]:
            smp = extract_driving(g, smp, engine=eng, spacing=cfg["spacing"])
        elif cfg["capacity"]:
            from .lerw import capacity_parameterize
            smp = capacity_parameterize(g, smp, engine=eng)
        lengths.append(int(smp.path.size))
        if out:
            smp.to_csv(g, Path(out) / f"lerw_{seed + i}.csv")
            (Path(out) / f"lerw_{seed + i}.json").write_text(smp.sidecar_json())
    metrics = [_metric("completed", True, True, True, lengths=lengths)]
    return _report(name, cfg, seed, metrics, t0)


EXPERIMENTS = {
    "check-kernel": exp_kernel_suite,
    "martingale-continuum": exp_continuum_martingale,
    "martingale-discrete": exp_discrete_martingale,
    "observable-convergence": exp_observable_convergence,
    "driving-stats": exp_driving_stats,
    "hitting-law": exp_hitting_law,
    "reversibility": exp_reversibility,
    "disc-harmonic-measure": exp_disc_harmonic_measure,
    "run-sle": run_sle,
    "sample-lerw": sample_lerw_run,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="annulus-sle", description="Annulus Loewner evolution laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in EXPERIMENTS.items():
        sp_ = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        sp_.add_argument("--config", type=Path, help="JSON configuration file")
        sp_.add_argument("--seed", type=int, default=0, help="seed base (replica i uses seed + i)")
        sp_.add_argument("--out", type=Path, default=None, help="output directory")
        sp_.add_argument("--threads", type=int, default=None,
                         help=f"worker processes (default ${THREADS_ENV} or 1)")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        cfg = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(cfg, dict):
            raise ConfigError("configuration must be a JSON object")
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        out = args.out or Path("out") / args.command
        out.mkdir(parents=True, exist_ok=True)
        report = EXPERIMENTS[args.command](cfg, seed=args.seed, out=out, threads=args.threads)
    except (AnnulusSLEError, ValueError, OSError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    (out / "report.json").write_text(json.dumps(report, indent=2))
    for m in report["metrics"]:
        log.info("%s %s value=%s tol=%s", "PASS" if m["pass"] else "FAIL", m["name"],
                 m["value"] if not isinstance(m["value"], list) or len(m["value"]) < 8 else "...", m["tolerance"])
    return 0 if report["verdict"] else 1


if __name__ == "__main__":
    sys.exit(main())
