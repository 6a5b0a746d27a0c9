"""Annulus Schwarz kernels.

The annulus Schwarz kernel of modulus ``r`` is

    S_r(z) = lim_N sum_{k=-N}^{N} (e^{2kr} + z) / (e^{2kr} - z),

analytic in ``e^{-r} < |z| < 1`` with ``Re S_r = 1`` on the inner circle and
``Re S_r = 0`` on the unit circle away from ``z = 1``.  Its lift to the
covering strip is

    S~_r(z) = -i S_r(e^{iz}) = sum_k cot((z + 2ikr) / 2),

an odd, 2*pi periodic function with simple poles on ``2k*pi + 2imr`` and
quasi-period ``S~_r(z + 2ir) = S~_r(z) - 2i``.

Two evaluation routes are provided and cross-checked in the tests:

``series``
    symmetric partial sums of the cotangent series (geometric convergence
    with ratio ``e^{-2r}``), truncated by an explicit tail bound.
``theta``
    the Fourier (q-)series of the logarithmic derivative of the Jacobi theta
    function.  For ``r >= pi`` the nome ``e^{-2r}`` is used directly; for
    smaller ``r`` the modular transform ``tau -> -1/tau`` is applied first so
    that the nome ``e^{-2 pi^2 / r}`` stays small.

All functions accept numpy arrays and broadcast ``r`` against ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import NonConvergence, PoleProximity

__all__ = [
    "KernelContext",
    "POLE_GUARD",
    "schwarz_S",
    "reflected_S",
    "drift_adjusted_S",
    "covering_S",
    "covering_S_dr",
    "covering_values",
    "radial_kernel",
]

POLE_GUARD = 1e-6
_TWO_PI = 2.0 * np.pi

Method = Literal["series", "theta", "auto"]


@dataclass(frozen=True)
class KernelContext:
    """Modulus and accuracy settings for kernel evaluation.

    Parameters
    ----------
    r : float
        Modulus of the annulus, ``r > 0``.
    tol : float
        Absolute truncation tolerance.
    method : {"series", "theta"}
        Evaluation route.
    max_terms : int
        Largest number of series terms before :class:`NonConvergence`.
    """

    r: float
    tol: float = 1e-12
    method: str = "series"
    max_terms: int = 400

    def __post_init__(self):
        if not np.isfinite(self.r) or self.r <= 0:
            raise ValueError(f"modulus must be positive, got {self.r}")
        if not self.tol > 0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.method not in ("series", "theta"):
            raise ValueError(f"unknown method {self.method!r}")


# ---------------------------------------------------------------------------
# vectorised core
# ---------------------------------------------------------------------------


def _reduce(r, z):
    """Move ``z`` into the cell |Re z| <= pi, |Im z| <= r.

    Returns the reduced point and the integer number ``m`` of imaginary
    periods removed (``z = z0 + 2*pi*k + 2imr``).
    """
    x = np.real(z)
    y = np.imag(z)
    m = np.rint(y / (2.0 * r))
    y0 = y - 2.0 * r * m
    x0 = np.mod(x + np.pi, _TWO_PI) - np.pi
    return x0 + 1j * y0, m


def _series_terms(r_min, tol, nderiv, with_dr, max_terms):
    """Smallest N whose symmetric-series tail is below ``tol``.

    For ``|Im z0| <= r`` the k-th pair of cotangent terms (and its first
    three z-derivatives) is bounded by ``C_n e^{-(2k-1) r} / (1 - e^{-(2k-1)
    r})^{n+2}``; the r-derivative picks up an extra factor ``2k``.
    """
    cn = 8.0 * 4.0 ** nderiv * max(1, int(np.prod(np.arange(1, nderiv + 1))))
    tail = 0.0
    # bound the tail of sum_{k>N} by summing forward from a generous N_max
    n_max = max_terms + 64
    k = np.arange(1, n_max + 1, dtype=float)
    ek = np.exp(-(2.0 * k - 1.0) * r_min)
    b = cn * ek / (1.0 - ek) ** (nderiv + 2)
    if with_dr:
        b = b * 2.0 * k
    tail = np.cumsum(b[::-1])[::-1]  # tail[j] = sum_{k >= j+1}
    ok = np.nonzero(tail < tol)[0]
    if ok.size == 0:
        raise NonConvergence(f"series needs more than {max_terms} terms at r={r_min:g}")
    n = int(ok[0])  # keep terms k = 1..n, tail starts at k = n+1
    if n > max_terms:
        raise NonConvergence(f"series needs {n} > {max_terms} terms at r={r_min:g}")
    return n


def _cot_derivs(u, nderiv):
    """Derivatives in ``u`` of ``cot(u / 2)`` up to ``nderiv``."""
    s = np.sin(0.5 * u)
    c = np.cos(0.5 * u)
    out = [c / s]
    s2 = s * s
    if nderiv >= 1:
        out.append(-0.5 / s2)
    if nderiv >= 2:
        out.append(0.5 * c / (s2 * s))
    if nderiv >= 3:
        out.append(-(1.0 + 2.0 * c * c) / (4.0 * s2 * s2))
    return out, s2


def _shifted_cot(X, nderiv, sign):
    """``cot(u/2)`` and its ``u``-derivatives from ``X = e^{sign i u}`` with ``|X| < 1``."""
    d = 1.0 - X
    out = [sign * -1j * (1.0 + X) / d]
    if nderiv >= 1:
        out.append(2.0 * X / (d * d))
    if nderiv >= 2:
        out.append(sign * 2j * X * (1.0 + X) / (d * d * d))
    if nderiv >= 3:
        out.append(-2.0 * X * (1.0 + 4.0 * X + X * X) / (d * d * d * d))
    return out


def _series_eval(r, z0, nderiv, with_dr, tol, max_terms):
    r_min = float(np.min(r))
    n = _series_terms(r_min, tol, nderiv, with_dr, max_terms)
    vals, _ = _cot_derivs(z0, nderiv)
    vals = [v.astype(complex) for v in vals]
    dr = np.zeros_like(vals[0])
    if n == 0:
        return vals, dr
    # cot((z0 +- 2ikr)/2) through X = e^{iz0} e^{-2kr} and Y = e^{-iz0} e^{-2kr},
    # both of modulus below e^{-r}, so no transcendental calls per term
    k = np.arange(1, n + 1, dtype=float)
    nd = max(nderiv, 1) if with_dr else nderiv
    block = max(1, 2 ** 20 // n)
    for lo in range(0, z0.size, block):
        sl = slice(lo, lo + block)
        qk = np.exp(-2.0 * r[sl, None] * k[None, :])
        e = np.exp(1j * z0[sl])[:, None]
        up = _shifted_cot(e * qk, nd, 1.0)
        dn = _shifted_cot(qk / e, nd, -1.0)
        for j in range(nderiv + 1):
            vals[j][sl] += np.sum(up[j] + dn[j], axis=1)
        if with_dr:
            dr[sl] = np.sum(2j * k * (up[1] - dn[1]), axis=1)
    return vals, dr


def _theta_direct(r, z0, nderiv, with_dr, tol, max_terms):
    # S~ = cot(z/2) + 4 sum_n a_n sin(nz),  a_n = Q^n / (1 - Q^n),  Q = e^{-2r}
    y = np.abs(np.imag(z0))
    ymax = float(np.max(y)) if y.size else 0.0
    r_min = float(np.min(r))
    vals, _ = _cot_derivs(z0, nderiv)
    vals = [v.astype(complex) for v in vals]
    dr = np.zeros_like(vals[0])
    for n in range(1, max_terms + 1):
        qn = np.exp(-2.0 * n * r)
        an = qn / (1.0 - qn)
        phase = n * z0
        for j in range(nderiv + 1):
            vals[j] = vals[j] + 4.0 * an * n ** j * np.sin(phase + 0.5 * j * np.pi)
        if with_dr:
            dr = dr + 4.0 * (-2.0 * n * qn / (1.0 - qn) ** 2) * np.sin(phase)
        bound = 8.0 * n ** (nderiv + 1) * np.exp(-n * (2.0 * r_min - ymax))
        if bound / (1.0 - np.exp(-(2.0 * r_min - ymax))) < tol:
            return vals, dr
    raise NonConvergence(f"theta series did not converge at r={r_min:g}")


def _pi_cot_derivs(w, nderiv):
    """Derivatives in ``w`` of ``pi cot(pi w)`` up to ``nderiv``.

    Evaluated through ``e^{2 i pi w}`` on the decaying side, so large
    ``|Im w|`` neither overflows nor loses the limit ``-+ i pi``.
    """
    u = np.pi * np.asarray(w, complex)
    up = np.imag(u) >= 0
    q = np.exp(np.where(up, 2j * u, -2j * u))
    c = np.where(up, -1j, 1j) * (1.0 + q) / (1.0 - q)
    csc2 = -4.0 * q / (1.0 - q) ** 2
    out = [np.pi * c]
    if nderiv >= 1:
        out.append(-np.pi ** 2 * csc2)
    if nderiv >= 2:
        out.append(2.0 * np.pi ** 3 * c * csc2)
    if nderiv >= 3:
        out.append(-2.0 * np.pi ** 4 * csc2 * (1.0 + 3.0 * c * c))
    return out


def _sin_scaled(log_b, u):
    """``e^{log_b} sin(u)`` without overflow when ``|Im u|`` is large."""
    return (np.exp(log_b + 1j * u) - np.exp(log_b - 1j * u)) / 2j


def _theta_modular(r, z0, nderiv, with_dr, tol, max_terms):
    # S~(z) = (-i/r) L(w) - z/r with w = -i z / (2r) and
    # L(w) = pi cot(pi w) + 4 pi sum_n b_n sin(2 n pi w),
    # b_n = P^n / (1 - P^n), P = e^{-2 pi^2 / r}.
    w = -1j * z0 / (2.0 * r)
    a = 2.0 * np.pi ** 2 / r
    r_min = float(np.min(r))
    # term n decays like exp(-n pi (2 pi - |Re z0|) / r) since |Im(2 pi w)| = pi |Re z0| / r
    x = np.abs(np.real(z0))
    rate = float(np.min(np.pi * (2.0 * np.pi - x) / r)) if z0.size else 1.0
    lw = _pi_cot_derivs(w, max(nderiv, 1))
    lw = [v.astype(complex) for v in lw]
    drl = np.zeros_like(lw[0])
    need = max(nderiv, 1)
    for n in range(1, max_terms + 1):
        log_pn = -n * a
        log_bn = log_pn - np.log1p(-np.exp(log_pn))
        arg = 2.0 * np.pi * n * w
        for j in range(need + 1):
            lw[j] = lw[j] + 4.0 * np.pi * (2.0 * np.pi * n) ** j * _sin_scaled(log_bn, arg + 0.5 * j * np.pi)
        if with_dr:
            # d b_n / dr = b_n (n a / r) / (1 - P^n)
            log_dbn = log_bn + np.log(n * a / r) - np.log1p(-np.exp(log_pn))
            drl = drl + 4.0 * np.pi * _sin_scaled(log_dbn, arg)
        decay = n * rate
        bound = 8.0 * np.pi * (2.0 * np.pi * n) ** (need + 1) * np.exp(-decay) / r_min ** (need + 2)
        if bound < tol:
            break
    else:
        raise NonConvergence(f"modular theta series did not converge at r={r_min:g}")
    dwdz = -1j / (2.0 * r)
    vals = []
    for j in range(nderiv + 1):
        v = (-1j / r) * dwdz ** j * lw[j]
        if j == 0:
            v = v - z0 / r
        elif j == 1:
            v = v - 1.0 / r
        vals.append(v)
    dr = None
    if with_dr:
        # d/dr at fixed z: w depends on r through dw/dr = -w / r
        dr = (1j / r ** 2) * lw[0] + (-1j / r) * (lw[1] * (-w / r) + drl) + z0 / r ** 2
    else:
        dr = np.zeros_like(vals[0])
    return vals, dr


def covering_values(
    r,
    z,
    nderiv: int = 0,
    with_dr: bool = False,
    tol: float = 1e-12,
    method: Method = "auto",
    max_terms: int = 400,
):
    """Vectorised covering kernel with z-derivatives and r-derivative.

    Parameters
    ----------
    r : float or ndarray
        Moduli, broadcast against ``z``.
    z : complex or ndarray
        Evaluation points (no pole check is made here).
    nderiv : int
        Highest z-derivative returned (0 to 3).
    with_dr : bool
        Also return the derivative in ``r`` at fixed ``z``.
    tol : float
        Absolute truncation tolerance.
    method : {"auto", "series", "theta"}
        ``auto`` uses the cotangent series for ``r >= 0.5`` and the modular
        theta route below.
    max_terms : int
        Term cap for the series.

    Returns
    -------
    derivs : list of ndarray
        ``[S~, S~', ...]`` up to ``nderiv``.
    dr : ndarray or None
        ``d S~ / dr`` when requested.
    """
    if not 0 <= nderiv <= 3:
        raise ValueError("nderiv must be in 0..3")
    z = np.asarray(z, dtype=complex)
    r = np.asarray(r, dtype=float)
    r, z = np.broadcast_arrays(r, z)
    shape = z.shape
    r = r.ravel()
    z = z.ravel()
    need_d1 = with_dr
    nd = max(nderiv, 1) if need_d1 else nderiv
    z0, m = _reduce(r, z)
    derivs = [np.empty(z.shape, complex) for _ in range(nd + 1)]
    dr = np.empty(z.shape, complex) if with_dr else None

    def run(sel, fn):
        if not np.any(sel):
            return
        vals, d = fn(r[sel], z0[sel], nd, with_dr, tol, max_terms)
        for j in range(nd + 1):
            derivs[j][sel] = vals[j]
        if with_dr:
            dr[sel] = d

    if method == "series":
        run(np.ones(z.shape, bool), _series_eval)
    elif method == "theta":
        small = r < np.pi
        run(small, _theta_modular)
        run(~small, _theta_direct)
    elif method == "auto":
        small = r < 0.5
        run(small, _theta_modular)
        run(~small, _series_eval)
    else:
        raise ValueError(f"unknown method {method!r}")

    # undo the reduction by imaginary periods: S~(z0 + 2imr) = S~(z0) - 2im
    if with_dr:
        dr = dr + derivs[1] * (-2j * m)
    derivs[0] = derivs[0] - 2j * m
    out = [d.reshape(shape) for d in derivs[: nderiv + 1]]
    if with_dr:
        return out, dr.reshape(shape)
    return out, None


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _as_output(arr, scalar):
    return complex(arr) if scalar else arr


def _check_covering_poles(r, z):
    z0, _ = _reduce(r, np.asarray(z, dtype=complex))
    best = np.full(z0.shape, np.inf)
    for k in (-1, 0, 1):
        for m in (-1, 0, 1):
            d = np.abs(z0 - (_TWO_PI * k + 2j * r * m))
            best = np.minimum(best, d)
    if np.any(best < POLE_GUARD):
        raise PoleProximity("point within guard distance of a covering-kernel pole")


def covering_S(ctx: KernelContext, z, order: int = 0):
    """Order-th z-derivative of the covering kernel ``S~_r``.

    Parameters
    ----------
    ctx : KernelContext
    z : complex or array_like
    order : int
        0, 1, 2 or 3.

    Returns
    -------
    complex or ndarray

    Raises
    ------
    PoleProximity
        Near a lattice point ``2k*pi + 2imr``.
    """
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=complex)
    _check_covering_poles(ctx.r, z)
    vals, _ = covering_values(ctx.r, z, nderiv=order, tol=ctx.tol,
                              method=ctx.method, max_terms=ctx.max_terms)
    return _as_output(vals[order], scalar)


def covering_S_dr(ctx: KernelContext, z):
    """Derivative of ``S~_r(z)`` with respect to the modulus at fixed ``z``."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=complex)
    _check_covering_poles(ctx.r, z)
    _, dr = covering_values(ctx.r, z, nderiv=1, with_dr=True, tol=ctx.tol,
                            method=ctx.method, max_terms=ctx.max_terms)
    return _as_output(dr, scalar)


def schwarz_S(ctx: KernelContext, z):
    """Annulus Schwarz kernel ``S_r(z)``.

    Evaluated through the covering kernel, ``S_r(z) = i S~_r(-i log z)``;
    the branch of the logarithm is irrelevant by periodicity.

    Raises
    ------
    PoleProximity
        If ``z = 0`` or ``z`` is within ``POLE_GUARD`` of some ``e^{2kr}``.
    """
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=complex)
    az = np.abs(z)
    if np.any(az < POLE_GUARD):
        raise PoleProximity("S_r is singular at z = 0")
    k = np.rint(np.log(az) / (2.0 * ctx.r))
    if np.any(np.abs(z - np.exp(2.0 * k * ctx.r)) < POLE_GUARD):
        raise PoleProximity("point within guard distance of a pole e^{2kr}")
    w = -1j * np.log(z)
    vals, _ = covering_values(ctx.r, w, tol=ctx.tol, method=ctx.method,
                              max_terms=ctx.max_terms)
    return _as_output(1j * vals[0], scalar)


def reflected_S(ctx: KernelContext, z):
    """Reflected kernel ``1 - S_r(e^{-r} / z)``.

    It is analytic in the annulus and vanishes on the unit circle; for
    ``4 e^{-r} <= |z| <= 1`` it is bounded by ``8 e^{-r} / |z|``.
    """
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z) < POLE_GUARD):
        raise PoleProximity("reflected kernel is singular at z = 0")
    out = 1.0 - np.asarray(schwarz_S(ctx, np.exp(-ctx.r) / z))
    return _as_output(out, scalar)


def drift_adjusted_S(ctx: KernelContext, z, chi):
    """Kernel with the rotation drift removed.

    ``S_r(z / chi) - i Im S_r(e^{-r} / chi)``; with this kernel the Loewner
    flow keeps the inner-circle point ``e^{-p}`` on the positive axis.
    """
    scalar = np.ndim(z) == 0
    chi = np.asarray(chi, dtype=complex)
    out = np.asarray(schwarz_S(ctx, np.asarray(z) / chi)) - 1j * np.imag(
        schwarz_S(ctx, np.exp(-ctx.r) / chi))
    return _as_output(out, scalar)


def radial_kernel(z, chi):
    """Herglotz kernel ``(1 + z/chi) / (1 - z/chi)`` of the unit disc."""
    scalar = np.ndim(z) == 0 and np.ndim(chi) == 0
    u = np.asarray(z, dtype=complex) / np.asarray(chi, dtype=complex)
    if np.any(np.abs(1.0 - u) < POLE_GUARD):
        raise PoleProximity("radial kernel evaluated at the driving point")
    return _as_output((1.0 + u) / (1.0 - u), scalar)
