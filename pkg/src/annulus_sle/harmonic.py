"""Discrete harmonic functions on lattice graphs.

The graph Laplacian is ``Delta u(v) = sum_{w ~ v} (u(w) - u(v))``.  For
disjoint vertex sets ``A`` and ``B`` the functions below are the unique
bounded solutions of the corresponding Dirichlet problems:

``f``
    probability that the walk hits ``A`` before ``B``;
``h``
    probability that the walk hits ``x`` before ``A u B``;
``g``
    ``f + h L(A, B) / (-f(x) Delta h(x))``, the observable that vanishes on
    ``B``, equals 1 on ``A`` and carries no net flux into ``A``;
``q``
    ``2 pi h / sum_A Delta h``, the observable with flux ``2 pi`` into ``A``.

The flux ``L(A, B) = sum_{v in B} Delta f(v)`` is the conductance between the
two sets, so ``2 pi / L`` estimates the modulus of a doubly connected domain.
A discrete harmonic conjugate on the dual square cells turns the potential
into an approximate uniformizing map onto a round annulus.

:class:`SlitEngine` handles many slit domains obtained from one base domain
by turning a growing prefix of a path into boundary.  It factorizes the base
problem once and gets each slit potential from a Schur complement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cholesky, solve_triangular
from scipy.sparse.csgraph import connected_components

from .errors import (
    BlockedTip,
    Disconnected,
    DisconnectedObservationPoint,
    EmptyBoundary,
    MissingValue,
    PeriodMismatch,
    SolverFailure,
    TipAtTarget,
    TipIsolated,
    ZeroAccess,
)
from .grid import B1, B2, INTERIOR, NO_LATTICE, LatticeDomain

__all__ = [
    "HarmonicField",
    "laplacian",
    "laplacian_all",
    "solve_dirichlet",
    "solve_f",
    "solve_h",
    "solve_g",
    "solve_q",
    "flux",
    "cut_flux",
    "martingale_terms",
    "check_martingale",
    "estimate_modulus",
    "hitting_distribution",
    "DualComplex",
    "Uniformization",
    "uniformize_annulus",
    "SlitEngine",
]

DIRECT_LIMIT = 200_000
RESIDUAL_TOL = 1e-12
FAIL_TOL = 1e-9
PERIOD_TOL = 1e-8


@dataclass(frozen=True)
class HarmonicField:
    """Solved discrete harmonic function on a lattice graph.

    Attributes
    ----------
    graph : LatticeDomain
    values : ndarray
        One value per vertex.
    A, B : ndarray of int
        Dirichlet sets (for ``kind="h"``, ``B`` holds ``A u B``).
    x : int or None
        Source vertex for ``h``, ``g`` and ``q``.
    kind : {"f", "h", "g", "q"}
    info : dict
        Solver diagnostics (method, unknowns, residual).
    """

    graph: LatticeDomain
    values: np.ndarray
    A: np.ndarray
    B: np.ndarray
    x: Optional[int]
    kind: str
    info: dict = field(default_factory=dict)

    def laplacian(self) -> np.ndarray:
        return laplacian_all(self.graph, self.values)

    def __getitem__(self, v):
        return self.values[v]

    def to_csv(self, path) -> None:
        pts = self.graph.points
        with open(path, "w") as fh:
            fh.write("vertex_id,x,y,value\n")
            for v in range(self.graph.n):
                fh.write(f"{v},{pts[v, 0]!r},{pts[v, 1]!r},{self.values[v]!r}\n")

    def diagnostics_json(self) -> str:
        return json.dumps({"kind": self.kind, **self.info})


def laplacian_all(g: LatticeDomain, values: np.ndarray) -> np.ndarray:
    """``Delta u`` at every vertex."""
    values = np.asarray(values, float)
    return g.adjacency @ values - g.degree * values


def laplacian(field: HarmonicField, v: int) -> float:
    """``Delta u(v) = sum_{w ~ v} (u(w) - u(v))``.

    Raises
    ------
    MissingValue
        If ``u`` is undefined (NaN) at ``v`` or one of its neighbours.
    """
    u = field.values
    nb = field.graph.neighbors(v)
    if np.isnan(u[v]) or np.any(np.isnan(u[nb])):
        raise MissingValue(f"field undefined near vertex {v}")
    return float(np.sum(u[nb] - u[v]))


def _as_index(s) -> np.ndarray:
    return np.unique(np.asarray(list(s) if not isinstance(s, np.ndarray) else s, np.int64).ravel())


def solve_dirichlet(g: LatticeDomain, fixed, values, *, direct_limit: int = DIRECT_LIMIT,
                    tol: float = RESIDUAL_TOL):
    """Harmonic extension of boundary data.

    Solves ``Delta u = 0`` off ``fixed`` with ``u = values`` on ``fixed``.  A
    sparse LU factorization is used below ``direct_limit`` unknowns and
    Jacobi-preconditioned conjugate gradients above it.

    Returns
    -------
    u : ndarray
    info : dict
        ``method``, ``unknowns``, ``iterations`` and the max residual
        ``|Delta u|`` over the unknowns.

    Raises
    ------
    SolverFailure
        Singular system (a free component with no boundary) or residual above
        ``1e-9`` times the data scale.
    """
    fixed = np.asarray(fixed, np.int64)
    values = np.asarray(values, float)
    n = g.n
    u = np.zeros(n)
    u[fixed] = values
    free = np.ones(n, bool)
    free[fixed] = False
    C = np.nonzero(free)[0]
    info = {"method": "none", "unknowns": int(C.size), "iterations": 0, "residual": 0.0}
    if C.size == 0:
        return u, info
    adj = g.adjacency
    A_CC = adj[C][:, C]
    K = (sp.diags(g.degree[C].astype(float)) - A_CC).tocsc()
    rhs = adj[C] @ u
    if C.size < direct_limit:
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SolverFailure(f"singular Dirichlet system: {exc}") from exc
        x = lu.solve(rhs)
        info["method"] = "splu"
    else:
        d = K.diagonal()
        M = sp.diags(1.0 / d)
        its = [0]

        def count(_):
            its[0] += 1

        x, status = spla.cg(K, rhs, M=M, rtol=1e-14, atol=0.0, maxiter=20 * C.size, callback=count)
        info["method"] = "cg-jacobi"
        info["iterations"] = its[0]
        if status != 0:
            raise SolverFailure(f"conjugate gradients stopped with status {status}")
    if not np.all(np.isfinite(x)):
        raise SolverFailure("non-finite solution (free component without boundary?)")
    u[C] = x
    res = float(np.max(np.abs(laplacian_all(g, u)[C])))
    scale = max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)
    info["residual"] = res
    if res > FAIL_TOL * scale:
        raise SolverFailure(f"residual {res:.3e} above tolerance")
    if res > tol * scale:
        # polish once with iterative refinement
        r = rhs - K @ x
        x = x + (lu.solve(r) if info["method"] == "splu" else spla.cg(K, r, M=M, rtol=1e-14)[0])
        u[C] = x
        info["residual"] = float(np.max(np.abs(laplacian_all(g, u)[C])))
    return u, info


def _check_sets(A, B):
    if A.size == 0 or B.size == 0:
        raise EmptyBoundary("both Dirichlet sets must be nonempty")
    if np.intersect1d(A, B).size:
        raise ValueError("Dirichlet sets must be disjoint")


def solve_f(g: LatticeDomain, A, B) -> HarmonicField:
    """Probability ``f`` that the walk hits ``A`` before ``B``.

    Examples
    --------
    On a path ``v_0 ... v_n`` with ``A = {v_n}`` and ``B = {v_0}`` the
    solution is ``f(v_k) = k / n``.
    """
    A, B = _as_index(A), _as_index(B)
    _check_sets(A, B)
    u, info = solve_dirichlet(g, np.r_[A, B], np.r_[np.ones(A.size), np.zeros(B.size)])
    return HarmonicField(g, u, A, B, None, "f", info)


def solve_h(g: LatticeDomain, x: int, AB) -> HarmonicField:
    """Probability ``h`` that the walk hits ``x`` before the set ``AB``."""
    AB = _as_index(AB)
    x = int(x)
    if AB.size == 0:
        raise EmptyBoundary("absorbing set must be nonempty")
    if x in set(AB.tolist()):
        raise ValueError("x must not belong to the absorbing set")
    u, info = solve_dirichlet(g, np.r_[AB, x], np.r_[np.zeros(AB.size), 1.0])
    return HarmonicField(g, u, np.empty(0, np.int64), AB, x, "h", info)


def flux(field: HarmonicField, S) -> float:
    """``sum_{v in S} Delta u(v)``; for ``kind="f"`` and ``S = B`` this is ``L(A, B)``."""
    S = _as_index(S)
    return float(np.sum(laplacian_all(field.graph, field.values)[S]))


def cut_flux(field: HarmonicField, side) -> float:
    """``sum (u(v) - u(w))`` over edges with ``v`` in ``side`` and ``w`` outside it."""
    mask = np.zeros(field.graph.n, bool)
    mask[_as_index(side)] = True
    e = field.graph.edges
    a, b = e[:, 0], e[:, 1]
    u = field.values
    fwd = mask[a] & ~mask[b]
    bwd = mask[b] & ~mask[a]
    return float(np.sum(u[a[fwd]] - u[b[fwd]]) + np.sum(u[b[bwd]] - u[a[bwd]]))


def _g_from_parts(g, A, B, x, f, h) -> HarmonicField:
    fx = f.values[x]
    if not fx > 0:
        raise ZeroAccess(f"f(x) = {fx} at the source vertex")
    L = flux(f, B)
    dhx = laplacian_all(g, h.values)[x]
    vals = f.values + h.values * (L / (-fx * dhx))
    info = {"f": f.info, "h": h.info, "L": L}
    return HarmonicField(g, vals, A, B, int(x), "g", info)


def solve_g(g: LatticeDomain, A, B, x: int) -> HarmonicField:
    """Observable ``g``: 1 on ``A``, 0 on ``B``, harmonic off ``x``, no net flux into ``A``.

    Assembled as ``f + h L(A, B) / (-f(x) Delta h(x))`` with ``f`` from
    :func:`solve_f` and ``h`` from :func:`solve_h`.

    Raises
    ------
    ZeroAccess
        If ``f(x) = 0``.
    """
    A, B = _as_index(A), _as_index(B)
    x = int(x)
    f = solve_f(g, A, B)
    h = solve_h(g, x, np.r_[A, B])
    return _g_from_parts(g, A, B, x, f, h)


def _q_from_h(g, A, B, x, h) -> HarmonicField:
    into_A = flux(h, A)
    if not into_A > 0:
        raise ZeroAccess("the source cannot reach A")
    return HarmonicField(g, h.values * (2.0 * np.pi / into_A), A, B, int(x), "q", {"h": h.info})


def solve_q(g: LatticeDomain, A, B, x: int) -> HarmonicField:
    """Observable ``q``: 0 on ``A u B``, harmonic off ``x``, flux ``2 pi`` into ``A``."""
    A, B = _as_index(A), _as_index(B)
    h = solve_h(g, int(x), np.r_[A, B])
    return _q_from_h(g, A, B, int(x), h)


def _reaches(g: LatticeDomain, blocked: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Vertices that can walk to ``target`` avoiding ``blocked`` (target itself excluded from blocking)."""
    ok = ~blocked
    ok[target] = True
    e = g.edges
    keep = ok[e[:, 0]] & ok[e[:, 1]]
    a = sp.coo_matrix((np.ones(keep.sum()), (e[keep, 0], e[keep, 1])), shape=(g.n, g.n))
    _, comp = connected_components(a, directed=False)
    good = np.zeros(comp.max() + 1, bool)
    good[comp[target]] = True
    return good[comp] & ok


def _prefix_vertices(g: LatticeDomain, prefix) -> list:
    prefix = [int(v) for v in prefix]
    if prefix and prefix[0] == g.marked_vertex:
        prefix = prefix[1:]
    if not prefix:
        raise ValueError("prefix must contain at least the first interior step")
    if len(set(prefix)) != len(prefix):
        raise ValueError("prefix is not simple")
    for a, b in zip(prefix[:-1], prefix[1:]):
        if b not in set(g.neighbors(a).tolist()):
            raise ValueError("prefix vertices are not consecutive neighbours")
    return prefix


def martingale_terms(g: LatticeDomain, prefix, v0: int, observable: str = "g"):
    """Current value and exact one-step conditional expectation of the observable.

    ``prefix`` is ``(y_0, ..., y_k)`` (optionally preceded by the marked
    vertex).  With ``E_j = E_init u {y_0..y_j}`` and tip ``w = y_k`` the
    current observable uses ``B = E_{k-1}`` and source ``w``; the next step
    ``u ~ w`` is taken with probability ``f_k(u) / sum f_k`` where ``f_k``
    solves ``A = F``, ``B = E_k``, and the next observable uses ``B = E_k``
    and source ``u``.

    Returns
    -------
    current, expected : float
    info : dict
        Admissible next steps, their probabilities and next values.

    Raises
    ------
    TipAtTarget
        Tip in ``F`` or adjacent to it.
    BlockedTip
        No neighbour of the tip can reach ``F``.
    DisconnectedObservationPoint
        ``E_k`` separates ``v0`` from ``F``.
    """
    cur, nxt, prob, reach, S = _martingale_fields(g, prefix, observable)
    if not reach[v0]:
        raise DisconnectedObservationPoint(f"vertex {v0} is cut off from the target")
    vals = nxt[:, v0]
    expected = float(np.dot(prob, vals))
    return float(cur[v0]), expected, {"steps": S, "prob": prob, "next": vals}


def _martingale_fields(g: LatticeDomain, prefix, observable: str = "g"):
    """Whole-domain current and next-step observables for one prefix.

    Returns ``(current, next, prob, reach, steps)`` with ``next`` of shape
    ``(len(steps), n)``; ``reach`` marks vertices connected to ``F`` off
    ``E_k``.  Raises :class:`TipAtTarget` or :class:`BlockedTip`.
    """
    if observable not in ("g", "q"):
        raise ValueError("observable must be 'g' or 'q'")
    ys = _prefix_vertices(g, prefix)
    w = ys[-1]
    F = g.F
    is_F = g.labels == B2
    if is_F[w] or np.any(is_F[g.neighbors(w)]):
        raise TipAtTarget(f"tip {w} is in or next to the target set")
    E_prev = np.union1d(g.E_init, np.asarray(ys[:-1], np.int64))
    E_k = np.union1d(E_prev, [w])
    blocked = np.zeros(g.n, bool)
    blocked[E_k] = True
    reach = _reaches(g, blocked, F)
    S = [int(u) for u in g.neighbors(w) if reach[u]]
    if not S:
        raise BlockedTip(f"no admissible step from {w}")
    f_k = solve_f(g, F, E_k)
    weights = np.array([f_k.values[u] for u in S])
    if observable == "g":
        f_prev = solve_f(g, F, E_prev)
        cur = _g_from_parts(g, F, E_prev, w, f_prev, solve_h(g, w, np.r_[F, E_prev]))
        nxt = [_g_from_parts(g, F, E_k, u, f_k, solve_h(g, u, np.r_[F, E_k])) for u in S]
    else:
        cur = _q_from_h(g, F, E_prev, w, solve_h(g, w, np.r_[F, E_prev]))
        nxt = [_q_from_h(g, F, E_k, u, solve_h(g, u, np.r_[F, E_k])) for u in S]
    prob = weights / weights.sum()
    return cur.values, np.array([fld.values for fld in nxt]), prob, reach, S


def check_martingale(g: LatticeDomain, prefix, v0: int, observable: str = "g") -> float:
    """``|E[obs_{k+1}(v0) | prefix] - obs_k(v0)|`` evaluated exactly.

    See :func:`martingale_terms` for the conventions and the typed stops.
    """
    cur, expected, _ = martingale_terms(g, prefix, v0, observable)
    return abs(expected - cur)


def estimate_modulus(g: LatticeDomain, B1set, B2set) -> float:
    """Discrete modulus ``2 pi / L(B2set, B1set)``.

    Unit conductances make the grid conductance approximate the Dirichlet
    energy ``2 pi / M`` of the harmonic measure of ``B2set``; the bias is
    first order in the mesh size.
    """
    f = solve_f(g, B2set, B1set)
    return 2.0 * np.pi / flux(f, f.B)


def hitting_distribution(g: LatticeDomain, x: int, A, B) -> np.ndarray:
    """Law of the first vertex of ``A`` hit by the walk from ``x``, given ``A`` before ``B``.

    With ``K`` the Dirichlet Laplacian off ``A u B``, the walk's expected
    number of visits to ``w`` is ``(K^{-1} e_x)_w deg(w)``, so the mass at
    ``a in A`` is ``sum_{w ~ a} (K^{-1} e_x)_w`` before normalization.

    Returns
    -------
    ndarray
        Probabilities aligned with ``np.unique(A)``.
    """
    A, B = _as_index(A), _as_index(B)
    _check_sets(A, B)
    fixed = np.r_[A, B]
    free = np.ones(g.n, bool)
    free[fixed] = False
    if not free[x]:
        raise ValueError("x must be a free vertex")
    C = np.nonzero(free)[0]
    adj = g.adjacency
    K = (sp.diags(g.degree[C].astype(float)) - adj[C][:, C]).tocsc()
    e = np.zeros(C.size)
    e[np.searchsorted(C, x)] = 1.0
    green = np.zeros(g.n)
    green[C] = spla.splu(K).solve(e)
    mass = adj[A] @ green
    tot = mass.sum()
    if not tot > 0:
        raise ZeroAccess("A is not reachable from x")
    return mass / tot


# --- discrete harmonic conjugate on the dual square cells -------------------

class DualComplex:
    """Square cells of a lattice graph and the dual edges between them.

    A cell is a unit lattice square whose four corners are graph vertices.
    Two cells sharing a side are dual neighbours when that side is a graph
    edge.  Crossing a side from ``(i, j)`` to ``(i + 1, j)`` moves from the cell
    below to the cell above; crossing a side from ``(i, j)`` to ``(i, j + 1)``
    moves from the cell on the left to the cell on the right.  Sides on the
    negative real axis carry a ``2 pi`` jump so the conjugate is a branch of
    ``arg`` with the cut along ``(-inf, 0)``.
    """

    def __init__(self, g: LatticeDomain):
        self.graph = g
        ij = g.lattice_ij
        on = np.nonzero(ij[:, 0] != NO_LATTICE)[0]
        i0, j0 = ij[on, 0].min(), ij[on, 1].min()
        ni, nj = ij[on, 0].max() - i0 + 1, ij[on, 1].max() - j0 + 1
        vid = -np.ones((ni + 2, nj + 2), np.int64)
        vid[ij[on, 0] - i0, ij[on, 1] - j0] = on
        self.i0, self.j0 = int(i0), int(j0)
        # cells indexed by lower-left corner
        c00, c10 = vid[:-1, :-1], vid[1:, :-1]
        c01, c11 = vid[:-1, 1:], vid[1:, 1:]
        valid = (c00 >= 0) & (c10 >= 0) & (c01 >= 0) & (c11 >= 0)
        cid = -np.ones(valid.shape, np.int64)
        ci, cj = np.nonzero(valid)
        cid[ci, cj] = np.arange(ci.size)
        self.cell_ij = np.stack([ci + i0, cj + j0], axis=1)
        self.corners = np.stack([c00[ci, cj], c10[ci, cj], c01[ci, cj], c11[ci, cj]], axis=1)
        self.n_cells = int(ci.size)
        n = g.n
        ekey = set((g.edges[:, 0] * n + g.edges[:, 1]).tolist())

        def is_edge(a, b):
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            return np.fromiter((k in ekey for k in (lo * n + hi).tolist()), bool, lo.size)

        frm, to, pa, pb, sgn, cut = [], [], [], [], [], []
        # horizontal side (i,j)-(i+1,j): cell (i,j-1) below -> cell (i,j) above
        below, above = cid[:, :-1], cid[:, 1:]
        bi, bj = np.nonzero((below >= 0) & (above >= 0))
        a, b = vid[bi, bj + 1], vid[bi + 1, bj + 1]
        ok = is_edge(a, b)
        frm.append(below[bi, bj][ok]); to.append(above[bi, bj][ok])
        pa.append(a[ok]); pb.append(b[ok]); sgn.append(-np.ones(ok.sum()))
        jj = bj[ok] + 1 + j0
        ii = bi[ok] + i0
        cut.append(np.where((jj == 0) & (ii <= -1), 2.0 * np.pi, 0.0))
        # vertical side (i,j)-(i,j+1): cell (i-1,j) left -> cell (i,j) right
        left, right = cid[:-1, :], cid[1:, :]
        li, lj = np.nonzero((left >= 0) & (right >= 0))
        a, b = vid[li + 1, lj], vid[li + 1, lj + 1]
        ok = is_edge(a, b)
        frm.append(left[li, lj][ok]); to.append(right[li, lj][ok])
        pa.append(a[ok]); pb.append(b[ok]); sgn.append(np.ones(ok.sum()))
        cut.append(np.zeros(ok.sum()))
        self.frm = np.concatenate(frm).astype(np.int64)
        self.to = np.concatenate(to).astype(np.int64)
        self.pa = np.concatenate(pa).astype(np.int64)
        self.pb = np.concatenate(pb).astype(np.int64)
        self.sign = np.concatenate(sgn)
        self.cut = np.concatenate(cut)
        m = self.frm.size
        # CSR adjacency of cells listing (neighbour, edge id, orientation)
        src = np.r_[self.frm, self.to]
        dst = np.r_[self.to, self.frm]
        eid = np.r_[np.arange(m), np.arange(m)]
        ori = np.r_[np.ones(m), -np.ones(m)]
        order = np.argsort(src, kind="stable")
        self.indptr = np.searchsorted(src[order], np.arange(self.n_cells + 1)).astype(np.int64)
        self.nbr = dst[order].astype(np.int64)
        self.eid = eid[order].astype(np.int64)
        self.ori = ori[order]
        # cells around each vertex
        vc = np.r_[self.corners[:, 0], self.corners[:, 1], self.corners[:, 2], self.corners[:, 3]]
        cc = np.tile(np.arange(self.n_cells), 4)
        o = np.argsort(vc, kind="stable")
        self._vc_ptr = np.searchsorted(vc[o], np.arange(n + 1))
        self._vc = cc[o]

    def cells_at(self, v: int) -> np.ndarray:
        return self._vc[self._vc_ptr[v]:self._vc_ptr[v + 1]]

    def increments(self, U: np.ndarray, M: float, dirichlet: np.ndarray):
        """Per-edge conjugate increments and the mask of usable dual edges."""
        active = ~(dirichlet[self.pa] & dirichlet[self.pb])
        dV = self.sign * M * (U[self.pb] - U[self.pa]) + self.cut
        return dV, active

    def integrate(self, U, M, dirichlet, root_cell):
        """Conjugate on the cells reachable from ``root_cell`` (``NaN`` elsewhere).

        Returns the cell values (root at 0) and the largest closure error on
        non-tree dual edges.
        """
        dV, active = self.increments(U, M, dirichlet)
        V = np.full(self.n_cells, np.nan)
        err = _tree_integrate(self.indptr, self.nbr, self.eid, self.ori, dV, active, int(root_cell), V)
        return V, err

    def vertex_value(self, V: np.ndarray, v: int) -> float:
        vals = V[self.cells_at(v)]
        vals = vals[np.isfinite(vals)]
        if not vals.size:
            return np.nan
        # cells on both sides of the branch cut differ by 2 pi
        return float(np.mean(vals[0] + _wrap(vals - vals[0])))

    def vertex_values(self, V: np.ndarray) -> np.ndarray:
        vc_v = np.repeat(np.arange(self.graph.n), np.diff(self._vc_ptr))
        vals = V[self._vc]
        ok = np.isfinite(vals)
        first = np.full(self.graph.n, np.nan)
        first[vc_v[ok][::-1]] = vals[ok][::-1]
        vals = first[vc_v] + _wrap(vals - first[vc_v])
        s = np.bincount(vc_v[ok], vals[ok], minlength=self.graph.n)
        c = np.bincount(vc_v[ok], minlength=self.graph.n)
        out = np.full(self.graph.n, np.nan)
        out[c > 0] = s[c > 0] / c[c > 0]
        return out


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


@numba.njit(cache=True)
def _tree_integrate(indptr, nbr, eid, ori, dV, active, root, V):
    n = indptr.size - 1
    seen = np.zeros(n, np.bool_)
    queue = np.empty(n, np.int64)
    queue[0] = root
    seen[root] = True
    V[root] = 0.0
    head, tail = 0, 1
    err = 0.0
    while head < tail:
        c = queue[head]
        head += 1
        for k in range(indptr[c], indptr[c + 1]):
            e = eid[k]
            if not active[e]:
                continue
            d = nbr[k]
            val = V[c] + ori[k] * dV[e]
            if not seen[d]:
                seen[d] = True
                V[d] = val
                queue[tail] = d
                tail += 1
            else:
                diff = abs(V[d] - val)
                if diff > err:
                    err = diff
    return err


def default_anchor(g: LatticeDomain, dual: DualComplex, dirichlet: np.ndarray) -> int:
    """Free lattice vertex on the positive real axis closest to the hole with a cell around it."""
    ij = g.lattice_ij
    cand = np.nonzero((ij[:, 1] == 0) & (ij[:, 0] > 0) & (ij[:, 0] != NO_LATTICE) & ~dirichlet)[0]
    cand = cand[np.argsort(ij[cand, 0])]
    for v in cand:
        if dual.cells_at(v).size:
            return int(v)
    raise PeriodMismatch("no anchor vertex on the positive real axis")


@dataclass
class Uniformization:
    """Approximate map ``z -> exp(-M U(z) + i V(z))`` onto ``A_M``.

    Attributes
    ----------
    M : float
        Estimated modulus.
    U : HarmonicField
        Potential, 0 on the ``B1`` side and 1 on the ``B2`` side.
    V : ndarray
        Conjugate per vertex (``NaN`` where no cell touches the vertex),
        normalized so ``V(anchor) = 0``.
    cell_V : ndarray
        Conjugate per dual cell.
    anchor : int
    closure_error : float
        Largest mismatch around dual cycles, including the hole period.
    """

    M: float
    U: HarmonicField
    V: np.ndarray
    cell_V: np.ndarray
    anchor: int
    closure_error: float
    dual: DualComplex = field(repr=False)

    def image(self) -> np.ndarray:
        return np.exp(-self.M * self.U.values + 1j * self.V)


def _conjugate(dual, U, M, dirichlet, anchor):
    cells = dual.cells_at(anchor)
    if cells.size == 0:
        raise PeriodMismatch("anchor vertex has no surrounding cell")
    V, err = dual.integrate(U, M, dirichlet, cells[0])
    if err > PERIOD_TOL * max(1.0, M):
        raise PeriodMismatch(f"conjugate period off by {err:.3e}")
    V -= dual.vertex_value(V, anchor)
    return V, err


def uniformize_annulus(g: LatticeDomain, B1set, B2set, anchor: Optional[int] = None,
                       dual: Optional[DualComplex] = None) -> Uniformization:
    """Potential, modulus and conjugate of a lattice doubly connected domain.

    The conjugate is integrated along a breadth-first spanning tree of the
    dual cells, with the branch cut on the negative real axis (the hole must
    contain the origin).  Consistency on every non-tree dual edge, which
    includes the ``2 pi`` period around the hole, is checked.

    Raises
    ------
    PeriodMismatch
        If some dual cycle fails to close within ``1e-8``.
    """
    B1set, B2set = _as_index(B1set), _as_index(B2set)
    U = solve_f(g, B2set, B1set)
    L = flux(U, B1set)
    M = 2.0 * np.pi / L
    dual = dual if dual is not None else DualComplex(g)
    dirichlet = np.zeros(g.n, bool)
    dirichlet[B1set] = True
    dirichlet[B2set] = True
    anchor = default_anchor(g, dual, dirichlet) if anchor is None else int(anchor)
    cV, err = _conjugate(dual, U.values, M, dirichlet, anchor)
    return Uniformization(M, U, dual.vertex_values(cV), cV, anchor, err, dual)


class SlitEngine:
    """Moduli and potentials of a domain with a growing path prefix removed.

    With ``K`` the Dirichlet Laplacian on the interior of the base domain,
    ``u0 = K^{-1} b`` the base potential and ``G = K^{-1}``, turning the
    interior vertices ``P`` of a prefix into zero boundary gives
    ``u = u0 - G[:, P] G[P, P]^{-1} u0[P]`` and conductance
    ``L = L0 + u0[P]^T G[P, P]^{-1} u0[P]``.  This equals deleting the prefix
    and re-solving, at the cost of one triangular solve per path vertex.

    Parameters
    ----------
    g : LatticeDomain
        Base domain; ``B1`` is the start side, ``B2`` the target.
    """

    def __init__(self, g: LatticeDomain):
        self.graph = g
        self.free = np.nonzero(g.labels == INTERIOR)[0]
        self.pos = -np.ones(g.n, np.int64)
        self.pos[self.free] = np.arange(self.free.size)
        adj = g.adjacency
        K = (sp.diags(g.degree[self.free].astype(float)) - adj[self.free][:, self.free]).tocsc()
        try:
            self.lu = spla.splu(K)
        except RuntimeError as exc:
            raise SolverFailure(f"singular base system: {exc}") from exc
        ind_F = (g.labels == B2).astype(float)
        b = adj[self.free] @ ind_F
        u0 = np.zeros(g.n)
        u0[g.labels == B2] = 1.0
        u0[self.free] = self.lu.solve(b)
        self.u0 = u0
        self.L0 = float(np.sum(laplacian_all(g, u0)[g.labels == B1]))
        self.M_full = 2.0 * np.pi / self.L0
        self._dual = None

    @property
    def dual(self) -> DualComplex:
        if self._dual is None:
            self._dual = DualComplex(self.graph)
        return self._dual

    def path(self, path: Sequence[int]) -> "SlitPath":
        return SlitPath(self, path)


class SlitPath:
    """Schur-complement data for one path in a :class:`SlitEngine`.

    Checkpoint ``c`` removes ``path[:c + 1]``; ``path[0]`` is the marked
    boundary vertex, so checkpoint 0 is the base domain.  Leading blocks of
    the Cholesky factor of ``G[P, P]`` give every prefix at once.
    """

    def __init__(self, engine: SlitEngine, path: Sequence[int]):
        g = engine.graph
        self.engine = engine
        self.path = np.asarray(path, np.int64)
        lab = g.labels[self.path]
        self.interior_idx = np.nonzero(lab == INTERIOR)[0]
        P = self.path[self.interior_idx]
        self.P = P
        if P.size:
            rhs = np.zeros((engine.free.size, P.size))
            rhs[engine.pos[P], np.arange(P.size)] = 1.0
            self.G_free = engine.lu.solve(rhs)
            G_PP = self.G_free[engine.pos[P]]
            self.chol = cholesky(0.5 * (G_PP + G_PP.T), lower=True)
            self.z = solve_triangular(self.chol, engine.u0[P], lower=True)
        else:
            self.G_free = np.zeros((engine.free.size, 0))
            self.chol = np.zeros((0, 0))
            self.z = np.zeros(0)
        self._L = engine.L0 + np.concatenate(([0.0], np.cumsum(self.z ** 2)))

    def _k(self, c: int) -> int:
        """Number of interior path vertices within ``path[:c + 1]``."""
        if c < 0 or c >= self.path.size:
            raise IndexError("checkpoint outside the path")
        if c == self.path.size - 1 and self.engine.graph.labels[self.path[-1]] == B2:
            raise Disconnected("the full path joins the two boundary components")
        return int(np.searchsorted(self.interior_idx, c, side="right"))

    def conductance(self, c: int) -> float:
        return float(self._L[self._k(c)])

    def moduli(self, checkpoints) -> np.ndarray:
        return np.array([2.0 * np.pi / self.conductance(int(c)) for c in checkpoints])

    def capacity_times(self, checkpoints) -> np.ndarray:
        return self.engine.M_full - self.moduli(checkpoints)

    def potential(self, c: int) -> np.ndarray:
        k = self._k(c)
        u = self.engine.u0.copy()
        if k:
            lam = solve_triangular(self.chol[:k, :k], self.z[:k], lower=True, trans="T")
            u[self.engine.free] -= self.G_free[:, :k] @ lam
            u[self.P[:k]] = 0.0
        return u

    def dirichlet_mask(self, c: int) -> np.ndarray:
        g = self.engine.graph
        mask = g.labels != INTERIOR
        mask[self.path[:c + 1]] = True
        return mask

    def conjugate(self, c: int, anchor: Optional[int] = None):
        """Modulus, cell conjugate (``V(anchor) = 0``) and anchor for checkpoint ``c``."""
        dual = self.engine.dual
        U = self.potential(c)
        M = 2.0 * np.pi / self.conductance(c)
        mask = self.dirichlet_mask(c)
        if anchor is None:
            anchor = default_anchor(self.engine.graph, dual, mask)
        V, err = _conjugate(dual, U, M, mask, anchor)
        return M, V, anchor, err

    def tip_angle(self, c: int, anchor: Optional[int] = None) -> float:
        """Conjugate at the tip ``path[c]``.

        Averages the reachable cells touching the tip; if there are none
        (tip next to a curved boundary) the cells touching the tip's free
        neighbours are used instead.

        Raises
        ------
        TipIsolated
            If neither source has a reachable cell.
        """
        _, V, _, _ = self.conjugate(c, anchor)
        dual = self.engine.dual
        tip = int(self.path[c])
        cells = dual.cells_at(tip)
        vals = V[cells][np.isfinite(V[cells])]
        if not vals.size:
            mask = self.dirichlet_mask(c)
            nb = [int(w) for w in self.engine.graph.neighbors(tip) if not mask[w]]
            cells = np.concatenate([dual.cells_at(w) for w in nb]) if nb else np.empty(0, np.int64)
            vals = V[cells][np.isfinite(V[cells])]
        if not vals.size:
            raise TipIsolated(f"no surviving cell near tip {tip}")
        return float(np.mean(vals[0] + _wrap(vals - vals[0])))
