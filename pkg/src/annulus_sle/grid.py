"""Lattice approximations of doubly connected domains.

The graph ``D^delta`` has as vertices the points of ``delta Z^2`` inside the
domain together with the points where the boundary meets lattice edges; two
vertices are joined when the open segment between them lies in the domain
and inside a single lattice edge.  Boundary vertices on the start component
are labelled ``B1`` (the initial set ``E``), those on the target component
``B2`` (the set ``F``).

:func:`build_cylinder` builds the graph approximating the flat cylinder
``{0 <= Im z <= p}`` modulo ``2 pi`` used for the reversibility experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateSpec, Disconnected, MeshTooCoarse

__all__ = [
    "INTERIOR",
    "B1",
    "B2",
    "Circle",
    "Polygon",
    "DomainSpec",
    "LatticeDomain",
    "build_lattice",
    "prune_reachable",
    "build_cylinder",
]

INTERIOR, B1, B2 = 0, 1, 2
SNAP = 1e-12
NO_LATTICE = np.iinfo(np.int64).min


class Circle:
    """Circle ``|z - center| = radius``."""

    def __init__(self, center: complex, radius: float):
        if radius <= 0:
            raise DegenerateSpec("circle radius must be positive")
        self.center = complex(center)
        self.radius = float(radius)

    def inside(self, x, y):
        return (x - self.center.real) ** 2 + (y - self.center.imag) ** 2 < self.radius ** 2

    def distance(self, x, y):
        return np.abs(np.hypot(x - self.center.real, y - self.center.imag) - self.radius)

    def crossings(self, horizontal: bool, c: float) -> np.ndarray:
        """Coordinates along the line ``y = c`` (or ``x = c``) where it meets the circle."""
        a, b = (self.center.imag, self.center.real) if horizontal else (self.center.real, self.center.imag)
        d2 = self.radius ** 2 - (c - a) ** 2
        if d2 < 0:
            return np.empty(0)
        d = np.sqrt(d2)
        return np.array([b - d, b + d]) if d > 0 else np.array([b])

    def bbox(self):
        c, r = self.center, self.radius
        return c.real - r, c.real + r, c.imag - r, c.imag + r

    def to_dict(self):
        return {"type": "circle", "center": [self.center.real, self.center.imag], "radius": self.radius}


class Polygon:
    """Closed polygon given by its vertices (Jordan curve)."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=complex)
        if v.size < 3:
            raise DegenerateSpec("polygon needs at least three vertices")
        self.v = v
        self.w = np.roll(v, -1)

    def inside(self, x, y):
        x = np.asarray(x, float)[..., None]
        y = np.asarray(y, float)[..., None]
        ax, ay, bx, by = self.v.real, self.v.imag, self.w.real, self.w.imag
        cond = (ay > y) != (by > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (y - ay) * (bx - ax) / (by - ay)
        return (np.sum(cond & (x < xint), axis=-1) % 2) == 1

    def distance(self, x, y):
        z = (np.asarray(x, float) + 1j * np.asarray(y, float))[..., None]
        seg = self.w - self.v
        lam = np.clip(np.real((z - self.v) * np.conj(seg)) / np.abs(seg) ** 2, 0.0, 1.0)
        return np.min(np.abs(z - (self.v + lam * seg)), axis=-1)

    def crossings(self, horizontal: bool, c: float) -> np.ndarray:
        if horizontal:
            a0, a1, b0, b1 = self.v.imag, self.w.imag, self.v.real, self.w.real
        else:
            a0, a1, b0, b1 = self.v.real, self.w.real, self.v.imag, self.w.imag
        hit = (a0 > c) != (a1 > c)
        lam = (c - a0[hit]) / (a1[hit] - a0[hit])
        return np.sort(b0[hit] + lam * (b1[hit] - b0[hit]))

    def bbox(self):
        return self.v.real.min(), self.v.real.max(), self.v.imag.min(), self.v.imag.max()

    def to_dict(self):
        return {"type": "polygon", "vertices": [[z.real, z.imag] for z in self.v]}


@dataclass(frozen=True)
class DomainSpec:
    """Doubly connected domain between an outer and an inner Jordan curve.

    Parameters
    ----------
    outer, inner : Circle or Polygon
    start : complex
        Marked boundary point (must be a lattice point at the mesh used).
    access : complex
        Unit lattice direction pointing from ``start`` into the domain.
    start_on : {"outer", "inner"}
        Which curve carries ``start`` (the ``B1`` side).
    """

    outer: object
    inner: object
    start: complex = 1.0
    access: complex = -1.0
    start_on: str = "outer"

    @classmethod
    def annulus(cls, p: float) -> "DomainSpec":
        """Standard annulus ``e^{-p} < |z| < 1`` started at ``1``."""
        return cls(Circle(0.0, 1.0), Circle(0.0, float(np.exp(-p))), 1.0, -1.0, "outer")

    def inside(self, x, y):
        return self.outer.inside(x, y) & ~self.inner.inside(x, y)

    def b1_curve(self):
        return self.outer if self.start_on == "outer" else self.inner

    def to_dict(self):
        return {"outer": self.outer.to_dict(), "inner": self.inner.to_dict(),
                "start": [complex(self.start).real, complex(self.start).imag],
                "access": [complex(self.access).real, complex(self.access).imag],
                "start_on": self.start_on}


@dataclass(frozen=True)
class LatticeDomain:
    """Graph approximation of a doubly connected domain.

    Attributes
    ----------
    delta : float
        Mesh size.
    points : ndarray, shape (n, 2)
        Vertex coordinates.
    labels : ndarray of int8
        ``INTERIOR``, ``B1`` (start side, initial set ``E``) or ``B2`` (target
        set ``F``).
    edges : ndarray, shape (m, 2)
        Undirected edges ``i < j``.
    start_vertex : int
        Interior vertex next to the marked boundary vertex.
    marked_vertex : int
        Boundary vertex at the marked point (the walk's origin ``0``).
    lattice_ij : ndarray, shape (n, 2)
        Integer lattice coordinates, ``NO_LATTICE`` for boundary points off
        the lattice.
    kind : str
        ``"lattice"`` or ``"cylinder"``.
    meta : dict
    """

    delta: float
    points: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    start_vertex: int
    marked_vertex: int
    lattice_ij: np.ndarray
    kind: str = "lattice"
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n
        e = self.edges
        a = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                          shape=(n, n))
        a = a.tocsr()
        a.sum_duplicates()
        a.sort_indices()
        return a

    @property
    def indptr(self):
        return self.adjacency.indptr

    @property
    def indices(self):
        return self.adjacency.indices

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    @property
    def E_init(self) -> np.ndarray:
        return np.nonzero(self.labels == B1)[0]

    @property
    def F(self) -> np.ndarray:
        return np.nonzero(self.labels == B2)[0]

    @property
    def interior(self) -> np.ndarray:
        return np.nonzero(self.labels == INTERIOR)[0]

    @cached_property
    def lattice_index(self) -> dict:
        ij = self.lattice_ij
        ok = ij[:, 0] != NO_LATTICE
        return {(int(a), int(b)): int(v) for v, (a, b) in zip(np.nonzero(ok)[0], ij[ok])}

    @property
    def complex_points(self) -> np.ndarray:
        return self.points[:, 0] + 1j * self.points[:, 1]

    def to_json(self) -> str:
        return json.dumps({
            "delta": self.delta,
            "kind": self.kind,
            "start_vertex": int(self.start_vertex),
            "marked_vertex": int(self.marked_vertex),
            "vertices": [{"x": float(x), "y": float(y), "label": int(l)}
                         for (x, y), l in zip(self.points, self.labels)],
            "lattice_ij": [[int(a), int(b)] if a != NO_LATTICE else None for a, b in self.lattice_ij],
            "edges": self.edges.tolist(),
            "meta": self.meta,
        })

    @classmethod
    def from_json(cls, text: str) -> "LatticeDomain":
        d = json.loads(text)
        pts = np.array([[v["x"], v["y"]] for v in d["vertices"]], float)
        lab = np.array([v["label"] for v in d["vertices"]], np.int8)
        ij = np.array([c if c is not None else [NO_LATTICE, NO_LATTICE] for c in d["lattice_ij"]], np.int64)
        edges = np.array(d["edges"], np.int64).reshape(-1, 2)
        return cls(d["delta"], pts, lab, edges, d["start_vertex"], d["marked_vertex"], ij,
                   d.get("kind", "lattice"), d.get("meta", {}))


def _line_events(spec: DomainSpec, horizontal: bool, c: float, lat_lo: int, lat_hi: int, delta: float):
    """Lattice points and boundary crossings along one lattice line, sorted."""
    ks = np.arange(lat_lo, lat_hi + 1)
    pos = ks * delta
    crs = []
    for curve in (spec.outer, spec.inner):
        crs.append(curve.crossings(horizontal, c))
    crs = np.concatenate(crs) if crs else np.empty(0)
    # crossings that coincide with lattice points are represented by the lattice point
    keep = []
    for x in crs:
        k = np.rint(x / delta)
        if abs(x - k * delta) > SNAP:
            keep.append(x)
    crs = np.unique(np.asarray(keep, float))
    return pos, ks, crs


def build_lattice(spec: DomainSpec, delta: float) -> LatticeDomain:
    """Grid graph ``D^delta`` of a doubly connected domain.

    Parameters
    ----------
    spec : DomainSpec
    delta : float
        Mesh size; ``spec.start`` must be a lattice point.

    Returns
    -------
    LatticeDomain
        Unpruned graph; see :func:`prune_reachable`.

    Raises
    ------
    MeshTooCoarse
        If the marked point is not a lattice point or its access neighbour is
        missing.
    DegenerateSpec
        If the inner curve is not strictly inside the outer one.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x0, x1, y0, y1 = spec.outer.bbox()
    # inner curve must sit strictly inside the outer one
    if isinstance(spec.inner, Circle):
        c = spec.inner.center
        th = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        qx = c.real + spec.inner.radius * np.cos(th)
        qy = c.imag + spec.inner.radius * np.sin(th)
    else:
        qx, qy = spec.inner.v.real, spec.inner.v.imag
    if not np.all(spec.outer.inside(qx, qy)) or np.any(spec.outer.distance(qx, qy) < SNAP):
        raise DegenerateSpec("inner curve must lie strictly inside the outer curve")

    i_lo, i_hi = int(np.floor(x0 / delta)) - 1, int(np.ceil(x1 / delta)) + 1
    j_lo, j_hi = int(np.floor(y0 / delta)) - 1, int(np.ceil(y1 / delta)) + 1

    ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing="ij")
    px, py = ii * delta, jj * delta
    dist_out = spec.outer.distance(px, py)
    dist_in = spec.inner.distance(px, py)
    on_bdry = (dist_out < SNAP) | (dist_in < SNAP)
    inside = spec.inside(px, py) & ~on_bdry

    vid = {}
    pts, lab, ijs = [], [], []
    b1c = spec.b1_curve()

    def boundary_label(x, y):
        d1 = b1c.distance(np.array(x), np.array(y))
        other = spec.inner if b1c is spec.outer else spec.outer
        d2 = other.distance(np.array(x), np.array(y))
        return B1 if d1 <= d2 else B2

    def lattice_vertex(i, j):
        key = (i, j)
        v = vid.get(key)
        if v is None:
            v = len(pts)
            vid[key] = v
            x, y = i * delta, j * delta
            pts.append((x, y))
            a, b = i - i_lo, j - j_lo
            lab.append(boundary_label(x, y) if on_bdry[a, b] else INTERIOR)
            ijs.append((i, j))
        return v

    def crossing_vertex(key, x, y):
        v = vid.get(key)
        if v is None:
            v = len(pts)
            vid[key] = v
            pts.append((x, y))
            lab.append(boundary_label(x, y))
            ijs.append((NO_LATTICE, NO_LATTICE))
        return v

    # lattice points in the closed domain first, in lexicographic order
    for a, b in zip(*np.nonzero(inside | on_bdry)):
        lattice_vertex(int(ii[a, b]), int(jj[a, b]))

    edges = []
    for horizontal in (True, False):
        line_range = range(j_lo, j_hi + 1) if horizontal else range(i_lo, i_hi + 1)
        for m in line_range:
            c = m * delta
            lo, hi = (i_lo, i_hi) if horizontal else (j_lo, j_hi)
            pos, ks, crs = _line_events(spec, horizontal, c, lo, hi, delta)
            coords = np.concatenate((pos, crs))
            kinds = np.concatenate((ks, np.full(crs.size, NO_LATTICE)))
            order = np.argsort(coords, kind="stable")
            coords, kinds = coords[order], kinds[order]
            mids = 0.5 * (coords[:-1] + coords[1:])
            if horizontal:
                mid_in = spec.inside(mids, np.full(mids.size, c))
            else:
                mid_in = spec.inside(np.full(mids.size, c), mids)
            for q in np.nonzero(mid_in & (np.diff(coords) > SNAP))[0]:
                ends = []
                for r in (q, q + 1):
                    k = kinds[r]
                    if k != NO_LATTICE:
                        i, j = (int(k), m) if horizontal else (m, int(k))
                        a, b = i - i_lo, j - j_lo
                        if not (inside[a, b] or on_bdry[a, b]):
                            raise DegenerateSpec("edge endpoint outside the domain")
                        ends.append(lattice_vertex(i, j))
                    else:
                        x, y = (coords[r], c) if horizontal else (c, coords[r])
                        key = ("h", m, float(coords[r])) if horizontal else ("v", m, float(coords[r]))
                        ends.append(crossing_vertex(key, x, y))
                edges.append((min(ends), max(ends)))

    pts = np.asarray(pts, float)
    lab = np.asarray(lab, np.int8)
    ijs = np.asarray(ijs, np.int64)
    edges = np.unique(np.asarray(edges, np.int64).reshape(-1, 2), axis=0)

    s = complex(spec.start)
    si, sj = np.rint(s.real / delta), np.rint(s.imag / delta)
    if abs(si * delta - s.real) > SNAP or abs(sj * delta - s.imag) > SNAP:
        raise MeshTooCoarse("marked point is not a lattice point at this mesh")
    marked = vid.get((int(si), int(sj)))
    acc = complex(spec.access)
    start = vid.get((int(si + np.rint(acc.real)), int(sj + np.rint(acc.imag))))
    if marked is None or start is None or lab[marked] != B1 or lab[start] != INTERIOR:
        raise MeshTooCoarse("marked boundary vertex or its interior neighbour is missing")
    g = LatticeDomain(delta, pts, lab, edges, int(start), int(marked), ijs, "lattice",
                      {"domain": spec.to_dict()})
    if start not in set(g.neighbors(marked).tolist()):
        raise MeshTooCoarse("access segment is not a graph edge")
    if g.F.size == 0:
        raise MeshTooCoarse("no vertex on the target boundary")
    return g


def _subgraph(g: LatticeDomain, keep: np.ndarray, edge_mask: np.ndarray) -> LatticeDomain:
    new_id = -np.ones(g.n, np.int64)
    kept = np.nonzero(keep)[0]
    new_id[kept] = np.arange(kept.size)
    e = g.edges[edge_mask]
    e = new_id[e]
    return LatticeDomain(g.delta, g.points[kept], g.labels[kept], e, int(new_id[g.start_vertex]),
                         int(new_id[g.marked_vertex]), g.lattice_ij[kept], g.kind, dict(g.meta))


def prune_reachable(g: LatticeDomain) -> LatticeDomain:
    """Keep the union of lattice paths from the start vertex to the boundary.

    Such paths run through interior vertices only and end at the first
    boundary vertex, so the result is the interior component of the start
    vertex together with the boundary vertices adjacent to it.

    Raises
    ------
    Disconnected
        If no vertex of ``F`` is reachable.
    """
    interior = g.labels == INTERIOR
    e = g.edges
    both = interior[e[:, 0]] & interior[e[:, 1]]
    a = sp.coo_matrix((np.ones(both.sum()), (e[both, 0], e[both, 1])), shape=(g.n, g.n))
    _, comp = connected_components(a, directed=False)
    mine = interior & (comp == comp[g.start_vertex])
    touch = mine[e[:, 0]] | mine[e[:, 1]]
    keep = mine.copy()
    keep[e[touch].ravel()] = True
    keep[g.marked_vertex] = True
    if not np.any(keep & (g.labels == B2)):
        raise Disconnected("no path from the start vertex reaches the target boundary")
    if np.all(keep) and np.all(touch):
        return g
    return _subgraph(g, keep, touch)


def build_cylinder(n: int, p: float) -> LatticeDomain:
    """Graph approximating the cylinder ``{0 <= y <= p}`` with angular period ``2 pi``.

    Vertices are ``(2 k pi / n, 2 m pi / n)`` for ``0 <= m <= floor(p n / 2 pi)``
    and the top row ``(2 k pi / n, p)``; two vertices are adjacent when their
    distance (angles taken modulo ``2 pi``) is at most ``2 pi / n``.  The row
    ``y = 0`` is labelled ``B1`` and the row ``y = p`` is labelled ``B2``.

    Raises
    ------
    MeshTooCoarse
        If ``n <= 2 pi / p``.
    """
    if n <= 2.0 * np.pi / p:
        raise MeshTooCoarse("need n > 2 pi / p")
    h = 2.0 * np.pi / n
    mtop = int(np.floor(p * n / (2.0 * np.pi) + 1e-12))
    ys = [m * h for m in range(mtop + 1)]
    if p - ys[-1] > 1e-12:
        ys.append(p)
    else:
        # the top row already lies on y = p
        ys[-1] = p
    rows = len(ys)
    pts, lab, ijs = [], [], []
    for r, y in enumerate(ys):
        for k in range(n):
            pts.append((k * h, y))
            lab.append(B1 if r == 0 else (B2 if r == rows - 1 else INTERIOR))
            ijs.append((k, r))
    pts = np.asarray(pts, float)
    lab = np.asarray(lab, np.int8)
    ijs = np.asarray(ijs, np.int64)
    vid = lambda k, r: r * n + (k % n)
    edges = set()
    for r in range(rows):
        for k in range(n):
            a = vid(k, r)
            b = vid(k + 1, r)
            if a != b:
                edges.add((min(a, b), max(a, b)))
            if r + 1 < rows and ys[r + 1] - ys[r] <= h + 1e-12:
                c = vid(k, r + 1)
                edges.add((min(a, c), max(a, c)))
    edges = np.asarray(sorted(edges), np.int64)
    g = LatticeDomain(h, pts, lab, edges, vid(0, 1), vid(0, 0), ijs, "cylinder",
                      {"n": n, "p": float(p), "rows": rows, "heights": ys})
    if rows < 3:
        raise MeshTooCoarse("cylinder has no interior row")
    return g
