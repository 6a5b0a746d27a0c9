"""Loop-erased conditioned random walks and their driving functions.

The conditioned walk (CRW) is the simple random walk from the start vertex
conditioned to reach the target set ``F`` before the initial set ``E``.  It
is sampled exactly through the Doob transform by ``f = P(hit F before E)``:
from ``v`` the walk moves to ``w ~ v`` with probability ``f(w) / sum f(u)``.
Chronological loop erasure of a CRW path, preceded by the marked boundary
vertex, is the LERW curve.

The curve is parameterized by capacity ``T(s) = M(D) - M(D minus y[0..s])``
and its driving angle is read from the harmonic conjugate of the slit
domain's potential (see :class:`annulus_sle.harmonic.SlitEngine`).

The exact helpers at the bottom enumerate the LERW law on tiny graphs with
rational arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import Disconnected, TipIsolated, ZeroAccess
from .grid import B1, B2, INTERIOR, LatticeDomain
from .harmonic import SlitEngine, estimate_modulus, solve_f
from .kernel import covering_values

__all__ = [
    "LerwSample",
    "derive_seed",
    "access_probability",
    "sample_crw",
    "loop_erase",
    "sample_lerw",
    "capacity_parameterize",
    "extract_driving",
    "default_checkpoints",
    "rotation_correction",
    "mirror_map",
    "lerw_path_probability",
    "exact_lerw_law",
]


@dataclass(frozen=True)
class LerwSample:
    """One LERW curve with optional capacity and driving data.

    Attributes
    ----------
    path : ndarray of int
        ``y_{-1}, y_0, ..., y_u``: marked boundary vertex, then the loop
        erasure of the CRW, ending in ``F``.
    seed : int
    checkpoints : ndarray of int or None
        Path indices ``c``; checkpoint ``c`` removes ``path[:c + 1]``.
    capacity_times : ndarray or None
        ``T`` at each checkpoint.
    driving : ndarray or None
        Driving angle ``xi`` at each checkpoint (same alignment).
    """

    path: np.ndarray
    seed: int
    checkpoints: Optional[np.ndarray] = None
    capacity_times: Optional[np.ndarray] = None
    driving: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def driving_at(self, t) -> np.ndarray:
        """Driving angle at capacity times ``t`` (linear in ``T`` between checkpoints)."""
        if self.driving is None:
            raise ValueError("driving function not extracted")
        return np.interp(t, self.capacity_times, self.driving, right=np.nan)

    def to_csv(self, g: LatticeDomain, path) -> None:
        pts = g.points[self.path]
        with open(path, "w") as fh:
            fh.write("index,x,y\n")
            for k, (x, y) in enumerate(pts):
                fh.write(f"{k},{x!r},{y!r}\n")

    def sidecar_json(self) -> str:
        tolist = lambda a: None if a is None else np.asarray(a).tolist()
        return json.dumps({"seed": int(self.seed), "checkpoints": tolist(self.checkpoints),
                           "capacity_times": tolist(self.capacity_times),
                           "driving": tolist(self.driving), "meta": self.meta})


def derive_seed(seed: int) -> int:
    """32-bit seed for the compiled samplers, derived via ``SeedSequence``."""
    return int(np.random.SeedSequence(int(seed)).generate_state(1, np.uint32)[0])


def access_probability(g: LatticeDomain) -> np.ndarray:
    """``f = P(hit F before E_init)`` at every vertex."""
    return solve_f(g, g.F, g.E_init).values


@numba.njit(cache=True)
def _pick(indptr, indices, f, v):
    tot = 0.0
    for k in range(indptr[v], indptr[v + 1]):
        tot += f[indices[k]]
    u = np.random.random() * tot
    acc = 0.0
    last = -1
    for k in range(indptr[v], indptr[v + 1]):
        w = indices[k]
        if f[w] > 0.0:
            acc += f[w]
            last = w
            if u < acc:
                return w
    return last


@numba.njit(cache=True)
def _crw(indptr, indices, f, is_target, start, seed, max_steps):
    np.random.seed(seed)
    buf = np.empty(1024, np.int64)
    buf[0] = start
    n = 1
    v = start
    while not is_target[v]:
        if n > max_steps:
            return buf[:n], False
        v = _pick(indptr, indices, f, v)
        if n == buf.size:
            nb = np.empty(2 * buf.size, np.int64)
            nb[:n] = buf
            buf = nb
        buf[n] = v
        n += 1
    return buf[:n], True


@numba.njit(cache=True)
def _erase(path, n_vertices):
    pos = -np.ones(n_vertices, np.int64)
    out = np.empty(path.size, np.int64)
    m = 0
    for v in path:
        j = pos[v]
        if j >= 0:
            for k in range(j + 1, m):
                pos[out[k]] = -1
            m = j + 1
        else:
            out[m] = v
            pos[v] = m
            m += 1
    return out[:m]


@numba.njit(cache=True)
def _lerw(indptr, indices, f, is_target, start, seed, max_steps):
    np.random.seed(seed)
    n_vertices = indptr.size - 1
    pos = -np.ones(n_vertices, np.int64)
    out = np.empty(1024, np.int64)
    out[0] = start
    pos[start] = 0
    m = 1
    v = start
    steps = 0
    while not is_target[v]:
        if steps >= max_steps:
            return out[:m], False
        v = _pick(indptr, indices, f, v)
        steps += 1
        j = pos[v]
        if j >= 0:
            for k in range(j + 1, m):
                pos[out[k]] = -1
            m = j + 1
        else:
            if m == out.size:
                nb = np.empty(2 * out.size, np.int64)
                nb[:m] = out
                out = nb
            out[m] = v
            pos[v] = m
            m += 1
    return out[:m], True


def _walk_args(g, f):
    if f is None:
        f = access_probability(g)
    return g.indptr.astype(np.int64), g.indices.astype(np.int64), np.asarray(f, float), g.labels == B2


def sample_crw(g: LatticeDomain, seed: int, f: Optional[np.ndarray] = None,
               start: Optional[int] = None, max_steps: int = 10**9) -> np.ndarray:
    """Conditioned walk from ``start`` (default ``g.start_vertex``) until it hits ``F``.

    Raises
    ------
    ZeroAccess
        If ``f(start) = 0``.
    """
    indptr, indices, f, tgt = _walk_args(g, f)
    start = g.start_vertex if start is None else int(start)
    if not f[start] > 0:
        raise ZeroAccess("the start vertex cannot reach the target")
    path, done = _crw(indptr, indices, f, tgt, start, derive_seed(seed), max_steps)
    if not done:
        raise RuntimeError("walk exceeded max_steps")
    return path.copy()


def loop_erase(path) -> np.ndarray:
    """Chronological loop erasure.

    Examples
    --------
    >>> loop_erase([0, 1, 0, 2]).tolist()
    [0, 2]
    """
    path = np.asarray(path, np.int64)
    if path.size == 0:
        raise ValueError("path must be nonempty")
    return _erase(path, int(path.max()) + 1)


def sample_lerw(g: LatticeDomain, seed: int, f: Optional[np.ndarray] = None,
                start: Optional[int] = None, marked: Optional[int] = None,
                max_steps: int = 10**9) -> LerwSample:
    """Marked vertex followed by the loop erasure of a conditioned walk.

    Uses a fused walk-and-erase kernel that consumes the random stream
    exactly like ``loop_erase(sample_crw(g, seed))``.
    """
    indptr, indices, f, tgt = _walk_args(g, f)
    start = g.start_vertex if start is None else int(start)
    marked = g.marked_vertex if marked is None else int(marked)
    if not f[start] > 0:
        raise ZeroAccess("the start vertex cannot reach the target")
    le, done = _lerw(indptr, indices, f, tgt, start, derive_seed(seed), max_steps)
    if not done:
        raise RuntimeError("walk exceeded max_steps")
    return LerwSample(np.r_[marked, le].astype(np.int64), int(seed))


# --- capacity and driving --------------------------------------------------

def capacity_parameterize(g: LatticeDomain, sample: LerwSample, checkpoints=None,
                          engine: Optional[SlitEngine] = None, method: str = "schur") -> LerwSample:
    """Capacity times ``T(c) = M(D) - M(D minus path[:c + 1])``.

    ``method="schur"`` uses the factorization in ``engine``;
    ``method="direct"`` re-solves every slit domain from scratch.

    Raises
    ------
    Disconnected
        If a checkpoint includes the final vertex in ``F``.
    """
    n = sample.path.size
    cps = np.arange(n - 1) if checkpoints is None else np.asarray(checkpoints, np.int64)
    if np.any(np.diff(cps) <= 0):
        raise ValueError("checkpoints must be strictly increasing")
    if cps.size and cps[-1] >= n - 1:
        raise Disconnected("the full path joins the two boundary components")
    if method == "schur":
        engine = engine if engine is not None else SlitEngine(g)
        T = engine.path(sample.path).capacity_times(cps)
    elif method == "direct":
        M_full = estimate_modulus(g, g.E_init, g.F)
        T = np.array([M_full - estimate_modulus(g, np.union1d(g.E_init, sample.path[:c + 1]), g.F)
                      for c in cps])
    else:
        raise ValueError("method must be 'schur' or 'direct'")
    return replace(sample, checkpoints=cps, capacity_times=T, driving=None)


def default_checkpoints(T_all: np.ndarray, spacing: float) -> np.ndarray:
    """First path index at or beyond each multiple of ``spacing`` in capacity time."""
    T_all = np.asarray(T_all)
    levels = np.arange(spacing, T_all[-1], spacing)
    idx = np.searchsorted(T_all, levels, side="left")
    return np.unique(np.r_[0, idx[idx < T_all.size]])


def rotation_correction(M: float, T: np.ndarray, xi_hat: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Rotation ``theta(T)`` between anchor-normalized and Loewner-normalized maps.

    The image of a fixed inner-boundary point rotates with speed
    ``Re S~_{M-s}(i (M-s) - xi_hat_s)``; the result is its trapezoid integral.
    """
    r = M - np.asarray(T, float)
    speed = covering_values(r, 1j * r - np.asarray(xi_hat, float), tol=tol)[0][0].real
    out = np.zeros(len(T))
    out[1:] = np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(T))
    return out


def extract_driving(g: LatticeDomain, sample: LerwSample, checkpoints=None,
                    engine: Optional[SlitEngine] = None, spacing: float = 0.01,
                    max_jump: float = 0.5 * np.pi, rotate: bool = True) -> LerwSample:
    """Driving angle of the curve at capacity checkpoints.

    At each checkpoint the slit domain is uniformized and the tip angle is
    read from the conjugate (cells touching the tip, anchor on the positive
    axis at angle 0).  Angles are unwrapped across checkpoints; where a jump
    exceeds ``max_jump`` an intermediate path index is inserted when one
    exists.  With ``rotate=True`` the anchor's own rotation under the
    Loewner flow is added back so ``xi`` is the driving function of the
    Loewner-normalized maps.

    Default checkpoints are spaced by ``spacing * M(D)`` in capacity time.

    Raises
    ------
    TipIsolated
        If a tip has no surviving cell to read from.
    """
    engine = engine if engine is not None else SlitEngine(g)
    sp_ = engine.path(sample.path)
    n = sample.path.size
    if checkpoints is None:
        T_all = sp_.capacity_times(np.arange(n - 1))
        cps = default_checkpoints(T_all, spacing * engine.M_full)
    else:
        cps = np.asarray(checkpoints, np.int64)
    angles = {0: 0.0}
    skipped = []

    def angle(c):
        if c not in angles:
            angles[c] = sp_.tip_angle(int(c)) if c > 0 else 0.0
        return angles[c]

    cps = [int(c) for c in cps]
    readable = []
    for c in cps:
        try:
            angle(c)
            readable.append(c)
        except TipIsolated:
            skipped.append(c)
    if skipped and len(readable) < 2:
        raise TipIsolated(f"{len(skipped)} checkpoints unreadable")
    cps = readable
    k = 1
    while k < len(cps):
        a, b = cps[k - 1], cps[k]
        d = np.angle(np.exp(1j * (angle(b) - angle(a))))
        if abs(d) > max_jump and b - a > 1:
            mid = (a + b) // 2
            try:
                angle(mid)
                cps.insert(k, mid)
                continue
            except TipIsolated:
                skipped.append(mid)
        k += 1
    cps = np.asarray(cps, np.int64)
    xi_hat = np.unwrap(np.array([angle(c) for c in cps]))
    xi_hat -= xi_hat[0]
    T = sp_.capacity_times(cps)
    xi = xi_hat + (rotation_correction(engine.M_full, T, xi_hat) if rotate else 0.0)
    return replace(sample, checkpoints=cps, capacity_times=T, driving=xi,
                   meta={**sample.meta, "xi_hat": xi_hat.tolist(), "skipped": skipped})


def mirror_map(g: LatticeDomain) -> np.ndarray:
    """Vertex permutation induced by ``z -> conj(z)`` (``-1`` where no image exists)."""
    key = {(round(x / g.delta * 1e6), round(y / g.delta * 1e6)): v for v, (x, y) in enumerate(g.points)}
    out = -np.ones(g.n, np.int64)
    for v, (x, y) in enumerate(g.points):
        out[v] = key.get((round(x / g.delta * 1e6), round(-y / g.delta * 1e6)), -1)
    return out


# --- exact laws on tiny graphs ----------------------------------------------

def _bareiss_det(mat) -> int:
    """Exact integer determinant by fraction-free elimination."""
    a = [list(map(int, row)) for row in mat]
    n = len(a)
    if n == 0:
        return 1
    sign, prev = 1, 1
    for k in range(n - 1):
        if a[k][k] == 0:
            for r in range(k + 1, n):
                if a[r][k] != 0:
                    a[k], a[r] = a[r], a[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[n - 1][n - 1]


def _dirichlet_matrix(g: LatticeDomain, verts):
    verts = sorted(verts)
    pos = {v: i for i, v in enumerate(verts)}
    m = [[0] * len(verts) for _ in verts]
    for v in verts:
        m[pos[v]][pos[v]] = int(g.degree[v])
        for w in g.neighbors(v):
            if int(w) in pos:
                m[pos[v]][pos[int(w)]] -= 1
    return m


def lerw_path_probability(g: LatticeDomain, path: Sequence[int]) -> Fraction:
    """Probability that the walk stopped on the boundary has loop erasure ``path``.

    ``path`` ends on the boundary and its other vertices are interior, except
    that ``path[0]`` may be a boundary vertex, in which case the walk starts
    at ``path[1]``.  With ``N`` the interior vertices and ``K_U`` the
    Dirichlet Laplacian on ``U`` the probability is
    ``det K_{N minus path} / det K_N``: the Green's function factors
    ``K_U^{-1}(v, v) deg(v)`` cancel the transition probabilities ``1 / deg(v)``.
    """
    path = [int(v) for v in path]
    N = set(np.nonzero(g.labels == INTERIOR)[0].tolist())
    num = _bareiss_det(_dirichlet_matrix(g, N - set(path)))
    den = _bareiss_det(_dirichlet_matrix(g, N))
    return Fraction(num, den)


def _exact_f(g: LatticeDomain, E: frozenset, cache: dict):
    """Rational ``P(hit F before E)`` on all vertices, memoized on ``E``."""
    if E in cache:
        return cache[E]
    F = set(np.nonzero(g.labels == B2)[0].tolist())
    free = [v for v in range(g.n) if v not in E and v not in F]
    pos = {v: i for i, v in enumerate(free)}
    n = len(free)
    a = [[Fraction(0)] * (n + 1) for _ in range(n)]
    for v in free:
        i = pos[v]
        a[i][i] = Fraction(int(g.degree[v]))
        for w in g.neighbors(v):
            w = int(w)
            if w in pos:
                a[i][pos[w]] -= 1
            elif w in F:
                a[i][n] += 1
    for k in range(n):
        piv = next(r for r in range(k, n) if a[r][k] != 0)
        a[k], a[piv] = a[piv], a[k]
        for r in range(n):
            if r != k and a[r][k] != 0:
                fac = a[r][k] / a[k][k]
                a[r] = [x - fac * y for x, y in zip(a[r], a[k])]
    val = {v: Fraction(0) for v in E}
    val.update({v: Fraction(1) for v in F})
    for v in free:
        i = pos[v]
        val[v] = a[i][n] / a[i][i]
    cache[E] = val
    return val


def exact_lerw_law(g: LatticeDomain, starts: Sequence[int]) -> dict:
    """Exact law of the LERW from a uniformly chosen boundary vertex in ``starts``.

    Paths are grown with the conditional next-step law ``f_k(u) / sum f_k``
    where ``f_k`` is the rational probability of hitting ``F`` before
    ``E_init`` plus the current path.  Returns ``{path tuple: Fraction}``.
    """
    E0 = frozenset(np.nonzero(g.labels == B1)[0].tolist())
    F = set(np.nonzero(g.labels == B2)[0].tolist())
    cache: dict = {}
    law: dict = {}
    weight0 = Fraction(1, len(starts))
    stack = [((int(s),), E0 | {int(s)}, weight0) for s in starts]
    while stack:
        path, E, w = stack.pop()
        tip = path[-1]
        if tip in F:
            law[path] = law.get(path, Fraction(0)) + w
            continue
        f = _exact_f(g, frozenset(E), cache)
        nbrs = [int(u) for u in g.neighbors(tip) if f[int(u)] > 0]
        tot = sum(f[u] for u in nbrs)
        if tot == 0:
            continue
        for u in nbrs:
            stack.append((path + (u,), E | {u}, w * f[u] / tot))
    return law
