import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from annulus_sle.errors import (
    DisconnectedObservationPoint,
    EmptyBoundary,
    MissingValue,
    TipAtTarget,
)
from annulus_sle.grid import B1, B2, INTERIOR, DomainSpec, build_lattice, prune_reachable
from annulus_sle.harmonic import (
    HarmonicField,
    SlitEngine,
    check_martingale,
    estimate_modulus,
    hitting_distribution,
    laplacian,
    martingale_terms,
    solve_dirichlet,
    solve_f,
    solve_g,
    uniformize_annulus,
)
from annulus_sle.lerw import access_probability, sample_lerw
from annulus_sle.xcli import discrete_identities, radial_slit_path, random_identity_instances


def annulus(p, delta):
    return prune_reachable(build_lattice(DomainSpec.annulus(p), delta))


@pytest.fixture(scope="module")
def small():
    return annulus(1.0, 0.1)


@pytest.fixture(scope="module")
def medium():
    return annulus(1.0, 0.05)


def dense_dirichlet(g, fixed, values):
    # independent dense route: solve the full linear system with numpy
    n = g.n
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    adj = g.adjacency.toarray()
    for v in range(n):
        if v in fixed:
            A[v, v] = 1.0
            rhs[v] = fixed[v]
        else:
            A[v] = adj[v]
            A[v, v] = -adj[v].sum()
    return np.linalg.solve(A, rhs)


class TestDirichlet:
    def test_matches_dense_solver(self, small):
        fixed = {int(v): 1.0 for v in small.F} | {int(v): 0.0 for v in small.E_init}
        ref = dense_dirichlet(small, fixed, None)
        f = solve_f(small, small.F, small.E_init)
        assert np.max(np.abs(f.values - ref)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_maximum_principle(self, small, seed):
        rng = np.random.default_rng(seed)
        bd = np.nonzero(small.labels != INTERIOR)[0]
        vals = rng.uniform(-1, 1, bd.size)
        u, info = solve_dirichlet(small, bd, vals)
        inner = small.labels == INTERIOR
        assert np.all(u[inner] <= vals.max() + 1e-12) and np.all(u[inner] >= vals.min() - 1e-12)
        assert info["residual"] < 1e-12

    def test_iterative_route_agrees(self, medium):
        bd = np.nonzero(medium.labels != INTERIOR)[0]
        vals = np.cos(np.angle(medium.complex_points[bd]))
        a, _ = solve_dirichlet(medium, bd, vals)
        b, info = solve_dirichlet(medium, bd, vals, direct_limit=0)
        assert info["method"] == "cg-jacobi"
        assert np.max(np.abs(a - b)) < 1e-9

    def test_empty_boundary(self, small):
        with pytest.raises(EmptyBoundary):
            solve_f(small, [], small.E_init)

    def test_missing_value(self, small):
        vals = np.zeros(small.n)
        vals[small.start_vertex] = np.nan
        fld = HarmonicField(small, vals, small.F, small.E_init, None, "f", {})
        with pytest.raises(MissingValue):
            laplacian(fld, small.start_vertex)


class TestIdentities:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_instances(self, seed):
        for g, prefix in random_identity_instances(4, seed):
            res = discrete_identities(g, prefix)
            assert max(res.values()) < 1e-10, res

    def test_g_boundary_values(self, small):
        x = small.start_vertex
        B = small.E_init
        gg = solve_g(small, small.F, B, x)
        assert np.allclose(gg.values[small.F], 1.0) and np.allclose(gg.values[B], 0.0)
        assert np.all(gg.values >= -1e-14)


class TestModulus:
    def test_converges_toward_p(self):
        ms = [estimate_modulus(g, g.E_init, g.F) for g in (annulus(1.0, d) for d in (0.04, 0.02, 0.01))]
        assert ms[0] > ms[1] > ms[2] > 1.0
        assert abs(ms[2] - 1.0) < 0.03

    def test_symmetric_in_sets(self, medium):
        a = estimate_modulus(medium, medium.E_init, medium.F)
        f = solve_f(medium, medium.E_init, medium.F)
        b = 2 * np.pi / float(np.sum(f.laplacian()[medium.F]))
        assert a == pytest.approx(b, rel=1e-12)


class TestHitting:
    def test_matches_absorbing_chain(self, small):
        # fundamental-matrix route on the transition matrix of the walk
        A, B = small.F, small.E_init
        x = small.start_vertex
        n = small.n
        P = small.adjacency.toarray() / small.degree[:, None]
        absorb = np.zeros(n, bool)
        absorb[A] = absorb[B] = True
        T = np.nonzero(~absorb)[0]
        Q = P[np.ix_(T, T)]
        R = P[np.ix_(T, A)]
        N = np.linalg.solve(np.eye(T.size) - Q, R)
        row = N[np.searchsorted(T, x)]
        ref = row / row.sum()
        assert np.max(np.abs(hitting_distribution(small, x, A, B) - ref)) < 1e-12

    def test_rotation_symmetry(self, medium):
        law = hitting_distribution(medium, medium.start_vertex, medium.F, medium.E_init)
        z = medium.complex_points[medium.F]
        key = {(round(w.real, 9), round(w.imag, 9)): i for i, w in enumerate(z)}
        mirror = np.array([key[(round(w.real, 9), round(-w.imag, 9))] for w in z])
        assert np.allclose(law, law[mirror], atol=1e-12)


class TestUniformization:
    def test_conjugate_is_argument(self):
        g = annulus(1.0, 0.02)
        uni = uniformize_annulus(g, g.E_init, g.F)
        assert uni.closure_error < 1e-10
        z = g.complex_points
        r = np.abs(z)
        ok = np.isfinite(uni.V) & (g.labels == INTERIOR)
        diff = np.abs(np.angle(np.exp(1j * (uni.V - np.angle(z)))))
        # boundary cells are lopsided; away from both circles the match is tight
        bulk = ok & (r > np.exp(-1.0) + 0.1) & (r < 0.9)
        assert np.max(diff[ok]) < 0.03 and np.max(diff[bulk]) < 2e-3
        # image radius exp(-M U) against |z|
        assert np.max(np.abs(np.abs(uni.image()[ok]) - np.abs(z[ok]))) < 0.03


class TestSlitEngine:
    def test_schur_matches_direct(self, medium):
        eng = SlitEngine(medium)
        path = sample_lerw(medium, 3, access_probability(medium)).path
        sp = eng.path(path)
        for c in (0, 3, min(10, path.size - 2)):
            B = np.union1d(medium.E_init, path[:c + 1])
            f = solve_f(medium, medium.F, B)
            assert np.max(np.abs(sp.potential(c) - f.values)) < 1e-12
            assert sp.moduli([c])[0] == pytest.approx(estimate_modulus(medium, B, medium.F), rel=1e-12)

    def test_radial_slit_tip_angle_zero(self):
        g = annulus(1.0, 0.02)
        eng = SlitEngine(g)
        path = radial_slit_path(g, 0.8)
        assert abs(eng.path(path).tip_angle(len(path) - 1)) < 1e-9

    def test_capacity_monotone(self, medium):
        eng = SlitEngine(medium)
        path = sample_lerw(medium, 8, access_probability(medium)).path
        T = eng.path(path).capacity_times(range(path.size - 1))
        assert T[0] == 0.0 and np.all(np.diff(T) >= -1e-12)


class TestMartingale:
    def test_residual_along_path(self, medium):
        path = sample_lerw(medium, 5, access_probability(medium)).path
        v0 = int(np.argmin(np.abs(medium.complex_points + 0.5)))
        for k in range(1, 6):
            for obs in ("g", "q"):
                assert check_martingale(medium, path[:k + 1], v0, obs) < 1e-10

    def test_probabilities_match_next_step_law(self, medium):
        path = sample_lerw(medium, 6, access_probability(medium)).path
        v0 = int(np.argmin(np.abs(medium.complex_points + 0.5)))
        _, _, info = martingale_terms(medium, path[:3], v0)
        assert info["prob"].sum() == pytest.approx(1.0)
        assert all(medium.labels[u] != B1 for u in info["steps"])

    def test_tip_at_target(self, medium):
        path = sample_lerw(medium, 2, access_probability(medium)).path
        with pytest.raises(TipAtTarget):
            martingale_terms(medium, path[:-1], medium.start_vertex)

    def test_disconnected_observation_point(self, medium):
        path = sample_lerw(medium, 2, access_probability(medium)).path
        with pytest.raises(DisconnectedObservationPoint):
            martingale_terms(medium, path[:4], int(path[2]))
