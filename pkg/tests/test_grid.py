import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from annulus_sle.errors import DegenerateSpec, MeshTooCoarse
from annulus_sle.grid import (
    B1,
    B2,
    INTERIOR,
    Circle,
    DomainSpec,
    LatticeDomain,
    Polygon,
    build_cylinder,
    build_lattice,
    prune_reachable,
)


def brute_interior_count(p, delta):
    m = int(np.ceil(1 / delta)) + 1
    i, j = np.meshgrid(np.arange(-m, m + 1), np.arange(-m, m + 1))
    r = np.hypot(i * delta, j * delta)
    return int(np.sum((r < 1) & (r > np.exp(-p))))


@pytest.fixture(scope="module")
def a1():
    return build_lattice(DomainSpec.annulus(1.0), 0.05)


class TestAnnulusLattice:
    @pytest.mark.parametrize("p,delta", [(1.0, 0.1), (1.0, 0.05), (1.5, 0.04), (0.7, 0.02)])
    def test_interior_count_matches_brute_force(self, p, delta):
        g = build_lattice(DomainSpec.annulus(p), delta)
        assert int(np.sum(g.labels == INTERIOR)) == brute_interior_count(p, delta)

    def test_boundary_on_circles(self, a1):
        r = np.abs(a1.complex_points)
        assert np.allclose(r[a1.labels == B1], 1.0, atol=1e-12)
        assert np.allclose(r[a1.labels == B2], np.exp(-1.0), atol=1e-12)

    def test_edges_are_lattice_segments(self, a1):
        d = a1.complex_points[a1.edges[:, 1]] - a1.complex_points[a1.edges[:, 0]]
        assert np.all(np.abs(d) <= a1.delta + 1e-12)
        assert np.all(np.minimum(np.abs(d.real), np.abs(d.imag)) < 1e-12)

    def test_interior_degree_four(self, a1):
        assert np.all(a1.degree[a1.labels == INTERIOR] == 4)

    def test_marked_and_start(self, a1):
        assert a1.complex_points[a1.marked_vertex] == pytest.approx(1.0)
        assert a1.complex_points[a1.start_vertex] == pytest.approx(1.0 - a1.delta)
        assert a1.labels[a1.marked_vertex] == B1
        assert a1.start_vertex in a1.neighbors(a1.marked_vertex)

    def test_no_boundary_boundary_edges(self, a1):
        lab = a1.labels[a1.edges]
        assert np.all((lab[:, 0] == INTERIOR) | (lab[:, 1] == INTERIOR))

    def test_json_roundtrip(self, a1):
        b = LatticeDomain.from_json(a1.to_json())
        assert np.array_equal(b.edges, a1.edges) and np.array_equal(b.labels, a1.labels)
        assert np.allclose(b.points, a1.points) and b.start_vertex == a1.start_vertex

    def test_prune_keeps_connected_annulus(self, a1):
        g = prune_reachable(a1)
        assert g.n == a1.n

    def test_lattice_index_inverse(self, a1):
        idx = a1.lattice_index
        for (i, j), v in list(idx.items())[:200]:
            assert tuple(a1.lattice_ij[v]) == (i, j)

    @settings(max_examples=15, deadline=None)
    @given(p=st.floats(0.5, 2.5), k=st.integers(8, 30))
    def test_symmetry_under_conjugation(self, p, k):
        g = build_lattice(DomainSpec.annulus(p), 1.0 / k)
        z = g.complex_points
        key = {(round(w.real, 9), round(w.imag, 9)) for w in z}
        assert all((round(w.real, 9), round(-w.imag, 9)) in key for w in z)


class TestOtherDomains:
    def test_square_with_square_hole(self):
        outer = Polygon([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j])
        inner = Polygon([0.3 + 0.3j, -0.3 + 0.3j, -0.3 - 0.3j, 0.3 - 0.3j])
        g = build_lattice(DomainSpec(outer, inner, 1.0, -1.0, "outer"), 0.1)
        assert np.sum(g.labels == INTERIOR) == 19 * 19 - 7 * 7
        assert np.all(g.degree[g.labels == INTERIOR] == 4)

    def test_inner_not_inside(self):
        with pytest.raises(DegenerateSpec):
            build_lattice(DomainSpec(Circle(0, 1.0), Circle(0.9, 0.5), 1.0, -1.0), 0.05)

    def test_marked_off_lattice(self):
        with pytest.raises(MeshTooCoarse):
            build_lattice(DomainSpec.annulus(1.0), 0.3)

    def test_bad_circle(self):
        with pytest.raises(DegenerateSpec):
            Circle(0, -1.0)


class TestCylinder:
    @pytest.mark.parametrize("n,p", [(6, 2.2), (16, 1.0), (64, 1.0)])
    def test_structure(self, n, p):
        g = build_cylinder(n, p)
        rows = g.meta["rows"]
        assert g.n == n * rows
        assert np.sum(g.labels == B1) == n and np.sum(g.labels == B2) == n
        assert np.all(g.degree[g.labels == INTERIOR] == 4)
        assert g.labels[g.marked_vertex] == B1 and g.start_vertex == n

    def test_too_coarse(self):
        with pytest.raises(MeshTooCoarse):
            build_cylinder(3, 1.0)
