import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from annulus_sle.errors import Disconnected, ZeroAccess
from annulus_sle.grid import B1, B2, DomainSpec, build_cylinder, build_lattice, prune_reachable
from annulus_sle.harmonic import SlitEngine
from annulus_sle.lerw import (
    LerwSample,
    access_probability,
    capacity_parameterize,
    default_checkpoints,
    derive_seed,
    exact_lerw_law,
    extract_driving,
    lerw_path_probability,
    loop_erase,
    mirror_map,
    rotation_correction,
    sample_crw,
    sample_lerw,
)
from annulus_sle.xcli import exact_reversibility, flip_cylinder


def brute_loop_erase(path):
    # last-visit construction: from the current vertex jump past its final
    # occurrence; independent of the chronological stack algorithm
    path = list(path)
    last = {v: i for i, v in enumerate(path)}
    out = [path[0]]
    i = last[path[0]]
    while i < len(path) - 1:
        v = path[i + 1]
        out.append(v)
        i = last[v]
    return out


def torus_walk(n_steps, side, rng):
    moves = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    xy = np.cumsum(moves[rng.integers(0, 4, n_steps)], axis=0) % side
    xy = np.vstack([[0, 0], xy])
    return xy[:, 0] * side + xy[:, 1]


@pytest.fixture(scope="module")
def a1():
    return prune_reachable(build_lattice(DomainSpec.annulus(1.0), 0.05))


@pytest.fixture(scope="module")
def f_a1(a1):
    return access_probability(a1)


class TestLoopErase:
    def test_docstring_example(self):
        assert loop_erase([0, 1, 0, 2]).tolist() == [0, 2]

    @pytest.mark.parametrize("seed", range(5))
    def test_long_walks_match_brute_force(self, seed):
        w = torus_walk(10_000, 12, np.random.default_rng(seed))
        assert loop_erase(w).tolist() == brute_loop_erase(w)

    @settings(max_examples=200, deadline=None)
    @given(path=st.lists(st.integers(0, 8), min_size=1, max_size=60))
    def test_arbitrary_sequences(self, path):
        le = loop_erase(path).tolist()
        assert le == brute_loop_erase(path)
        assert len(set(le)) == len(le)
        assert le[0] == path[0] and le[-1] == path[-1]

    def test_empty(self):
        with pytest.raises(ValueError):
            loop_erase([])


class TestSamplers:
    def test_seed_derivation_is_stable(self):
        assert derive_seed(7) == derive_seed(7) and derive_seed(7) != derive_seed(8)
        assert 0 <= derive_seed(2 ** 63) < 2 ** 32

    @pytest.mark.parametrize("seed", [0, 1, 17, 123])
    def test_fused_matches_two_step(self, a1, f_a1, seed):
        crw = sample_crw(a1, seed, f_a1)
        le = sample_lerw(a1, seed, f_a1).path
        assert le[0] == a1.marked_vertex
        assert le[1:].tolist() == loop_erase(crw).tolist()

    def test_crw_avoids_initial_set(self, a1, f_a1):
        for seed in range(20):
            w = sample_crw(a1, seed, f_a1)
            assert np.all(a1.labels[w[:-1]] != B1) and a1.labels[w[-1]] == B2
            assert np.all(a1.labels[w[:-1]] != B2)

    def test_path_is_simple_nearest_neighbour(self, a1, f_a1):
        adj = a1.adjacency
        for seed in range(20):
            p = sample_lerw(a1, seed, f_a1).path
            assert len(set(p.tolist())) == p.size
            assert all(adj[a, b] for a, b in zip(p[:-1], p[1:]))

    def test_zero_access(self, a1):
        f = np.zeros(a1.n)
        with pytest.raises(ZeroAccess):
            sample_lerw(a1, 0, f)

    def test_max_steps(self, a1, f_a1):
        with pytest.raises(RuntimeError):
            sample_crw(a1, 0, f_a1, max_steps=1)


class TestExactLaw:
    @pytest.mark.parametrize("n,p", [(4, 2.0), (5, 2.2)])
    def test_reversibility_and_determinants(self, n, p):
        ex = exact_reversibility(n, p)
        assert ex["exact_equal"] and ex["max_det_gap"] == 0.0 and ex["total_mass"] == 1.0

    def test_single_start_mass_and_determinant(self):
        g = build_cylinder(5, 2.2)
        law = exact_lerw_law(g, [g.marked_vertex])
        assert sum(law.values()) == 1
        # determinants give the unconditioned law; dividing by f(start) conditions it
        f = access_probability(g)
        for path, prob in law.items():
            ratio = lerw_path_probability(g, path) / prob
            assert float(ratio) == pytest.approx(f[g.start_vertex], rel=1e-12)

    def test_sampler_matches_exact_law(self):
        g = build_cylinder(5, 2.2)
        law = exact_lerw_law(g, [g.marked_vertex])
        keys = sorted(law)
        f = access_probability(g)
        counts = dict.fromkeys(keys, 0)
        N = 4000
        for s in range(N):
            counts[tuple(sample_lerw(g, s, f).path.tolist())] += 1
        obs = np.array([counts[k] for k in keys], float)
        exp = np.array([float(law[k]) for k in keys]) * N
        assert stats.chisquare(obs, exp).pvalue > 1e-3

    def test_flip_swaps_boundaries(self):
        g = build_cylinder(6, 2.2)
        gb = flip_cylinder(g)
        assert np.array_equal(gb.labels == B1, g.labels == B2)
        assert isinstance(lerw_path_probability(g, [0, 6, 12, 18]), Fraction)


class TestCapacity:
    def test_schur_matches_direct(self, a1, f_a1):
        smp = sample_lerw(a1, 4, f_a1)
        cps = np.unique(np.linspace(0, smp.path.size - 2, 6).astype(int))
        eng = SlitEngine(a1)
        a = capacity_parameterize(a1, smp, cps, engine=eng).capacity_times
        b = capacity_parameterize(a1, smp, cps, method="direct").capacity_times
        assert np.max(np.abs(a - b)) < 1e-10
        assert a[0] >= 0 and np.all(np.diff(a) > 0)

    def test_full_path_rejected(self, a1, f_a1):
        smp = sample_lerw(a1, 4, f_a1)
        with pytest.raises(Disconnected):
            capacity_parameterize(a1, smp, [smp.path.size - 1])

    def test_bad_inputs(self, a1, f_a1):
        smp = sample_lerw(a1, 4, f_a1)
        with pytest.raises(ValueError):
            capacity_parameterize(a1, smp, [3, 2])
        with pytest.raises(ValueError):
            capacity_parameterize(a1, smp, [1], method="bogus")

    @settings(max_examples=40, deadline=None)
    @given(T=st.lists(st.floats(0, 1), min_size=2, max_size=50), spacing=st.floats(0.01, 0.3))
    def test_default_checkpoints(self, T, spacing):
        T = np.sort(np.asarray(T))
        cps = default_checkpoints(T, spacing)
        assert cps[0] == 0 and np.all(np.diff(cps) > 0) and cps[-1] < T.size

    def test_rotation_correction_starts_at_zero(self):
        T = np.linspace(0, 0.3, 7)
        rot = rotation_correction(1.0, T, np.zeros_like(T))
        assert rot[0] == 0.0 and np.all(np.isfinite(rot))


class TestDriving:
    def test_mirror_map_involution(self, a1):
        m = mirror_map(a1)
        assert np.all(m >= 0) and np.array_equal(m[m], np.arange(a1.n))
        assert np.allclose(a1.complex_points[m], np.conj(a1.complex_points))

    def test_reflected_path_negates_driving(self, a1, f_a1):
        m = mirror_map(a1)
        eng = SlitEngine(a1)
        smp = sample_lerw(a1, 9, f_a1)
        a = extract_driving(a1, smp, engine=eng, spacing=0.05)
        b = extract_driving(a1, LerwSample(m[smp.path], 9), checkpoints=a.checkpoints, engine=eng)
        assert a.driving[0] == 0.0
        assert np.allclose(a.capacity_times, b.capacity_times, atol=1e-10)
        assert np.allclose(a.driving, -b.driving, atol=1e-8)

    def test_driving_at_interpolates(self, a1, f_a1):
        smp = extract_driving(a1, sample_lerw(a1, 2, f_a1), spacing=0.05)
        assert smp.driving_at(smp.capacity_times[1]) == pytest.approx(smp.driving[1])
        with pytest.raises(ValueError):
            sample_lerw(a1, 2, f_a1).driving_at(0.1)


class TestOutput:
    def test_csv_and_sidecar(self, tmp_path, a1, f_a1):
        smp = capacity_parameterize(a1, sample_lerw(a1, 3, f_a1))
        smp.to_csv(a1, tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "index,x,y" and len(lines) == smp.path.size + 1
        meta = json.loads(smp.sidecar_json())
        assert meta["seed"] == 3 and len(meta["capacity_times"]) == smp.path.size - 1
