import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from annulus_sle.errors import HorizonExceedsModulus, SeedTooCentral
from annulus_sle.kernel import KernelContext, schwarz_S
from annulus_sle.loewner import (
    DrivingPath,
    IntegratorOptions,
    brownian_table,
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


@pytest.fixture(scope="module")
def bm_driver():
    return sample_driving("annulus", 2.0, 0.6, 1e-3, seed=11)


class TestDrivingGrid:
    @settings(max_examples=50, deadline=None)
    @given(horizon=st.floats(0.1, 12.0), dt0=st.floats(1e-3, 0.05), growth=st.floats(0.0, 0.1))
    def test_grid_shape(self, horizon, dt0, growth):
        g = geometric_grid(horizon, dt0, growth, dt_max=0.2)
        assert g[0] == 0.0 and g[-1] == pytest.approx(horizon)
        assert np.all(np.diff(g) > 0)

    @settings(max_examples=30, deadline=None)
    @given(t=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
    def test_table_matches_interp(self, t):
        grid = geometric_grid(1.0, 0.01, 0.05)
        tab = brownian_table(3.0, grid, 4, np.random.default_rng(0))
        t = np.asarray(t)
        for rep in range(4):
            expect = np.interp(t, grid, tab.xi[rep])
            assert np.allclose(tab.at(t, np.full(t.size, rep)), expect, atol=1e-13)

    def test_disc_driver_has_uniform_start(self):
        starts = [sample_driving("disc", 6.0, 1.0, 0.01, seed=s).initial_angle for s in range(200)]
        assert 0 <= min(starts) and max(starts) < 2 * np.pi
        assert abs(np.mean(starts) - np.pi) < 0.4

    def test_same_seed_same_path(self):
        a = sample_driving("annulus", 2.0, 0.5, 1e-2, seed=3)
        b = sample_driving("annulus", 2.0, 0.5, 1e-2, seed=3)
        assert np.array_equal(a.xi, b.xi)

    def test_brownian_variance(self):
        grid = geometric_grid(1.0, 0.05)
        tab = brownian_table(2.0, grid, 20000, np.random.default_rng(5))
        assert abs(tab.xi[:, -1].var() / 2.0 - 1.0) < 0.05

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            DrivingPath(2.0, np.array([0.1, 0.2]), np.zeros(2))


class TestRadial:
    def test_constant_driving_closed_form(self):
        # for chi = 1 each point obeys phi / (1 + phi)^2 = e^t z / (1 + z)^2
        drv = sample_driving("constant", 0.0, 1.0, 1e-2, seed=0)
        seeds = np.array([0.3 + 0.2j, -0.5 + 0.1j, 0.1j])
        st_ = evolve_radial(drv, seeds, checkpoints=[0.0, 0.5, 1.0])
        for s in st_:
            lhs = s.z / (1 + s.z) ** 2
            rhs = np.exp(s.t) * seeds / (1 + seeds) ** 2
            assert np.max(np.abs(lhs - rhs)) < 1e-8

    def test_origin_derivative(self, bm_driver):
        st_ = evolve_radial(bm_driver, [0j, 1e-3 + 0j], checkpoints=[0.3, 0.6])
        for s in st_:
            assert abs(s.z[0]) < 1e-14
            assert s.log_derivative[0].real == pytest.approx(s.t, abs=1e-9)


class TestAnnulus:
    def test_inner_circle_invariant(self, bm_driver):
        p = 1.2
        seeds = np.exp(-p + 1j * np.linspace(0, 6, 9))
        for s in evolve_annulus(p, bm_driver, seeds, checkpoints=[0.2, 0.4, 0.6]):
            assert np.max(np.abs(np.abs(s.z) - np.exp(s.t - p))) < 1e-8

    def test_unit_circle_invariant(self, bm_driver):
        seeds = np.exp(1j * np.array([1.0, 2.0, 3.0, 4.0]))
        st_ = evolve_annulus(2.0, bm_driver, seeds, checkpoints=[0.3])
        assert np.max(np.abs(np.abs(st_[0].z) - 1)) < 1e-8

    def test_drift_adjusted_fixed_point(self, bm_driver):
        p = 1.5
        for s in evolve_annulus(p, bm_driver, [np.exp(-p)], checkpoints=[0.1, 0.6], drift_adjusted=True):
            assert abs(s.z[0] - np.exp(s.t - p)) < 1e-9

    def test_matches_scipy(self, bm_driver):
        # the Loewner equation integrated by an independent scipy solver
        p, z0 = 2.0, -0.5 + 0.2j

        def rhs(t, y):
            z = y[0] + 1j * y[1]
            v = z * schwarz_S(KernelContext(p - t), z / bm_driver.chi(t))
            return [v.real, v.imag]

        ref = solve_ivp(rhs, (0, 0.5), [z0.real, z0.imag], method="DOP853", rtol=1e-11, atol=1e-12,
                        max_step=1e-3)
        ours = evolve_annulus(p, bm_driver, [z0], checkpoints=[0.5])[0].z[0]
        assert abs(ours - (ref.y[0, -1] + 1j * ref.y[1, -1])) < 1e-7

    def test_horizon_guard(self, bm_driver):
        with pytest.raises(HorizonExceedsModulus):
            evolve_annulus(0.5, bm_driver, [0.8], checkpoints=[0.55])

    def test_point_on_slit_is_swallowed(self):
        drv = sample_driving("constant", 0.0, 0.5, 1e-3, seed=0)
        tip = trace_annulus(1.5, drv, [0.3]).points[0]
        assert abs(tip.imag) < 1e-6 and 0 < tip.real < 1
        x = 0.5 * (tip.real + 1)
        st_ = evolve_annulus(1.5, drv, [x, -0.5], checkpoints=[0.3])[0]
        assert st_.swallowed[0] and not st_.swallowed[1]
        assert 0 < st_.swallow_time[0] < 0.3

    def test_trace_symmetry_under_reflection(self):
        drv = sample_driving("annulus", 2.0, 0.3, 1e-3, seed=4)
        mirror = DrivingPath(2.0, drv.times, -drv.xi, kind="custom")
        a = trace_annulus(2.0, drv, [0.1, 0.2]).points
        b = trace_annulus(2.0, mirror, [0.1, 0.2]).points
        assert np.max(np.abs(a - np.conj(b))) < 1e-8


class TestDisc:
    def test_truncation_bound(self):
        drv = sample_driving("disc", 6.0, 12.0, 1e-2, seed=2)
        z = np.array([0.5, -0.3 + 0.4j, 0.7j])
        a = evolve_disc(-10.0, drv, z, checkpoints=[-1.0])[0].reflected
        b = evolve_disc(-12.0, drv, z, checkpoints=[-1.0])[0].reflected
        # both truncations lie within 8 e^{r_start} of the limit map
        assert np.max(np.abs(a - b)) < 8 * (np.exp(-10.0) + np.exp(-12.0))

    def test_seed_guard(self):
        drv = sample_driving("disc", 6.0, 10.0, 1e-2, seed=2)
        with pytest.raises(SeedTooCentral):
            evolve_disc(-10.0, drv, [1e-6])

    def test_trace_inside_disc(self):
        drv = sample_driving("disc", 6.0, 10.0, 1e-2, seed=8)
        tr = trace_disc(-10.0, drv, [-3.0, -2.0])
        assert np.all(np.abs(tr.points) < 1)


class TestOutput:
    def test_csv_and_json(self, tmp_path, bm_driver):
        states = evolve_annulus(2.0, bm_driver, [-0.5, 0.4j], checkpoints=[0.0, 0.1])
        write_trajectory_csv(states, tmp_path / "traj.csv")
        rows = list(csv.reader(open(tmp_path / "traj.csv")))
        assert len(rows) == 1 + 4 and all(h for h in rows[0])
        payload = json.loads(states_to_json(states))
        assert len(payload) == 2
        write_trace_csv(trace_annulus(2.0, bm_driver, [0.1]), tmp_path / "tr.csv")
        assert len(list(csv.reader(open(tmp_path / "tr.csv")))) == 2
