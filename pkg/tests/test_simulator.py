import math

import numpy as np
import pytest

from flowsurrogate import simulator as sim
from flowsurrogate.errors import ConfigError, PhysicsError, SolverError
from flowsurrogate.simulator import FluidProps, PermField, WellSpec

from oracles import harmonic

FLUIDS = FluidProps()


def homogeneous(n=8, k=100.0, **kw):
    return PermField(np.full((n, n), k), **kw)


class TestPermeability:
    def test_zero_log_std_gives_constant_field(self):
        f = sim.generate_permeability(6, 5, 3.0, 0.0, seed=1)
        np.testing.assert_array_equal(f.k, math.exp(sim.DEFAULT_LOG_MEAN))

    def test_same_seed_same_field(self):
        a = sim.generate_permeability(10, 10, 4.0, 1.0, seed=3)
        b = sim.generate_permeability(10, 10, 4.0, 1.0, seed=3)
        c = sim.generate_permeability(10, 10, 4.0, 1.0, seed=4)
        np.testing.assert_array_equal(a.k, b.k)
        assert not np.array_equal(a.k, c.k)

    def test_lag_zero_variance_over_seeds(self):
        sigma = 0.8
        z = np.stack([np.log(sim.generate_permeability(6, 6, 2.0, sigma, seed=s).k) - sim.DEFAULT_LOG_MEAN
                      for s in range(500)])
        assert z.var(axis=0).mean() == pytest.approx(sigma**2, rel=0.15)

    def test_exponential_covariance_at_unit_lag(self):
        ell = 3.0
        z = np.stack([np.log(sim.generate_permeability(6, 6, ell, 1.0, seed=s).k) - sim.DEFAULT_LOG_MEAN
                      for s in range(800)])
        cov = np.mean(z[:, :, :-1] * z[:, :, 1:])
        assert cov == pytest.approx(math.exp(-1.0 / ell), rel=0.15)

    @pytest.mark.parametrize("kwargs", [dict(correlation_length=0.0), dict(log_std=-1.0)])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ConfigError):
            sim.generate_permeability(4, 4, **{"correlation_length": 2.0, "log_std": 1.0, **kwargs})

    def test_too_large_for_dense_factorization(self):
        with pytest.raises(ConfigError):
            sim.generate_permeability(65, 64)

    def test_field_must_be_positive(self):
        with pytest.raises(ConfigError):
            PermField(np.array([[1.0, 0.0]]))


class TestPressure:
    def test_null_source_gives_gauge_pressure(self):
        p = sim.solve_pressure(homogeneous(), np.full((8, 8), 0.3), FLUIDS, WellSpec(pvi=0.0))
        np.testing.assert_array_equal(p, 0.0)

    def test_divergence_balances_source(self):
        perm = sim.generate_permeability(12, 12, 3.0, 1.0, seed=5)
        s = np.random.default_rng(0).uniform(0, 1, (12, 12))
        wells = WellSpec()
        p = sim.solve_pressure(perm, s, FLUIDS, wells)
        q = wells.source(perm, FLUIDS)
        div = sim.divergence(*sim.total_fluxes(perm, s, p, FLUIDS))
        assert np.abs(div - q).max() < 1e-8 * q.max()

    def test_doubling_permeability_halves_pressure_drop(self):
        perm = sim.generate_permeability(8, 8, 2.0, 1.0, seed=6)
        s = np.full((8, 8), 0.2)
        p1 = sim.solve_pressure(perm, s, FLUIDS, WellSpec())
        p2 = sim.solve_pressure(perm.scaled(2.0), s, FLUIDS, WellSpec())
        assert p2[0, 0] - p2[-1, -1] == pytest.approx(0.5 * (p1[0, 0] - p1[-1, -1]), rel=1e-9)

    def test_harmonic_transmissibility(self):
        k = np.array([[1.0, 3.0], [2.0, 8.0]])
        tx, ty = sim.transmissibilities(PermField(k))
        np.testing.assert_allclose(tx[:, 0], [harmonic(1, 3), harmonic(2, 8)])
        np.testing.assert_allclose(ty[0], [harmonic(1, 2), harmonic(3, 8)])

    def test_cg_matches_direct_solve(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(20, 20))
        a = m @ m.T + 20 * np.eye(20)
        b = rng.normal(size=20)
        from scipy import sparse

        x, _ = sim.conjugate_gradient(sparse.csr_matrix(a), b)
        np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-8)

    def test_cg_nonconvergence_is_solver_error(self):
        from scipy import sparse

        lap = sparse.diags([-1.0, 2.01, -1.0], [-1, 0, 1], shape=(50, 50)).tocsr()
        with pytest.raises(SolverError):
            sim.conjugate_gradient(lap, np.ones(50), max_iter=2)

    def test_zero_total_mobility_is_physics_error(self):
        # Corey total mobility is positive on [0, 1]; an undefined saturation is the only way in
        with pytest.raises(PhysicsError):
            sim.face_coefficients(homogeneous(2), np.full((2, 2), np.nan), FLUIDS)


class TestSaturationUpdate:
    def test_zero_injection_leaves_saturation(self):
        perm = homogeneous()
        s = np.random.default_rng(2).uniform(0, 1, (8, 8))
        wells = WellSpec(pvi=0.0)
        p = sim.solve_pressure(perm, s, FLUIDS, wells)
        s_new, _ = sim.update_saturation(perm, s, p, FLUIDS, wells, dt=0.5)
        np.testing.assert_array_equal(s_new, s)

    def test_two_cell_upwind_hand_calculation(self):
        # one face carrying unit total flux from cell 0 into cell 1, no wells
        s = np.array([[0.6, 0.2]])
        fx, fy = np.array([[1.0]]), np.zeros((0, 2))
        q = np.zeros((1, 2))
        dt, pv = 0.1, 1.0
        s_new, _, _ = sim.explicit_step(s, fx, fy, q, pv, FLUIDS, dt)
        fw0 = 0.36 / (0.36 + 0.16 / 2.0)
        np.testing.assert_allclose(s_new, [[0.6 - dt * fw0, 0.2 + dt * fw0]], rtol=1e-15)

    def test_cfl_forces_substeps_and_stays_bounded(self):
        perm = sim.generate_permeability(8, 8, 2.0, 1.5, seed=7)
        s = np.zeros((8, 8))
        wells = WellSpec(pvi=2.0)
        p = sim.solve_pressure(perm, s, FLUIDS, wells)
        s_new, info = sim.update_saturation(perm, s, p, FLUIDS, wells, dt=0.5)
        assert info["substeps"] > 1
        assert 0.0 <= s_new.min() and s_new.max() <= 1.0
        assert info["balance"] < 1e-10

    def test_persistent_cfl_violation_is_an_error(self):
        perm = homogeneous()
        wells = WellSpec(pvi=50.0)
        p = sim.solve_pressure(perm, np.zeros((8, 8)), FLUIDS, wells)
        with pytest.raises(PhysicsError):
            sim.update_saturation(perm, np.zeros((8, 8)), p, FLUIDS, wells, dt=1.0, max_substeps=3)


class TestRunSimulation:
    def test_default_output_dims(self):
        out = sim.run_simulation(sim.generate_permeability(40, 40, 4.0, 1.0, seed=0), pressure_updates=1)
        assert out.saturation.shape == out.pressure.shape == (10, 40, 40)

    def test_water_accounting(self):
        out = sim.run_simulation(sim.generate_permeability(16, 16, 4.0, 1.0, seed=8), steps=8)
        expected = out.initial_water + out.cum_injected - out.cum_produced
        np.testing.assert_allclose(out.water_in_place, expected, rtol=1e-10)
        assert out.mass_balance.max() <= 1e-10

    def test_saturation_monotone_and_flooded(self):
        out = sim.run_simulation(sim.generate_permeability(10, 10, 3.0, 0.5, seed=9),
                                 wells=WellSpec(pvi=4.0), steps=12, pressure_updates=2)
        assert np.all(np.diff(out.saturation, axis=0) >= -1e-12)
        # residual oil saturation is zero for these Corey curves, so S approaches one
        assert out.saturation[-1, 0, 0] > 0.9
        assert out.saturation[-1].min() > 0.5

    def test_homogeneous_diagonal_symmetry(self):
        out = sim.run_simulation(homogeneous(12), steps=6)
        assert np.abs(out.saturation - out.saturation.transpose(0, 2, 1)).max() <= 1e-10

    def test_grid_refinement_breakthrough(self):
        times = []
        for n, cell in ((16, 1.0), (32, 0.5)):
            out = sim.run_simulation(homogeneous(n, cell_size=cell), wells=WellSpec(pvi=1.0),
                                     steps=100, pressure_updates=1)
            times.append(out.times[np.argmax(out.saturation[:, -1, -1] > 0.1)])
        assert abs(times[0] - times[1]) < 0.1 * times[1]

    def test_permeability_scale_invariance(self):
        perm = sim.generate_permeability(10, 10, 3.0, 1.0, seed=10)
        a = sim.run_simulation(perm, steps=4)
        b = sim.run_simulation(perm.scaled(5.0), steps=4)
        np.testing.assert_allclose(b.saturation, a.saturation, rtol=0, atol=1e-10)
        np.testing.assert_allclose(b.pressure, a.pressure / 5.0, rtol=1e-8, atol=1e-12)

    def test_invalid_steps(self):
        with pytest.raises(ConfigError):
            sim.run_simulation(homogeneous(), steps=0)


class TestDataset:
    def test_seeds_distinct_and_reproducible(self):
        a, b = sim.sample_seeds(5, 20), sim.sample_seeds(5, 20)
        assert a == b and len(set(a)) == 20

    def test_generate_dataset_shapes_and_header(self):
        ds = sim.generate_dataset(3, grid=8, steps=4, seed=2)
        assert ds.perm.shape == (3, 8, 8)
        assert ds.saturation.shape == ds.pressure.shape == (3, 4, 8, 8)
        assert ds.header["seeds"] == sim.sample_seeds(2, 3)
        assert ds.header["channel_names"] == ["perm", "saturation", "pressure"]
