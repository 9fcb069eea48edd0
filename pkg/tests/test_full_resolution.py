"""Toggle-switch reproductions at full resolution.

The slow cases run only with DELAYLD_SLOW_TESTS set (several minutes).
"""
import math
import unittest

import numpy as np

from config import settings
from services.delay_model import build_grid, constant_history
from services.escape_optimizer import EscapeProblem, escape_optimize
from services.montecarlo import SimulationConfig, estimate_moments, exit_statistics, simulate_linear
from services.rate_functional import optimal_energy, optimal_path, path_energy
from services.run_config import load_config, resolve
from services.steps_solver import (
    eigen_curve,
    solve_covariance_column,
    solve_covariance_diagonal,
    solve_F,
    solve_mean,
)
from tests.fixtures import demo_history, toggle_lna

STATIONARY_VARIANCES = (0.0567, 1.1409)
STATIONARY_EIGENVALUE = 0.874


def stationary_diagonal(N, T=21.0):
    lna = toggle_lna()
    grid = build_grid(1.0, T, N)
    return lna, solve_covariance_diagonal(lna, solve_F(lna, grid))


class TestCoarseVariances(unittest.TestCase):

    def test_variances_at_coarse_resolution(self):
        _, diag = stationary_diagonal(100)
        variances = np.diagonal(diag.at(20.0))
        for value, expected in zip(variances, STATIONARY_VARIANCES):
            self.assertAlmostEqual(value, expected, delta=0.05 * expected)


@unittest.skipUnless(settings.SLOW_TESTS, "set DELAYLD_SLOW_TESTS to run full-resolution reproductions")
class TestStationaryCovariance(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.lna, cls.diag = stationary_diagonal(500)

    def test_variances(self):
        variances = np.diagonal(self.diag.at(20.0))
        for value, expected in zip(variances, STATIONARY_VARIANCES):
            self.assertAlmostEqual(value, expected, delta=0.02 * expected)

    def test_smallest_precision_eigenvalue(self):
        curve = eigen_curve(self.diag)
        grid = self.diag.grid
        at_20 = curve.values[grid.index_of(20.0)]
        self.assertAlmostEqual(at_20, STATIONARY_EIGENVALUE, delta=0.02 * STATIONARY_EIGENVALUE)
        tail = curve.values[grid.index_of(20.0): grid.index_of(21.0) + 1]
        self.assertLess(np.max(tail) - np.min(tail), 1e-3)

    def test_stationary_escape_energy(self):
        expected = 0.5 * STATIONARY_EIGENVALUE * 0.09
        grid = self.diag.grid
        problem = EscapeProblem([0.0, 0.0], 0.3, 0.006, 20.0, grid)
        solution = escape_optimize(self.lna, constant_history(1.0, [0.0, 0.0]), problem)
        self.assertTrue(solution.at_horizon)
        self.assertAlmostEqual(solution.energy, expected, delta=0.03 * expected)


@unittest.skipUnless(settings.SLOW_TESTS, "set DELAYLD_SLOW_TESTS to run full-resolution reproductions")
class TestEscapeStudy(unittest.TestCase):

    def escape(self, name):
        config = load_config(name)
        run = resolve(config)
        disk = config.disk
        problem = EscapeProblem([0.0, 0.0], disk.R, disk.delta_r, config.grid.T_large, run.grid, disk.half)
        return run, escape_optimize(run.model, run.history, problem)

    def test_overall_escape(self):
        _, solution = self.escape("toggle_demo.toml")
        self.assertAlmostEqual(solution.T_opt, 1.482, delta=0.05)
        np.testing.assert_allclose(solution.q_hat_absolute, [0.0384, 1.3031], atol=0.01)
        self.assertAlmostEqual(solution.energy, 0.0348, delta=0.03 * 0.0348)

    def test_lower_half_escape(self):
        _, solution = self.escape("toggle_lower_half.toml")
        np.testing.assert_allclose(solution.q_hat, [0.0162, -0.2996], atol=0.01)
        self.assertAlmostEqual(solution.energy, 0.0394, delta=0.03 * 0.0394)
        self.assertTrue(solution.at_horizon)

    def test_explicit_and_discrete_energies_agree(self):
        lna = toggle_lna()
        grid = build_grid(1.0, 4.0, 500)
        history = demo_history(lna)
        mean = solve_mean(lna, history, grid)
        F = solve_F(lna, grid)
        diag = solve_covariance_diagonal(lna, F)
        angles = np.radians([95.0, 60.0, 120.0, 10.0, 170.0, 250.0, 300.0, 80.0, 100.0, 275.0])
        times = (1.0, 1.482, 2.0, 3.0, 4.0, 1.5, 2.5, 1.2, 3.5, 2.2)
        for T, angle in zip(times, angles):
            Q = 0.3 * np.array([math.cos(angle), math.sin(angle)])
            column = solve_covariance_column(lna, F, T)
            result = optimal_path(mean, column, diag.at(T), Q)
            explicit = optimal_energy(mean, diag.at(T), Q, T)
            self.assertAlmostEqual(result.energy, explicit, delta=0.01 * explicit)
            discrete = path_energy(lna, mean, result.path)
            self.assertAlmostEqual(discrete, result.energy, delta=0.01 * result.energy)


@unittest.skipUnless(settings.SLOW_TESTS, "set DELAYLD_SLOW_TESTS to run full-resolution reproductions")
class TestMonteCarloConcordance(unittest.TestCase):

    def test_centred_lna_variances(self):
        lna, diag = stationary_diagonal(500)
        config = SimulationConfig(dt=1.0 / 500, T_sim=20.0, n_paths=10000, seed=2024,
                                  epsilon=1.0, record_stride=50)
        ensemble = simulate_linear(lna.centered(), constant_history(1.0, [0.0, 0.0]), config,
                                   threads=settings.THREADS)
        for est in estimate_moments(ensemble, [5.0, 10.0, 20.0]):
            analytic = diag.at(est.t)
            for i in range(2):
                # both schemes are first order; allow their O(dt) gap on top of 3 SE
                allowance = 3 * est.cov_se[i, i] + 0.005 * analytic[i, i]
                self.assertLess(abs(est.cov[i, i] - analytic[i, i]), allowance,
                                f"rho_{i + 1}{i + 1}({est.t:g})")

    def test_exit_direction_mode(self):
        lna = toggle_lna()
        grid = build_grid(1.0, 6.0, 100)
        analytic = escape_optimize(lna, demo_history(lna), EscapeProblem([0.0, 0.0], 0.3, 0.03, 6.0, grid))
        target = math.degrees(math.atan2(analytic.q_hat[1], analytic.q_hat[0]))

        config = SimulationConfig(dt=0.01, T_sim=20.0, n_paths=4000, seed=31)
        ensemble = simulate_linear(lna, demo_history(lna), config, threads=settings.THREADS)
        stats = exit_statistics(ensemble, [0.0, 0.0], 0.3)
        angles = stats.angles([0.0, 0.0])[stats.exited]
        counts, edges = np.histogram(angles, bins=np.arange(-180.0, 181.0, 10.0))
        mode = 0.5 * (edges[np.argmax(counts)] + edges[np.argmax(counts) + 1])
        self.assertLess(abs(mode - target), 15.0)


if __name__ == "__main__":
    unittest.main()
