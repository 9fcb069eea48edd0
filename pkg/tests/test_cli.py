import contextlib
import io
import os
import unittest

import numpy as np
from numpy.testing import assert_allclose

import app
from services import export
from services.run_record import load_record
from tests.fixtures import temp_dir, write_toml

BROWNIAN = """
schema = 1

[model.linear]
a = [0.0, 0.0]
B = [[0.0, 0.0], [0.0, 0.0]]
C = [[0.0, 0.0], [0.0, 0.0]]
Sigma = [[1.0, 0.0], [0.0, 1.0]]
tau = 1.0

[history]
constant = [0.0, 0.0]

[grid]
N = 20
T = 2.0

[target]
Q = [0.5, -0.3]
T = 1.0
"""

SIMULATION = """
[simulation]
dt = 0.05
T = 2.0
n_paths = {n_paths}
seed = 5
moment_times = [1.0, 2.0]
"""

TOGGLE_AT_REST = """
schema = 1

[model.toggle]
tau = 1.0
state = [0.0498, 1.0033]

[history]
constant = [0.0, 0.0]
coordinates = "local"

[grid]
N = 20
T = 3.0
T_large = 3.0

[disk]
R = 0.3
delta_r = 0.1
"""


TOGGLE_CLE = """
schema = 1

[model.toggle]
tau = 1.0
state = [0.0498, 1.0033]

[history]
constant = [0.0498, 1.0033]
coordinates = "absolute"

[disk]
R = 0.3
delta_r = 0.1

[simulation]
dynamics = "cle"
dt = 0.01
T = 3.0
n_paths = 60
seed = 11
"""

def read_summary(path):
    with open(path, encoding="utf-8") as f:
        return dict(line.rstrip("\n").split(" = ", 1) for line in f)


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self._tmp = temp_dir()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *argv, config=None, name="run.toml", out="out"):
        args = list(argv)
        if config is not None:
            args += ["--config", write_toml(self.tmp, name, config)]
        out_dir = os.path.join(self.tmp, out)
        args += ["--out", out_dir]
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            code = app.main(args)
        return code, out_dir, stderr.getvalue()


class TestCommands(CliTestCase):

    def test_mean_of_a_resting_brownian_motion(self):
        code, out, _ = self.run_cli("mean", config=BROWNIAN)
        self.assertEqual(code, 0)
        header, rows = export.read_csv(os.path.join(out, "mean.csv"))
        self.assertEqual(header[0], "t")
        self.assertEqual(rows.shape[0], 61)
        assert_allclose(rows[:, 1:], 0.0)
        record = load_record(out)
        self.assertEqual(record["status"], "ok")
        self.assertIn("mean.csv", record["outputs"])

    def test_cov(self):
        code, out, _ = self.run_cli("cov", config=BROWNIAN)
        self.assertEqual(code, 0)
        _, diag = export.read_csv(os.path.join(out, "cov_diag.csv"))
        # rho(t_j, t_j) = t_{j-1} I for j >= 1
        self.assertAlmostEqual(diag[-1, 1], 3.0 - 0.05, delta=1e-12)
        self.assertTrue(os.path.exists(os.path.join(out, "eigcurve.csv")))

    def test_optimal_path(self):
        code, out, _ = self.run_cli("optimal-path", config=BROWNIAN)
        self.assertEqual(code, 0)
        summary = read_summary(os.path.join(out, "energy.txt"))
        energy = float(summary["energy"])
        # |Q|^2 / 2 over the discrete variance rho(T,T) = T - delta
        self.assertAlmostEqual(energy, 0.17 / 0.95, delta=1e-9)
        self.assertAlmostEqual(float(summary["path_energy"]), energy, delta=0.05 * energy)
        _, path = export.read_csv(os.path.join(out, "path.csv"))
        assert_allclose(path[-1, 1:], [0.5, -0.3], atol=1e-12)

    def test_time_scan_is_optional(self):
        config = BROWNIAN.replace("T = 1.0\n", "T = 1.0\nscan = true\n")
        code, out, _ = self.run_cli("optimal-path", config=config)
        self.assertEqual(code, 0)
        self.assertEqual(read_summary(os.path.join(out, "energy.txt"))["T_opt"], "inf")
        self.assertTrue(os.path.exists(os.path.join(out, "energy_curve.csv")))

    def test_escape_from_rest_reaches_the_horizon(self):
        code, out, _ = self.run_cli("escape", config=TOGGLE_AT_REST)
        self.assertEqual(code, 0)
        summary = read_summary(os.path.join(out, "summary.txt"))
        self.assertEqual(summary["T_opt"], "inf")
        self.assertEqual(summary["at_horizon"], "true")
        self.assertEqual(summary["n_points"], "12")
        self.assertTrue(load_record(out)["warnings"])
        for name in ("energy_matrix.csv", "boundary_points.csv", "escape_path.csv"):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)

    def test_svg_figures(self):
        code, out, _ = self.run_cli("mean", "--svg", config=BROWNIAN)
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(out, "mean.svg")))


class TestSimulate(CliTestCase):

    def test_single_path_skips_moments(self):
        code, out, _ = self.run_cli("simulate", config=BROWNIAN + SIMULATION.format(n_paths=1))
        self.assertEqual(code, 0)
        self.assertFalse(os.path.exists(os.path.join(out, "moments.csv")))
        self.assertTrue(any("2 paths" in w for w in load_record(out)["warnings"]))
        self.assertEqual(read_summary(os.path.join(out, "simulation.txt"))["n_paths"], "1")

    def test_reruns_are_byte_identical(self):
        config = BROWNIAN + SIMULATION.format(n_paths=40)
        outputs = []
        for out in ("first", "second"):
            code, out_dir, _ = self.run_cli("simulate", config=config, out=out)
            self.assertEqual(code, 0)
            with open(os.path.join(out_dir, "moments.csv"), "rb") as f:
                outputs.append(f.read())
        self.assertEqual(outputs[0], outputs[1])

    def test_seed_flag_overrides_the_config(self):
        config = BROWNIAN + SIMULATION.format(n_paths=40)
        _, first, _ = self.run_cli("simulate", config=config, out="first")
        _, second, _ = self.run_cli("simulate", "--seed", "6", config=config, out="second")
        _, a = export.read_csv(os.path.join(first, "moments.csv"))
        _, b = export.read_csv(os.path.join(second, "moments.csv"))
        self.assertFalse(np.allclose(a[:, 2:], b[:, 2:]))
        self.assertEqual(read_summary(os.path.join(second, "simulation.txt"))["seed"], "6")

    def test_disk_block_writes_exit_statistics(self):
        outputs = []
        for out in ("first", "second"):
            code, out_dir, _ = self.run_cli("simulate", "--threads", "4", config=TOGGLE_CLE, out=out)
            self.assertEqual(code, 0)
            self.assertIn("exits.csv", load_record(out_dir)["outputs"])
            with open(os.path.join(out_dir, "exits.csv"), "rb") as f:
                outputs.append(f.read())
        self.assertEqual(outputs[0], outputs[1])

        header, rows = export.read_csv(os.path.join(out_dir, "exits.csv"))
        self.assertEqual(header[:3], ["path", "exited", "t_exit"])
        self.assertEqual(rows.shape, (60, 5))
        fraction = float(read_summary(os.path.join(out_dir, "simulation.txt"))["exit_fraction"])
        self.assertGreater(fraction, 0.0)
        self.assertAlmostEqual(fraction, rows[:, 1].mean(), delta=1e-12)


class TestErrors(CliTestCase):

    def test_missing_field_exits_with_code_two(self):
        config = BROWNIAN.replace("N = 20\n", "")
        code, out, err = self.run_cli("mean", config=config)
        self.assertEqual(code, 2)
        self.assertIn("code=2", err)
        self.assertIn("grid.N", err)
        record = load_record(out)
        self.assertEqual(record["status"], "failed")
        self.assertEqual(record["exit_code"], 2)

    def test_missing_block(self):
        code, _, err = self.run_cli("escape", config=BROWNIAN)
        self.assertEqual(code, 2)
        self.assertIn("disk", err)

    def test_linear_escape_needs_a_centre(self):
        config = BROWNIAN + "\n[disk]\nR = 0.3\ndelta_r = 0.1\n"
        code, _, err = self.run_cli("escape", config=config)
        self.assertEqual(code, 2)
        self.assertIn("disk.center", err)

    def test_unknown_config_file(self):
        code, _, err = self.run_cli("mean", "--config", os.path.join(self.tmp, "missing.toml"))
        self.assertEqual(code, 2)
        self.assertIn("ConfigError", err)

    def test_bad_thread_count(self):
        code, _, err = self.run_cli("mean", "--threads", "0", config=BROWNIAN)
        self.assertEqual(code, 2)
        self.assertIn("--threads", err)


class TestCommandLine(CliTestCase):

    def test_missing_config_flag_is_recorded(self):
        code, out, err = self.run_cli("mean")
        self.assertEqual(code, 2)
        self.assertIn("--config", err)
        record = load_record(out)
        self.assertEqual(record["status"], "failed")
        self.assertEqual(record["exit_code"], 2)
        self.assertEqual(record["command"], "mean")
        self.assertIn("--config", record["error"])

    def test_unknown_command_is_recorded(self):
        code, out, err = self.run_cli("frobnicate", config=BROWNIAN)
        self.assertEqual(code, 2)
        self.assertIn("code=2", err)
        record = load_record(out)
        self.assertEqual(record["status"], "failed")
        self.assertEqual(record["command"], "frobnicate")
        self.assertTrue(record["config_path"].endswith("run.toml"))


if __name__ == "__main__":
    unittest.main()
