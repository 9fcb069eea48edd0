import math
import os
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from services import export
from services.run_record import RECORD_FILE, RunRecord, load_record
from tests.fixtures import temp_dir


class TestCsv(unittest.TestCase):

    def test_values_survive_exactly(self):
        rows = np.array([[0.1, 1.0 / 3.0, -2.5e-17], [1e300, math.pi, 0.0]])
        with temp_dir() as tmp:
            path = export.write_csv(os.path.join(tmp, "a.csv"), ["t", "x", "y"], rows)
            header, back = export.read_csv(path)
            with open(path, "rb") as f:
                raw = f.read()
        self.assertEqual(header, ["t", "x", "y"])
        assert_array_equal(back, rows)
        self.assertTrue(raw.startswith(b"t,x,y\n"))
        self.assertNotIn(b"\r", raw)

    def test_nan_and_inf(self):
        rows = np.array([[1.0, np.nan, np.inf]])
        with temp_dir() as tmp:
            header, back = export.read_csv(export.write_csv(os.path.join(tmp, "b.csv"), ["a", "b", "c"], rows))
        self.assertTrue(np.isnan(back[0, 1]))
        self.assertTrue(np.isinf(back[0, 2]))

    def test_rewrites_are_identical(self):
        rows = np.random.default_rng(0).normal(size=(20, 3))
        with temp_dir() as tmp:
            first = export.write_table(os.path.join(tmp, "one", "c.csv"), (["a", "b", "c"], rows))
            second = export.write_table(os.path.join(tmp, "two", "c.csv"), (["a", "b", "c"], rows))
            with open(first, "rb") as f, open(second, "rb") as g:
                self.assertEqual(f.read(), g.read())

    def test_header_width(self):
        with temp_dir() as tmp:
            with self.assertRaises(ValueError):
                export.write_csv(os.path.join(tmp, "d.csv"), ["a"], np.zeros((2, 2)))


class TestSummary(unittest.TestCase):

    def test_key_value_lines(self):
        with temp_dir() as tmp:
            path = export.write_summary(os.path.join(tmp, "s.txt"), {
                "T_opt": math.inf,
                "n": np.int64(3),
                "energy": 0.25,
                "at_horizon": True,
                "q_hat": np.array([0.5, -0.125]),
                "half": "both",
            })
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        self.assertEqual(lines, [
            "T_opt = inf",
            "n = 3",
            "energy = 0.25",
            "at_horizon = true",
            "q_hat = [0.5, -0.125]",
            'half = "both"',
        ])


class TestFigures(unittest.TestCase):

    def test_svg_is_written_without_a_timestamp(self):
        t = np.linspace(0.0, 1.0, 11)
        with temp_dir() as tmp:
            first = export.plot_columns(os.path.join(tmp, "a.svg"), (["t", "x"], np.column_stack([t, t * t])),
                                        "curve", "x(t)")
            second = export.plot_columns(os.path.join(tmp, "b.svg"), (["t", "x"], np.column_stack([t, t * t])),
                                         "curve", "x(t)")
            with open(first, encoding="utf-8") as f:
                text = f.read()
            with open(second, encoding="utf-8") as f:
                other = f.read()
        self.assertIn("<svg", text)
        self.assertNotIn("<dc:date>", text)
        self.assertEqual(len(text), len(other))

    def test_escape_figure(self):
        angles = np.linspace(0.0, 2 * np.pi, 30)
        points = np.column_stack([np.cos(angles), np.sin(angles)])
        path = np.column_stack([np.linspace(0.0, 0.6, 10), np.linspace(0.0, 0.8, 10)])
        with temp_dir() as tmp:
            out = export.plot_escape(os.path.join(tmp, "e.svg"), points, path, path[::-1], path[-1])
            self.assertTrue(os.path.getsize(out) > 0)


class TestRunRecord(unittest.TestCase):

    def test_record_round_trip(self):
        record = RunRecord("escape", config={"grid": {"N": 500}, "x": np.array([1.0, 2.0])},
                           config_path="toggle_demo.toml")
        with record.stage("mean"):
            pass
        record.add_output(os.path.join("out", "mean.csv"))
        record.warn("energy minimum at the scan horizon")
        record.finish(0)
        with temp_dir() as tmp:
            path = record.save(tmp)
            self.assertEqual(os.path.basename(path), RECORD_FILE)
            data = load_record(tmp)
        self.assertEqual(data["status"], "ok")
        self.assertEqual(data["exit_code"], 0)
        self.assertEqual(data["outputs"], ["mean.csv"])
        self.assertEqual(data["config"]["x"], [1.0, 2.0])
        self.assertIn("mean", data["timings"])
        self.assertEqual(len(data["warnings"]), 1)

    def test_failed_run(self):
        record = RunRecord("cov")
        record.finish(2, "ConfigError: grid.N: required field is missing")
        self.assertEqual(record.status, "failed")
        self.assertEqual(record.to_dict()["error"], "ConfigError: grid.N: required field is missing")

    def test_stage_is_timed_when_it_raises(self):
        record = RunRecord("mean")
        with self.assertRaises(RuntimeError):
            with record.stage("solve"):
                raise RuntimeError("boom")
        self.assertIn("solve", record.timings)


if __name__ == "__main__":
    unittest.main()
