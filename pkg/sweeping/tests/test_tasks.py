import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, TestCase, tag

from sweeping.exceptions import ScheduleError
from sweeping.models import RunRecord
from sweeping.problems import registry
from sweeping.tasks import simulate_gamma, solve_problem


class SimulateTaskTests(SimpleTestCase):

    def test_polygon_run(self):
        summary = simulate_gamma(registry.document("polygon-2d"), 100, "const:0.5")
        self.assertEqual(summary["gamma"], 100.0)
        self.assertGreaterEqual(summary["invariance_margin"], -1e-4)
        self.assertLessEqual(summary["max_xi"], summary["xi_bound"])
        self.assertEqual(summary["speed_excess"], 0.0)
        np.testing.assert_allclose(summary["final_state"], [1.0, 1.0], atol=0.05)

    def test_oracle_distance(self):
        summary = simulate_gamma(registry.document("polygon-2d"), 400, "const:0.5", {"oracle": True})
        self.assertLessEqual(summary["sup_dist"], 0.05)

    def test_gamma_below_threshold(self):
        with self.assertRaises(ScheduleError):
            simulate_gamma(registry.document("polygon-2d"), 10, "const:0")


@tag("slow")
class SolveTaskTests(TestCase):

    def test_queued_solve_finishes_its_record(self):
        record = RunRecord.record("solve", "polygon-2d", status="queued")
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "solve"
            summary = solve_problem(registry.document("polygon-2d"), {"out": str(out), "record_id": record.pk})
            self.assertEqual(summary["out"], str(out))
            for name in ("problem.json", "trajectory.csv", "adjoint.csv", "adjoint.atoms.json",
                         "certificate.json", "solve.json"):
                self.assertTrue((out / name).exists(), name)
        record.refresh_from_db()
        self.assertEqual(record.status, "ok")
        self.assertNotIn("log", record.summary)
        self.assertIn("verification", record.summary)
