import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import CommandError, call_command
from django.test import TestCase, override_settings

from sweeping.artifacts import write_certificate
from sweeping.exceptions import StateOutsideC
from sweeping.models import RunRecord
from sweeping.pmpverify import closed_form_certificate, corrupt
from sweeping.problems import build_problem, load_problem, registry


@override_settings(SWEEPING={"RECORD_RUNS": True, "BOUNDARY_SAMPLES": 64})
class SweepCommandTests(TestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.dir = Path(tmp.name)

    def sweep(self, *args):
        out = StringIO()
        call_command("sweep", *args, stdout=out, stderr=StringIO())
        return out.getvalue()

    def test_example_list(self):
        listing = self.sweep("example", "list")
        for name in registry.names():
            self.assertIn(name, listing)

    def test_example_export(self):
        path = self.dir / "lens.json"
        self.sweep("example", "export", "paper-6-1", "--out", str(path))
        self.assertEqual(load_problem(path).to_doc(), registry.get("paper-6-1").to_doc())

    def test_example_without_closed_form(self):
        with self.assertRaises(CommandError) as cm:
            self.sweep("example", "certificate", "polygon-2d", "--out", str(self.dir / "c.json"))
        self.assertEqual(cm.exception.returncode, 2)

    def test_closed_form_certificate_is_accepted(self):
        path = self.dir / "certificate.json"
        self.sweep("example", "certificate", "paper-6-1", "--out", str(path))
        output = self.sweep("verify", str(path), "paper-6-1", "--corruptions", "--out", str(self.dir / "v.json"))
        self.assertIn("certificate accepted", output)
        self.assertNotIn("flagged nothing", output)
        report = json.loads((self.dir / "v.json").read_text(encoding="utf-8"))
        self.assertTrue(report["pass"])
        self.assertEqual(set(report["corruptions"]), {"xi_shift", "p3_sign_flip", "atoms_dropped", "lambda_change",
                                                      "control_flip", "pT_perturbation"})
        self.assertTrue(RunRecord.objects.filter(kind="verify", status="ok").exists())
        self.assertIn("verify", self.sweep("runs"))

    def test_empty_certificate(self):
        path = self.dir / "empty.json"
        path.write_text("{}", encoding="utf-8")
        with self.assertRaises(CommandError) as cm:
            self.sweep("verify", str(path), "paper-6-1")
        self.assertEqual(cm.exception.returncode, 2)

    def test_corrupted_certificate_is_rejected(self):
        prob = build_problem(registry.get("paper-6-1")).problem
        path = write_certificate(self.dir / "bad.json", corrupt(closed_form_certificate(2000), "atoms_dropped", prob))
        with self.assertRaises(CommandError) as cm:
            self.sweep("verify", str(path), "paper-6-1")
        self.assertEqual(cm.exception.returncode, 1)
        self.assertIn("adjoint", str(cm.exception))
        self.assertTrue(RunRecord.objects.filter(kind="verify", status="failed").exists())

    def test_check_flags_duplicated_constraints(self):
        with self.assertRaises(CommandError) as cm:
            self.sweep("check", "duplicated", "--out", str(self.dir / "check.json"))
        self.assertEqual(cm.exception.returncode, 1)
        report = json.loads((self.dir / "check.json").read_text(encoding="utf-8"))
        self.assertEqual(report["first_failure"], "gradient_coupling")
        self.assertGreaterEqual(report["estimates"]["b_hat"], 1.0 - 1e-9)

    def test_check_passes_on_the_worked_example(self):
        output = self.sweep("check", "paper-6-1")
        self.assertIn("boundary_gradients: pass", output)
        self.assertIn("gradient_coupling: pass", output)
        self.assertTrue(RunRecord.objects.filter(kind="check", status="ok").exists())

    def test_check_of_a_problem_file(self):
        path = self.dir / "polygon.json"
        self.sweep("example", "export", "polygon-2d", "--out", str(path))
        self.assertIn("boundary_gradients: pass", self.sweep("check", str(path)))

    def test_simulate_refuses_small_gamma(self):
        with self.assertRaises(CommandError) as cm:
            self.sweep("simulate", "paper-6-1", "--gamma", "30", "--out", str(self.dir / "sim"))
        self.assertEqual(cm.exception.returncode, 2)
        self.assertFalse((self.dir / "sim").exists())

    def test_simulate_writes_one_trajectory_per_gamma(self):
        out = self.dir / "sim"
        output = self.sweep("--threads", "2", "simulate", "polygon-2d", "--gamma", "100", "--gamma", "200",
                            "--control", "const:0.5", "--oracle", "--out", str(out))
        self.assertIn("gamma=100", output)
        self.assertIn("sup_dist", output)
        for name in ("trajectory-gamma100.csv", "trajectory-gamma200.csv", "oracle.csv", "simulate.json"):
            self.assertTrue((out / name).exists(), name)

    def test_state_outside_C_is_a_numeric_failure(self):
        failure = StateOutsideC(0.5, "catching-up needs an initial state in C")
        with mock.patch("sweeping.runner.integrate_catching_up", side_effect=failure):
            with self.assertRaises(CommandError) as cm:
                self.sweep("simulate", "polygon-2d", "--gamma", "100", "--oracle", "--out", str(self.dir / "s"))
        self.assertEqual(cm.exception.returncode, 1)
        self.assertIn("initial state in C", str(cm.exception))

    def test_bad_control_argument(self):
        with self.assertRaises(CommandError) as cm:
            self.sweep("simulate", "polygon-2d", "--gamma", "100", "--control", "ramp:1", "--out", str(self.dir / "s"))
        self.assertEqual(cm.exception.returncode, 2)

    def test_check_flags_opposing_gradients(self):
        with self.assertRaises(CommandError) as cm:
            self.sweep("check", "opposing", "--out", str(self.dir / "check.json"))
        self.assertEqual(cm.exception.returncode, 1)
        report = json.loads((self.dir / "check.json").read_text(encoding="utf-8"))
        self.assertEqual(report["first_failure"], "boundary_gradients")
        self.assertAlmostEqual(report["estimates"]["eta_hat"], 0.0, places=9)
        self.assertTrue(RunRecord.objects.filter(kind="check", status="failed").exists())
