import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from sweeping.exceptions import ExpressionSyntaxError, SchemaError, UnknownIdentifier
from sweeping.problems import (
    ProblemFile,
    build_problem,
    dump_problem,
    find_interior_point,
    load_problem,
    registry,
)
from sweeping.sweepset import psi_max, sweeping_set

BUILTIN = ("duplicated", "opposing", "paper-6-1", "paper-6-1-free", "polygon-2d", "unit-ball")


def polygon_doc(**changes):
    doc = registry.document("polygon-2d")
    doc.update(changes)
    return doc


class DocumentTests(SimpleTestCase):

    def test_documents_survive_a_reload(self):
        for name in registry.names():
            problem = registry.get(name)
            self.assertEqual(ProblemFile.from_doc(problem.to_doc()).to_doc(), problem.to_doc(), name)

    def test_defaults(self):
        doc = polygon_doc()
        for key in ("phi", "delta", "N", "description"):
            doc.pop(key)
        problem = ProblemFile.from_doc(doc)
        self.assertEqual(problem.phi, "0")
        self.assertEqual(problem.delta, 1.0)
        self.assertEqual(problem.N, 100)

    def test_schema_version(self):
        with self.assertRaises(SchemaError):
            ProblemFile.from_doc(polygon_doc(schema_version=2))
        with self.assertRaises(SchemaError):
            ProblemFile.from_doc([])

    def test_rejected_fields(self):
        bad = [
            {"N": 8},
            {"N": True},
            {"n": "2"},
            {"T": -1.0},
            {"U": {"lo": [1.0, -1.0], "hi": [-1.0, 1.0]}},
            {"U": {"lo": [-1.0], "hi": [1.0]}},
            {"C0": {"kind": "affine", "a": [1.0, 0.0], "b": 0.0}},
            {"CT": {"kind": "point", "point": [1.0, 1.0]}},
            {"f": ["u1"]},
            {"psi": []},
            {"schedule": {}},
            {"schedule": {"auto": {"steps": 0}}},
            {"constants": {"eta": 0.2, "gamma": 10.0}},
            {"constants": {"eta": -0.2}},
            {"ball": {"y0": [0.0, 0.0], "R0": 0.0}},
            {"delta": 0.0},
        ]
        for change in bad:
            with self.assertRaises(SchemaError, msg=str(change)):
                ProblemFile.from_doc(polygon_doc(**change))

    def test_expression_errors_surface(self):
        with self.assertRaises(ExpressionSyntaxError):
            ProblemFile.from_doc(polygon_doc(psi=["-x1", "x1 +"]))
        with self.assertRaises(UnknownIdentifier):
            ProblemFile.from_doc(polygon_doc(g="(y3 - 2)^2"))

    def test_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = dump_problem(registry.get("unit-ball"), Path(tmp) / "ball.json")
            self.assertEqual(load_problem(path).to_doc(), registry.get("unit-ball").to_doc())
            broken = Path(tmp) / "broken.json"
            broken.write_text("{", encoding="utf-8")
            with self.assertRaises(SchemaError):
                load_problem(broken)
            with self.assertRaises(SchemaError):
                load_problem(Path(tmp) / "missing.json")

    def test_ball_adds_a_constraint(self):
        problem = ProblemFile.from_doc(polygon_doc(ball={"y0": [0.5, 0.5], "R0": 4.0}))
        self.assertEqual(problem.sweeping_set().r, 4)
        np.testing.assert_array_equal(problem.reference_point(), [0.5, 0.5])

    def test_midpoint_control(self):
        u = registry.get("paper-6-1").midpoint_control()
        self.assertEqual(u.N, 100)
        np.testing.assert_array_equal(u.values, np.zeros((100, 1)))


class RegistryTests(SimpleTestCase):

    def test_names(self):
        self.assertEqual(registry.names(), list(BUILTIN))
        self.assertIn("paper-6-1", registry)
        self.assertNotIn("lens", registry)

    def test_unknown_example(self):
        with self.assertRaises(SchemaError):
            registry.get("lens")

    def test_documents_are_copies(self):
        registry.document("polygon-2d")["psi"].append("x1")
        self.assertEqual(len(registry.get("polygon-2d").psi), 3)

    def test_closed_form(self):
        closed = registry.closed_form("paper-6-1")
        np.testing.assert_allclose(closed.state(0.5), [0.5, 1.0, -1.25])
        self.assertEqual(closed.objective, 0.0)
        self.assertEqual(closed.certificate(40).N, 40)
        self.assertIsNone(registry.closed_form("polygon-2d"))

    def test_worked_example_terminal_target(self):
        problem = build_problem(registry.get("paper-6-1")).problem
        x_T = registry.closed_form("paper-6-1").state(0.5)
        self.assertAlmostEqual(problem.CT.residual(x_T), 0.0)
        value, _, _ = problem.endpoint_cost(np.array([0.0, 1.0, -1.0]), x_T)
        self.assertAlmostEqual(value, 0.0)


class BuildTests(SimpleTestCase):

    def test_declared_constants_are_kept(self):
        b = build_problem(registry.get("paper-6-1"))
        self.assertEqual(b.estimates, {"eta": 0.5, "Mbar_psi": 10.0, "Mbar": 10.0})
        self.assertEqual(b.schedule.gammas, (100.0, 200.0, 400.0))
        self.assertAlmostEqual(b.schedule.threshold, 40.0)
        self.assertEqual(b.problem.spec.S.eta, 0.5)

    def test_estimated_constants(self):
        b = build_problem(registry.get("unit-ball"), seed=0, samples=64)
        self.assertAlmostEqual(b.estimates["eta"], 1.0, places=6)
        self.assertAlmostEqual(b.estimates["Mbar_psi"], 2.2, places=6)
        self.assertAlmostEqual(b.estimates["Mbar"], 1.1 * math.sqrt(2.0), places=6)
        np.testing.assert_array_equal(b.center, [0.0, 0.0])
        self.assertGreater(b.schedule.gammas[0], b.schedule.threshold)
        self.assertAlmostEqual(b.schedule.gammas[-1], 400.0)

    def test_estimates_are_seeded(self):
        first = build_problem(registry.get("unit-ball"), seed=3, samples=32).estimates
        second = build_problem(registry.get("unit-ball"), seed=3, samples=32).estimates
        self.assertEqual(first, second)


class InteriorPointTests(SimpleTestCase):

    def setUp(self):
        self.S = sweeping_set(["-x1", "-x2", "x1 + x2 - 2"], 2)
        self.rng = np.random.default_rng(0)

    def test_interior_reference_is_returned(self):
        np.testing.assert_array_equal(find_interior_point(self.S, [0.5, 0.5], self.rng), [0.5, 0.5])

    def test_outside_reference_is_pulled_in(self):
        x = find_interior_point(self.S, [3.0, 3.0], self.rng)
        self.assertLess(psi_max(self.S, x), -1e-6)

    def test_no_interior(self):
        S = sweeping_set(["x1", "-x1"], 2)
        self.assertIsNone(find_interior_point(S, [0.0, 0.0], self.rng))
