from django.test import SimpleTestCase

from sweeping.exceptions import GridMismatch
from sweeping.pmpverify import (
    CONDITIONS,
    CORRUPTIONS,
    VerifyTolerances,
    check_adjoint,
    check_primal,
    check_slackness,
    check_transversality_and_max,
    closed_form_certificate,
    corrupt,
    verify,
)
from sweeping.problems import build_problem, registry


def worked_problem(name="paper-6-1"):
    return build_problem(registry.get(name), 0, samples=64).problem


class ClosedFormTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.prob = worked_problem()
        cls.cert = closed_form_certificate(2000)

    def test_closed_form_certificate_passes(self):
        report = verify(self.cert, self.prob)
        self.assertTrue(report.ok, report.to_doc())
        self.assertEqual(report.failures(), [])

    def test_report_document(self):
        doc = verify(self.cert, self.prob).to_doc()
        self.assertTrue(doc["pass"])
        self.assertEqual(list(doc["conditions"]), list(CONDITIONS))
        for entry in doc["conditions"].values():
            self.assertEqual(set(entry), {"residual", "tolerance", "pass"})

    def test_primal_and_slackness(self):
        tolerances = VerifyTolerances()
        self.assertLessEqual(check_primal(self.cert, self.prob), tolerances.primal_dynamics)
        res_a, res_b = check_slackness(self.cert, self.prob)
        self.assertLessEqual(res_a, tolerances.slack_a)
        self.assertLessEqual(res_b, tolerances.slack_b)

    def test_transversality_of_the_affine_target(self):
        res_tv, res_max, res_nontriv = check_transversality_and_max(self.cert, self.prob)
        tolerances = VerifyTolerances()
        self.assertLessEqual(res_tv, tolerances.transversality)
        self.assertLessEqual(res_max, tolerances.maximization)
        self.assertAlmostEqual(res_nontriv, 0.0, places=12)

    def test_every_corruption_is_flagged(self):
        tolerances = VerifyTolerances()
        for kind in CORRUPTIONS:
            report = verify(corrupt(self.cert, kind, self.prob), self.prob, tolerances)
            self.assertTrue(report.failures(), kind)
            worst = max(report.residuals[name] / report.tolerances[name] for name in CONDITIONS)
            self.assertGreater(worst, 10.0, kind)

    def test_dropping_atoms_breaks_the_adjoint_equation(self):
        broken = corrupt(self.cert, "atoms_dropped", self.prob)
        self.assertGreater(check_adjoint(broken, self.prob), 10 * VerifyTolerances().adjoint)

    def test_adjoint_verdict_does_not_depend_on_the_seed(self):
        tolerance = VerifyTolerances().adjoint
        broken = corrupt(self.cert, "atoms_dropped", self.prob)
        for seed in range(10):
            self.assertLessEqual(check_adjoint(self.cert, self.prob, seed), tolerance, seed)
            self.assertGreater(check_adjoint(broken, self.prob, seed), tolerance, seed)

    def test_scaling_changes_only_nontriviality(self):
        base = verify(self.cert, self.prob).residuals
        scaled = verify(self.cert.scaled(2.5), self.prob).residuals
        for name in CONDITIONS:
            if name == "nontriviality":
                self.assertAlmostEqual(scaled[name], 1.5)
            else:
                self.assertAlmostEqual(scaled[name], base[name], delta=1e-9 * (1.0 + base[name]))

    def test_looser_tolerances(self):
        tolerances = VerifyTolerances().scaled(10.0)
        self.assertAlmostEqual(tolerances.adjoint, 0.1)
        self.assertEqual(tolerances.active_tol, 1e-6)

    def test_unknown_corruption(self):
        with self.assertRaises(ValueError):
            corrupt(self.cert, "p_sign", self.prob)


class FreeEndpointTests(SimpleTestCase):

    def test_free_endpoint_reports_the_unit_branch(self):
        prob = worked_problem("paper-6-1-free")
        cert = closed_form_certificate(200)
        report = verify(cert, prob)
        self.assertIn("nontriviality", report.notes)
        self.assertAlmostEqual(report.residuals["nontriviality"], 0.75)


class ShapeTests(SimpleTestCase):

    def test_certificate_for_another_problem(self):
        polygon = build_problem(registry.get("polygon-2d"), 0, samples=16).problem
        with self.assertRaises(GridMismatch):
            verify(closed_form_certificate(50), polygon)
