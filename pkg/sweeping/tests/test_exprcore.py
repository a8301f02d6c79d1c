import numpy as np
from django.test import SimpleTestCase

from sweeping.exceptions import DomainError, ExpressionSyntaxError, IndexOutOfRange, UnknownIdentifier
from sweeping.exprcore import (
    Const,
    ExprAst,
    contains_max2,
    eval_with_derivatives,
    grad_u,
    parse_expression,
    parse_field,
    parse_vector,
    serialize,
)


def central_gradient(fn, x, step=1e-6):
    grad = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return grad


ATOMS = ["x1", "x2", "x3", "u1", "t", "1.5", "0.75"]


def random_expression(rng, depth=0):
    """Random smooth expression over x1..x3, u1 and t."""
    if depth > 2 or rng.random() < 0.25:
        return ATOMS[rng.integers(len(ATOMS))]
    choice = rng.integers(7)
    a = random_expression(rng, depth + 1)
    if choice == 0:
        return f"({a}) + ({random_expression(rng, depth + 1)})"
    if choice == 1:
        return f"({a}) - ({random_expression(rng, depth + 1)})"
    if choice == 2:
        return f"({a}) * ({random_expression(rng, depth + 1)})"
    if choice == 3:
        return f"({a})^{int(rng.integers(1, 4))}"
    if choice == 4:
        return f"-({a})"
    if choice == 5:
        return f"sin({a})"
    return f"exp(0.1 * ({a}))"


class ParseTests(SimpleTestCase):

    def test_parses_constraint_of_worked_example(self):
        ast = parse_expression("x1^2 + x2^2 + x3", 3, 1)
        self.assertIsInstance(ast, ExprAst)
        self.assertEqual(serialize(ast), "x1^2 + x2^2 + x3")

    def test_zero_is_constant(self):
        ast = parse_expression("0", 2)
        self.assertEqual(ast.root, Const(0.0))

    def test_trailing_operator_reports_position(self):
        with self.assertRaises(ExpressionSyntaxError) as cm:
            parse_expression("x1 +", 1)
        self.assertEqual(cm.exception.position, 4)
        self.assertEqual(cm.exception.exit_code, 2)

    def test_unknown_identifier(self):
        with self.assertRaises(UnknownIdentifier) as cm:
            parse_expression("y1 + x1", 1)
        self.assertEqual(cm.exception.name, "y1")
        with self.assertRaises(UnknownIdentifier):
            parse_expression("tanh(x1)", 1)

    def test_index_out_of_range(self):
        with self.assertRaises(IndexOutOfRange):
            parse_expression("x3", 2)
        with self.assertRaises(IndexOutOfRange):
            parse_expression("u1", 2, 0)

    def test_wrong_arity(self):
        with self.assertRaises(ExpressionSyntaxError):
            parse_expression("max2(x1)", 1)

    def test_precedence(self):
        field = parse_field("-x1^2", 1)
        self.assertEqual(field.value(0.0, [3.0]), -9.0)
        field = parse_field("2 * 3 + 4 / 2 - 1", 1)
        self.assertEqual(field.value(0.0, [0.0]), 7.0)

    def test_round_trip_on_random_corpus(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            ast = parse_expression(random_expression(rng), 3, 1)
            self.assertEqual(parse_expression(serialize(ast), 3, 1), ast)

    def test_round_trip_of_signs_and_negative_exponents(self):
        for src in ("--x1", "x1 - -x2", "(-x1)^2", "x1^-2", "x1 / (x2 * x1)", "1e-05 * x1", "x1 - (x2 - x1)"):
            ast = parse_expression(src, 2)
            self.assertEqual(parse_expression(serialize(ast), 2), ast, src)

    def test_contains_max2(self):
        self.assertTrue(contains_max2(parse_expression("1 + max2(x1, 2*x1)", 1)))
        self.assertFalse(contains_max2(parse_expression("exp(x1)", 1)))

    def test_variables(self):
        field = parse_field("u2 * x3 + t - x1^2", 3, 2)
        self.assertEqual(field.variables(), ("t", "x1", "x3", "u2"))


class DerivativeTests(SimpleTestCase):

    def test_worked_example_constraint(self):
        psi1 = parse_field("x1^2 + x2^2 + x3", 3)
        value, grad, hess = eval_with_derivatives(psi1, 0.0, np.array([0.0, 1.0, -1.0]), None, 2)
        self.assertEqual(value, 0.0)
        np.testing.assert_array_equal(grad, [0.0, 2.0, 1.0])
        np.testing.assert_array_equal(hess, np.diag([2.0, 2.0, 0.0]))

    def test_second_constraint_on_the_junction(self):
        psi2 = parse_field("x1^2 + (x2 - 2)^2 + x3", 3)
        t = 0.3
        value, grad, _ = eval_with_derivatives(psi2, t, np.array([t, 1.0, -1.0 - t * t]), None, 1)
        self.assertAlmostEqual(value, 0.0, places=14)
        np.testing.assert_allclose(grad, [0.6, -2.0, 1.0], atol=1e-14)

    def test_constant_field(self):
        value, grad, hess = eval_with_derivatives(parse_field("5", 2), 0.0, np.zeros(2), None, 2)
        self.assertEqual(value, 5.0)
        np.testing.assert_array_equal(grad, np.zeros(2))
        np.testing.assert_array_equal(hess, np.zeros((2, 2)))

    def test_derivatives_only_when_requested(self):
        _, grad, hess = eval_with_derivatives(parse_field("x1", 1), 0.0, [1.0], None, 0)
        self.assertIsNone(grad)
        self.assertIsNone(hess)

    def test_gradient_and_hessian_match_finite_differences(self):
        rng = np.random.default_rng(11)
        sources = [random_expression(rng) for _ in range(60)]
        sources += ["ln(1 + x1^2) * sqrt(2 + cos(x2))", "x1 / (2 + sin(x3))", "exp(x1 * x2) - x3^3"]
        for src in sources:
            field = parse_field(src, 3, 1)
            x = rng.uniform(-1.0, 1.0, 3)
            u = rng.uniform(-1.0, 1.0, 1)
            t = 0.4
            value, grad, hess = eval_with_derivatives(field, t, x, u, 2)
            scale = 1 + abs(value)
            fd_grad = central_gradient(lambda y: field.value(t, y, u), x)
            self.assertLessEqual(np.max(np.abs(grad - fd_grad)), 1e-5 * (scale + np.linalg.norm(fd_grad)), src)
            fd_hess = np.array([
                central_gradient(lambda y: eval_with_derivatives(field, t, y, u, 1)[1][i], x, 1e-5)
                for i in range(3)
            ])
            bound = 1e-4 * (scale + np.linalg.norm(grad) + np.linalg.norm(fd_hess))
            self.assertLessEqual(np.max(np.abs(hess - fd_hess)), bound, src)

    def test_control_derivatives(self):
        field = parse_field("x1 * u1^2 + u2", 2, 2)
        g, mixed = grad_u(field, 0.0, np.array([3.0, 0.0]), np.array([0.5, 1.0]))
        np.testing.assert_allclose(g, [3.0, 1.0])
        np.testing.assert_allclose(mixed, [[1.0, 0.0], [0.0, 0.0]])

    def test_vector_jacobians(self):
        f = parse_vector(["4*x1 + u1", "x2 - 1", "-2*x1 - x2 + u1 + 2"], 3, 1)
        value, jac_x, jac_u = f.jacobians(0.0, np.array([0.0, 1.0, -1.0]), np.array([1.0]))
        np.testing.assert_allclose(value, [1.0, 0.0, 2.0])
        np.testing.assert_allclose(jac_x, [[4, 0, 0], [0, 1, 0], [-2, -1, 0]])
        np.testing.assert_allclose(jac_u, [[1], [0], [1]])

    def test_evaluation_is_deterministic(self):
        field = parse_field("exp(sin(x1) * x2) / (1 + x1^2)", 2)
        x = np.array([0.3, -0.7])
        first = eval_with_derivatives(field, 0.0, x, None, 2)
        second = eval_with_derivatives(field, 0.0, x, None, 2)
        self.assertEqual(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        np.testing.assert_array_equal(first[2], second[2])


class DomainTests(SimpleTestCase):

    def test_log_of_nonpositive(self):
        with self.assertRaises(DomainError) as cm:
            parse_field("ln(x1)", 1).value(0.0, [0.0])
        self.assertIn("ln", cm.exception.subexpression)

    def test_division_by_zero(self):
        with self.assertRaises(DomainError):
            parse_field("1 / x1", 1).value(0.0, [0.0])

    def test_sqrt_of_negative(self):
        with self.assertRaises(DomainError):
            parse_field("sqrt(x1)", 1).value(0.0, [-1.0])

    def test_order_above_declared_differentiability(self):
        field = parse_field("x1^2", 1, differentiability=1)
        with self.assertRaises(ValueError):
            field.jet(0.0, [1.0], None, 2)
