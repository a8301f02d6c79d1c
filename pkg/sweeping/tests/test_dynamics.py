import math

import numpy as np
from django.test import SimpleTestCase, tag

from sweeping.dynamics import (
    AdjointMeasure,
    ControlSignal,
    DynamicsSpec,
    IntegratorOptions,
    Trajectory,
    accumulate_measures,
    compare_to_oracle,
    estimate_Mbar,
    integrate_adjoint,
    integrate_catching_up,
    integrate_penalized,
    integrate_transcribed,
    recover_adjoint,
    speed_violation,
    transcribed_gradient,
)
from sweeping.exceptions import GridMismatch, InvarianceViolation, StateOutsideC
from sweeping.exprcore import parse_field, parse_vector
from sweeping.pmpverify import closed_form_certificate
from sweeping.sweepset import PenaltySchedule, psi_gamma_value, shifted_start, sweeping_set

T = 0.5
START = np.array([0.0, 1.0, -1.0])


def worked_dynamics():
    S = sweeping_set(["x1^2 + x2^2 + x3", "x1^2 + (x2 - 2)^2 + x3"], 3, eta=0.5, Mbar_psi=10.0)
    f = parse_vector(["4*x1 + u1", "x2 - 1", "-2*x1 - x2 + u1 + 2"], 3, 1)
    return DynamicsSpec(f=f, Phi=parse_field("0", 3), S=S, T=T, Mbar=10.0)


def exact_state(t):
    return np.array([t, 1.0, -1.0 - t * t])


def rotation_dynamics(sources=("x2", "-x1")):
    S = sweeping_set(["x1^2 + x2^2 - 100"], 2, eta=1.0, Mbar_psi=40.0)
    return DynamicsSpec(f=parse_vector(list(sources), 2, 1), Phi=parse_field("0", 2), S=S, T=1.0, Mbar=2.0)


class ControlSignalTests(SimpleTestCase):

    def test_constant_signal(self):
        u = ControlSignal.constant(T, 4, 1.0)
        self.assertEqual(u.N, 4)
        self.assertEqual(u.m, 1)
        np.testing.assert_array_equal(u.at(0.2), [1.0])
        np.testing.assert_array_equal(u.at(T), [1.0])
        self.assertTrue(u.lies_in([-1.0], [1.0]))
        self.assertFalse(u.lies_in([-1.0], [0.5]))

    def test_piecewise_lookup(self):
        u = ControlSignal([0.0, 1.0, 2.0], [[-1.0], [1.0]])
        np.testing.assert_array_equal(u.at(0.5), [-1.0])
        np.testing.assert_array_equal(u.at(1.0), [1.0])
        np.testing.assert_array_equal(u.clip([-0.5], [0.5]).values, [[-0.5], [0.5]])

    def test_empty_horizon(self):
        u = ControlSignal.constant(0.0, 0, 1.0)
        self.assertEqual(u.N, 0)
        np.testing.assert_array_equal(u.at(0.0), [0.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            ControlSignal([0.0, 1.0, 2.0], [[1.0]])


class CatchingUpTests(SimpleTestCase):

    def test_matches_the_closed_form_sweep(self):
        spec = worked_dynamics()
        u = ControlSignal.constant(T, 1, 1.0)
        oracle = integrate_catching_up(spec, START, u, 4000)
        errors = [np.linalg.norm(x - exact_state(t)) for t, x in zip(oracle.grid, oracle.states)]
        self.assertLessEqual(max(errors), 0.01)
        np.testing.assert_allclose(oracle.multipliers[-1], [1.0, 1.0], atol=0.05)

    def test_start_outside_C(self):
        with self.assertRaises(StateOutsideC) as cm:
            integrate_catching_up(worked_dynamics(), [0.0, 1.0, 0.0], ControlSignal.constant(T, 1, 1.0), 10)
        self.assertEqual(cm.exception.exit_code, 1)
        self.assertAlmostEqual(cm.exception.psi_value, 1.0)

    def test_oracle_comparison_needs_matching_grids(self):
        a = Trajectory(np.linspace(0, 1, 3), np.zeros((3, 2)), np.zeros((3, 1)))
        b = Trajectory(np.linspace(0, 1, 4), np.zeros((4, 2)), np.zeros((4, 1)))
        with self.assertRaises(GridMismatch):
            compare_to_oracle(a, b)
        self.assertEqual(compare_to_oracle(a, a), (0.0, 0.0))


class PenalizedTests(SimpleTestCase):

    def setUp(self):
        self.spec = worked_dynamics()
        self.schedule = PenaltySchedule.for_set(self.spec.S, [50, 100, 200], self.spec.Mbar)
        self.u = ControlSignal.constant(T, 50, 1.0)

    def run_level(self, k):
        x0 = shifted_start(self.spec.S, self.schedule, k, START)
        opts = IntegratorOptions(alpha=self.schedule.alpha(k))
        return integrate_penalized(self.spec, self.schedule.gammas[k], x0, self.u, opts)

    def test_converges_to_the_sweep_as_gamma_grows(self):
        errors = []
        for k in range(len(self.schedule)):
            traj = self.run_level(k)
            errors.append(max(np.linalg.norm(x - exact_state(t)) for t, x in zip(traj.grid, traj.states)))
        self.assertEqual(errors, sorted(errors, reverse=True))
        self.assertLessEqual(errors[-1], 0.05)

    def test_stays_in_the_shrunken_sublevel_set(self):
        k = 1
        traj = self.run_level(k)
        gamma = self.schedule.gammas[k]
        tol = 1e-6 * (1.0 + self.schedule.threshold)
        for x in traj.states:
            self.assertLessEqual(psi_gamma_value(self.spec.S, gamma, x), -self.schedule.alpha(k) + tol)
        self.assertLessEqual(traj.multipliers.max(), self.schedule.xi_bound())
        self.assertTrue(np.all(traj.substeps >= 1))
        top, excess = speed_violation(traj, self.schedule.speed_bound())
        self.assertGreater(top, 0.0)
        self.assertEqual(excess, 0.0)

    def test_start_outside_the_smoothed_set(self):
        with self.assertRaises(InvarianceViolation):
            integrate_penalized(self.spec, 100.0, START, self.u)

    def test_rotation_far_from_the_boundary(self):
        spec = rotation_dynamics()
        u = ControlSignal.constant(1.0, 20, 0.0)
        traj = integrate_penalized(spec, 20.0, [1.0, 0.0], u)
        np.testing.assert_allclose(traj.final_state, [math.cos(1.0), -math.sin(1.0)], atol=1e-4)


class TranscriptionTests(SimpleTestCase):

    def test_reverse_sweep_matches_finite_differences(self):
        spec = worked_dynamics()
        schedule = PenaltySchedule.for_set(spec.S, [50], spec.Mbar)
        x0 = shifted_start(spec.S, schedule, 0, START)
        rng = np.random.default_rng(5)
        u = ControlSignal(np.linspace(0.0, T, 11), rng.uniform(-1.0, 1.0, (10, 1)))
        weights = np.array([1.0, 0.0, 1.0])

        def cost(control):
            return float(weights @ integrate_transcribed(spec, 50.0, x0, control).trajectory.final_state)

        path = integrate_transcribed(spec, 50.0, x0, u)
        sweep = transcribed_gradient(path, weights)
        step = 1e-6
        for j in range(u.N):
            up = u.values.copy()
            down = u.values.copy()
            up[j] += step
            down[j] -= step
            fd = (cost(u.with_values(up)) - cost(u.with_values(down))) / (2 * step)
            self.assertAlmostEqual(sweep.grad_u[j, 0], fd, delta=1e-4 * (1.0 + abs(fd)))


class AdjointTests(SimpleTestCase):

    def test_rotation_adjoint(self):
        spec = rotation_dynamics()
        u = ControlSignal.constant(1.0, 20, 0.0)
        traj = integrate_penalized(spec, 20.0, [1.0, 0.0], u)
        path = integrate_adjoint(spec, 20.0, traj, u, None, 1.0, 0.0, None, [1.0, 0.0])
        np.testing.assert_allclose(path.p[0], [math.cos(1.0), math.sin(1.0)], atol=1e-4)
        np.testing.assert_allclose(path.cell_masses, 0.0, atol=1e-12)

    def test_running_cost_forcing(self):
        spec = rotation_dynamics(("0", "0"))
        u = ControlSignal.constant(1.0, 10, 0.0)
        traj = integrate_penalized(spec, 20.0, [1.0, 0.0], u)
        omega = np.tile([1.0, -1.0], (11, 1))
        path = integrate_adjoint(spec, 20.0, traj, u, None, 1.0, 2.0, omega, [0.0, 0.0])
        np.testing.assert_allclose(path.p[0], [2.0, -2.0], atol=1e-6)

    def test_grids_must_agree(self):
        spec = rotation_dynamics()
        traj = integrate_penalized(spec, 20.0, [1.0, 0.0], ControlSignal.constant(1.0, 4, 0.0))
        with self.assertRaises(GridMismatch):
            integrate_adjoint(spec, 20.0, traj, ControlSignal.constant(1.0, 5, 0.0), None, 1.0, 0.0, None, [1.0, 0.0])


class MeasureTests(SimpleTestCase):

    def test_spike_becomes_an_atom(self):
        grid = np.linspace(0.0, 1.0, 101)
        density = np.ones(101)
        density[50] = 1000.0
        (measure,) = accumulate_measures(density[:, None], grid)
        self.assertEqual(len(measure.atoms), 1)
        t, weight = measure.atoms[0]
        self.assertAlmostEqual(t, 0.5)
        self.assertAlmostEqual(weight, 2 * 0.5 * 0.01 * 1001.0)
        np.testing.assert_allclose(measure.density, np.ones(101))
        self.assertAlmostEqual(measure.ac_mass, 1.0)

    def test_smooth_density_has_no_atoms(self):
        # continuous part of the first junction measure on the worked example
        grid = np.linspace(0.0, T, 101)
        density = (12 * grid ** 3 + 24 * grid ** 2 + 3 * grid - 6) / (8 * (4 * grid ** 2 + 1) ** 2)
        (measure,) = accumulate_measures(density[:, None], grid)
        self.assertEqual(measure.atoms, [])

    def test_zero_density(self):
        grid = np.linspace(0.0, 1.0, 5)
        (measure,) = accumulate_measures(np.zeros((5, 1)), grid)
        self.assertEqual(measure.total_variation, 0.0)

    def test_scaling(self):
        measure = AdjointMeasure(np.array([0.0, 1.0]), np.array([1.0, 1.0]), [(0.5, -2.0)])
        scaled = measure.scaled(-0.5)
        self.assertEqual(scaled.atoms, [(0.5, 1.0)])
        self.assertAlmostEqual(scaled.total_mass, 0.5)
        self.assertAlmostEqual(measure.total_variation, 3.0)


class BoundTests(SimpleTestCase):

    def test_velocity_bound_of_a_box_control(self):
        S = sweeping_set(["-x1", "-x2", "x1 + x2 - 2"], 2, eta=0.2, Mbar_psi=1.6)
        spec = DynamicsSpec(f=parse_vector(["u1", "u2"], 2, 2), Phi=parse_field("0", 2), S=S, T=1.0, Mbar=1.6)
        samples = [np.array([0.5, 0.5]), np.array([1.0, 0.2])]
        Mbar = estimate_Mbar(spec, samples, [-1.0, -1.0], [1.0, 1.0], np.random.default_rng(0))
        self.assertAlmostEqual(Mbar, 1.1 * math.sqrt(2.0))

    def test_speed_violation(self):
        traj = Trajectory(np.array([0.0, 0.5, 1.0]), np.array([[0.0], [1.0], [1.5]]), np.zeros((3, 1)))
        self.assertEqual(speed_violation(traj, 1.5), (2.0, 0.5))


@tag("slow")
class FineGridTests(SimpleTestCase):

    def test_penalized_and_catching_up_agree_on_a_common_grid(self):
        spec = worked_dynamics()
        schedule = PenaltySchedule.for_set(spec.S, [400], spec.Mbar)
        u = ControlSignal.constant(T, 200, 1.0)
        x0 = shifted_start(spec.S, schedule, 0, START)
        penalized = integrate_penalized(spec, 400.0, x0, u, IntegratorOptions(alpha=schedule.alpha(0)))
        oracle = integrate_catching_up(spec, START, u, 200)
        sup, l2 = compare_to_oracle(penalized, oracle)
        self.assertLessEqual(sup, 0.05)
        self.assertLessEqual(l2, sup)


@tag("slow")
class MeasureRecoveryTests(SimpleTestCase):

    def test_worked_example_measures_at_gamma_400(self):
        spec = worked_dynamics()
        # x3 lowered by ln(400)/400 keeps xi = 1 along the junction
        x0 = START - [0.0, 0.0, math.log(400.0) / 400.0]
        u = ControlSignal.constant(T, 100, 1.0)
        traj = integrate_penalized(spec, 400.0, x0, u)
        recovered = recover_adjoint(spec, 400.0, traj, u, [0.75, 0.0, 0.0])
        t = traj.grid
        scale = 8 * (4 * t ** 2 + 1) ** 2
        exact = [(12 * t ** 3 + 24 * t ** 2 + 3 * t - 6) / scale, (-12 * t ** 3 + 24 * t ** 2 - 3 * t - 6) / scale]
        for measure, density, reference in zip(recovered.measures, exact, closed_form_certificate(100).nus):
            gap = float(np.trapezoid(np.abs(measure.density - density), t))
            self.assertLessEqual(gap, 0.05 * reference.total_variation)
            self.assertEqual(len(measure.atoms), 1)
            atom_t, weight = measure.atoms[0]
            self.assertEqual(atom_t, T)
            self.assertLessEqual(abs(weight - 3 / 16), 0.2 * 3 / 16)
        np.testing.assert_allclose(recovered.jump, [0.375, 0.0, 0.375], atol=0.05)
        np.testing.assert_array_equal(recovered.p[-1], [0.75, 0.0, 0.0])
