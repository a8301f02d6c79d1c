"""
Direct transcription of the penalized optimal control problem.

Controls are piecewise constant on a uniform grid, the state follows the
implicit Euler transcription of the penalized dynamics, and gradients come
from its exact reverse sweep.  Penalty parameters are visited in increasing
order, each solve warm-starting the next; a terminal constraint is handled by
an augmented Lagrangian outer loop.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .dynamics import (
    AdjointSweep,
    ControlSignal,
    DynamicsSpec,
    IntegratorOptions,
    Trajectory,
    integrate_transcribed,
    recover_adjoint,
    transcribed_gradient,
)
from .exceptions import (
    DegenerateNormalization,
    LineSearchStall,
    TerminalInfeasible,
    UnsupportedSetDescriptor,
)
from .exprcore import ScalarField
from .sweepset import (
    Membership,
    PenaltySchedule,
    SweepingSet,
    level_membership,
    project_onto_C,
    shifted_start,
)

logger = logging.getLogger(__name__)

SET_KINDS = {"point", "sublevel", "all", "affine"}


@dataclass(frozen=True, eq=False)
class SetDescriptor:
    """Endpoint set: a point, all of R^n, an affine hyperplane <a,x> = b, or a sublevel list."""

    kind: str
    point: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    b: float = 0.0
    fields: Tuple[ScalarField, ...] = ()

    def __post_init__(self):
        if self.kind not in SET_KINDS:
            raise UnsupportedSetDescriptor(self.kind)
        if self.point is not None:
            object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        if self.a is not None:
            object.__setattr__(self, "a", np.asarray(self.a, dtype=float))

    def constraint_values(self, x) -> np.ndarray:
        """Affine: <a,x> - b; sublevel: psi_i(x); empty otherwise."""
        if self.kind == "affine":
            return np.array([self.a @ x - self.b])
        if self.kind == "sublevel":
            return np.array([f.value(0.0, x) for f in self.fields])
        return np.zeros(0)

    def constraint_gradients(self, x) -> np.ndarray:
        if self.kind == "affine":
            return self.a[None, :]
        if self.kind == "sublevel":
            return np.array([f.jet(0.0, x, None, 1).grad for f in self.fields])
        return np.zeros((0, len(x)))

    def residual(self, x) -> float:
        values = self.constraint_values(x)
        if not len(values):
            return 0.0
        if self.kind == "affine":
            return float(np.max(np.abs(values)))
        return float(np.max(np.maximum(values, 0.0)))

    def as_sweeping_set(self, n) -> SweepingSet:
        return SweepingSet(psi=tuple(self.fields), n=n)


@dataclass(frozen=True, eq=False)
class SweepingProblem:
    spec: DynamicsSpec
    g: ScalarField
    C0: SetDescriptor
    CT: SetDescriptor
    lo: np.ndarray
    hi: np.ndarray
    T: float
    delta: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.C0.kind not in ("point", "sublevel"):
            raise UnsupportedSetDescriptor(f"C0:{self.C0.kind}")
        if self.CT.kind == "point":
            raise UnsupportedSetDescriptor("CT:point")

    @property
    def n(self):
        return self.spec.n

    @property
    def m(self):
        return self.spec.m

    @property
    def free_endpoint(self):
        return self.CT.kind == "all"

    def endpoint_cost(self, x0, xT, order=1):
        """g(x0, xT) and its gradients with respect to x0 and xT."""
        jet = self.g.jet(0.0, np.concatenate([x0, xT]), None, order)
        if order == 0:
            return jet.val, None, None
        return jet.val, jet.grad[: self.n], jet.grad[self.n: 2 * self.n]


@dataclass
class SolveConfig:
    schedule: PenaltySchedule
    N: int = 100
    beta: float = 1.0
    alpha_prox: float = 0.0
    K_tilde: float = 100.0
    optimizer: str = "lbfgs"
    max_outer: int = 20
    inner_maxiter: int = 300
    gtol: float = 1e-8
    terminal_tol: float = 1e-6
    infeasible_tol: float = 1e-3
    rho0: float = 10.0
    u_ref: Optional[ControlSignal] = None
    integrator: IntegratorOptions = field(default_factory=IntegratorOptions)

    def __post_init__(self):
        if self.N < 16:
            raise ValueError(f"grid size N must be at least 16, got {self.N}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.optimizer not in ("lbfgs", "projected-gradient"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(eq=False)
class SolveResult:
    trajectory: Trajectory
    control: ControlSignal
    objective: float
    log: List[Dict] = field(default_factory=list)
    terminal_residual: float = 0.0
    adjoint: Optional[AdjointSweep] = None
    terminal_grad: Optional[np.ndarray] = None
    multipliers: np.ndarray = None
    gamma: float = 0.0
    x0: np.ndarray = None


def k_tilde_bound(Mbar_l: float, M_g: float, delta: float) -> float:
    """Localization weight 512*Mbar_l*M_g/(5*delta^3)."""
    return 512.0 * Mbar_l * M_g / (5.0 * delta ** 3)


def localization_L(x, center, delta: float) -> float:
    """L = max(|x - center|^2 - delta^2/4, 0)."""
    gap = np.asarray(x, dtype=float) - np.asarray(center, dtype=float)
    return max(float(gap @ gap) - 0.25 * delta ** 2, 0.0)


def _trapezoid_weights(grid):
    steps = np.diff(grid)
    weights = np.zeros(len(grid))
    weights[:-1] += 0.5 * steps
    weights[1:] += 0.5 * steps
    return weights


def _running_terms(prob, traj, center, K_tilde):
    """K_tilde * L values and gradients at the nodes (omega branch of the subdifferential)."""
    N = traj.N
    values = np.zeros(N + 1)
    grads = np.zeros((N + 1, prob.n))
    if center is None or K_tilde == 0.0:
        return values, grads
    for k in range(N + 1):
        gap = traj.states[k] - center[k]
        excess = gap @ gap - 0.25 * prob.delta ** 2
        if excess > 0.0:
            values[k] = K_tilde * excess
            grads[k] = 2.0 * K_tilde * gap
    return values, grads


def objective_J(prob: SweepingProblem, traj: Trajectory, u: ControlSignal, incumbent_u: Optional[ControlSignal] = None,
                anchors=None, *, K_tilde: float = 0.0, alpha_prox: float = 0.0, center=None) -> float:
    """Mayer term + K_tilde * integral of L + alpha_prox * (L1 control distance + anchor distances)."""
    value, _, _ = prob.endpoint_cost(traj.states[0], traj.states[-1], order=0)
    running, _ = _running_terms(prob, traj, center, K_tilde)
    value += float(_trapezoid_weights(traj.grid) @ running)
    if alpha_prox:
        if incumbent_u is not None:
            value += alpha_prox * float(np.sum(np.diff(u.grid)[:, None] * np.abs(u.values - incumbent_u.values)))
        if anchors is not None:
            value += alpha_prox * (np.linalg.norm(traj.states[0] - anchors[0], 1)
                                   + np.linalg.norm(traj.states[-1] - anchors[1], 1))
    return float(value)


# --- augmented objective ---------------------------------------------------

@dataclass
class _Augmentation:
    mu: np.ndarray
    rho: float


def _terminal_penalty(CT: SetDescriptor, xT, aug: _Augmentation):
    """Augmented Lagrangian value and gradient for the terminal set."""
    values = CT.constraint_values(xT)
    if not len(values):
        return 0.0, np.zeros(len(xT)), np.zeros(0)
    grads = CT.constraint_gradients(xT)
    if CT.kind == "affine":
        weights = aug.mu + aug.rho * values
        value = float(aug.mu @ values + 0.5 * aug.rho * values @ values)
    else:
        shifted = np.maximum(values + aug.mu / aug.rho, 0.0)
        weights = aug.rho * shifted
        value = float(0.5 * aug.rho * (shifted @ shifted - (aug.mu / aug.rho) @ (aug.mu / aug.rho)))
    return value, weights @ grads, weights


class _Evaluation:
    """Objective + gradient at a control; the last evaluation is cached."""

    def __init__(self, prob, cfg, spec, gamma, x0, aug, center, incumbent=None):
        self.prob = prob
        self.cfg = cfg
        self.spec = spec
        self.gamma = gamma
        self.x0 = x0
        self.aug = aug
        self.center = center
        self.incumbent = incumbent
        self.grid = np.linspace(0.0, prob.T, cfg.N + 1)
        self.weights = _trapezoid_weights(self.grid)
        self.count = 0
        self._key = None
        self._cache = None

    def control(self, z) -> ControlSignal:
        return ControlSignal(self.grid, np.asarray(z, dtype=float).reshape(self.cfg.N, self.prob.m))

    def run(self, z):
        key = np.asarray(z, dtype=float).tobytes() + self.x0.tobytes()
        if key == self._key:
            return self._cache
        self.count += 1
        u = self.control(z)
        path = integrate_transcribed(self.spec, self.gamma, self.x0, u, self.cfg.integrator)
        traj = path.trajectory
        g_value, g_x0, g_xT = self.prob.endpoint_cost(traj.states[0], traj.states[-1])
        al_value, al_grad, weights = _terminal_penalty(self.prob.CT, traj.states[-1], self.aug)
        running, running_grads = _running_terms(self.prob, traj, self.center, self.cfg.K_tilde)
        value = g_value + al_value + float(self.weights @ running)
        terminal_grad = g_xT + al_grad
        sweep = transcribed_gradient(path, terminal_grad, running_grads, self.weights)
        grad_u = sweep.grad_u
        if self.cfg.alpha_prox and self.incumbent is not None:
            gap = u.values - self.incumbent.values
            steps = np.diff(self.grid)[:, None]
            value += self.cfg.alpha_prox * float(np.sum(steps * np.abs(gap)))
            grad_u = grad_u + self.cfg.alpha_prox * steps * np.sign(gap)
        grad_x0 = sweep.grad_x0 + g_x0
        result = {
            "value": value, "grad": grad_u.ravel(), "grad_x0": grad_x0, "path": path, "sweep": sweep,
            "terminal_grad": terminal_grad, "g_xT": g_xT, "al_weights": weights, "control": u,
        }
        self._key = key
        self._cache = result
        return result

    def __call__(self, z):
        result = self.run(z)
        return result["value"], result["grad"]


def _projected_gradient(evaluation, z0, lo, hi, cfg, gamma):
    z = np.clip(z0, lo, hi)
    value, grad = evaluation(z)
    step = 1.0
    for iteration in range(1, cfg.inner_maxiter + 1):
        stationarity = np.max(np.abs(np.clip(z - grad, lo, hi) - z), initial=0.0)
        if stationarity <= cfg.gtol:
            return z, iteration - 1, "converged"
        while True:
            trial = np.clip(z - step * grad, lo, hi)
            trial_value, trial_grad = evaluation(trial)
            if trial_value <= value + 1e-4 * grad @ (trial - z):
                break
            step *= 0.5
            if step < 1e-14:
                raise LineSearchStall(gamma, iteration)
        z, value, grad = trial, trial_value, trial_grad
        step *= 2.0
    return z, cfg.inner_maxiter, "max-iterations"


def _lbfgs(evaluation, z0, lo, hi, cfg, gamma):
    bounds = list(zip(lo, hi))
    start_value, start_grad = evaluation(z0)
    result = minimize(
        evaluation, z0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": cfg.inner_maxiter, "gtol": cfg.gtol, "ftol": 1e-15},
    )
    z = result.x
    value, grad = evaluation(z)
    stationarity = np.max(np.abs(np.clip(z - grad, lo, hi) - z), initial=0.0)
    if result.status == 2 and value >= start_value and stationarity > 1e3 * cfg.gtol:
        raise LineSearchStall(gamma, int(result.nit))
    status = "converged" if result.success else str(result.message)
    return z, int(result.nit), status


def _resample(u: ControlSignal, N: int, T: float) -> ControlSignal:
    grid = np.linspace(0.0, T, N + 1)
    if u.N == N and np.allclose(u.grid, grid):
        return u
    return ControlSignal(grid, np.array([u.at(t) for t in grid[:-1]]))


def start_state(prob: SweepingProblem, sched: PenaltySchedule, k: int, base) -> np.ndarray:
    """Initial state inside C^gamma_k(k): ``base`` itself or its shift along the interior direction."""
    S = prob.spec.S
    base = np.asarray(base, dtype=float)
    if level_membership(S, sched, k, base) == Membership.IN_CK:
        return base.copy()
    return shifted_start(S, sched, k, base)


def initial_base(prob: SweepingProblem, integrator: IntegratorOptions):
    if prob.C0.kind == "point":
        return prob.C0.point.copy()
    start = prob.C0.point if prob.C0.point is not None else np.zeros(prob.n)
    joint = SweepingSet(psi=tuple(prob.C0.fields) + tuple(prob.spec.S.psi), n=prob.n)
    return project_onto_C(joint, start, integrator.projection_tol, integrator.projection_max_iters)


def _improve_start(prob, evaluation, z, cfg, sched, k):
    """One projected-gradient step on x(0) over C0 intersect C (sublevel C0 only)."""
    result = evaluation.run(z)
    joint = SweepingSet(psi=tuple(prob.C0.fields) + tuple(prob.spec.S.psi), n=prob.n)
    x0 = evaluation.x0
    value = result["value"]
    step = 1.0
    while step > 1e-10:
        candidate = project_onto_C(joint, x0 - step * result["grad_x0"],
                                   cfg.integrator.projection_tol, cfg.integrator.projection_max_iters)
        candidate = start_state(prob, sched, k, candidate)
        evaluation.x0 = candidate
        if evaluation.run(z)["value"] < value - 1e-12:
            return True
        step *= 0.5
    evaluation.x0 = x0
    return False


def solve(prob: SweepingProblem, cfg: SolveConfig, u_init: ControlSignal) -> SolveResult:
    if not u_init.lies_in(prob.lo, prob.hi, 1e-12):
        raise ValueError("initial control leaves the control box U")
    sched = cfg.schedule
    spec = replace(prob.spec, beta=cfg.beta, u_ref=cfg.u_ref)
    u = _resample(u_init, cfg.N, prob.T)
    lo = np.tile(prob.lo, cfg.N)
    hi = np.tile(prob.hi, cfg.N)
    z = u.values.ravel().copy()
    constraint_count = len(prob.CT.constraint_values(np.zeros(prob.n)))
    aug = _Augmentation(mu=np.zeros(constraint_count), rho=cfg.rho0)
    base = initial_base(prob, cfg.integrator)
    center = None
    incumbent = None
    log = []
    evaluation = None
    optimizer = _lbfgs if cfg.optimizer == "lbfgs" else _projected_gradient
    for k, gamma in enumerate(sched.gammas):
        x0 = start_state(prob, sched, k, base)
        evaluation = _Evaluation(prob, cfg, spec, gamma, x0, aug, center, incumbent)
        previous = math.inf
        iterations = 0
        outer = 0
        status = "converged"
        for outer in range(1, (cfg.max_outer if constraint_count else 1) + 1):
            z, nit, status = optimizer(evaluation, z, lo, hi, cfg, gamma)
            iterations += nit
            if prob.C0.kind == "sublevel" and _improve_start(prob, evaluation, z, cfg, sched, k):
                z, nit, status = optimizer(evaluation, z, lo, hi, cfg, gamma)
                iterations += nit
            xT = evaluation.run(z)["path"].trajectory.final_state
            residual = prob.CT.residual(xT)
            logger.debug("gamma=%g outer=%d residual=%.3e rho=%g", gamma, outer, residual, aug.rho)
            if not constraint_count or residual <= cfg.terminal_tol:
                break
            values = prob.CT.constraint_values(xT)
            if prob.CT.kind == "affine":
                aug.mu = aug.mu + aug.rho * values
            else:
                aug.mu = np.maximum(aug.mu + aug.rho * values, 0.0)
            if residual > 0.25 * previous:
                aug.rho *= 2.0
            previous = residual
        run = evaluation.run(z)
        traj = run["path"].trajectory
        u = run["control"]
        residual = prob.CT.residual(traj.final_state)
        J = objective_J(prob, traj, u, K_tilde=cfg.K_tilde, center=center)
        log.append({
            "gamma": float(gamma), "J": J, "terminal_residual": residual, "iterations": iterations,
            "outer": outer, "evaluations": evaluation.count, "status": status,
        })
        logger.info("gamma=%g J=%.6g residual=%.3e iterations=%d outer=%d", gamma, J, residual, iterations, outer)
        if constraint_count and residual > cfg.infeasible_tol:
            raise TerminalInfeasible(residual)
        base = traj.states[0] if prob.C0.kind == "sublevel" else base
        center = traj.states.copy()
        incumbent = u

    run = evaluation.run(z)
    traj = run["path"].trajectory
    multipliers = aug.mu + aug.rho * prob.CT.constraint_values(traj.final_state) if constraint_count else np.zeros(0)
    if prob.CT.kind == "sublevel":
        multipliers = np.maximum(multipliers, 0.0)
    return SolveResult(
        trajectory=traj,
        control=run["control"],
        objective=log[-1]["J"],
        log=log,
        terminal_residual=log[-1]["terminal_residual"],
        adjoint=run["sweep"],
        terminal_grad=run["terminal_grad"],
        multipliers=multipliers,
        gamma=float(sched.gammas[-1]),
        x0=traj.states[0].copy(),
    )


def gradient_check(prob: SweepingProblem, cfg: SolveConfig, u: ControlSignal, direction: ControlSignal) -> Tuple[float, float]:
    """Adjoint directional derivative against a central difference at the first schedule entry."""
    spec = replace(prob.spec, beta=cfg.beta, u_ref=cfg.u_ref)
    sched = cfg.schedule
    x0 = start_state(prob, sched, 0, initial_base(prob, cfg.integrator))
    count = len(prob.CT.constraint_values(np.zeros(prob.n)))
    evaluation = _Evaluation(prob, cfg, spec, sched.gammas[0], x0, _Augmentation(np.zeros(count), cfg.rho0), None)
    z = _resample(u, cfg.N, prob.T).values.ravel()
    d = _resample(direction, cfg.N, prob.T).values.ravel()
    _, grad = evaluation(z)
    adjoint = float(grad @ d)
    eps = 1e-5 * (1.0 + np.linalg.norm(z))
    forward, _ = evaluation(z + eps * d)
    backward, _ = evaluation(z - eps * d)
    return adjoint, float((forward - backward) / (2.0 * eps))


# --- certificate -----------------------------------------------------------

def penalty_active_tol(gamma: float, xi_floor: float = 1e-6) -> float:
    """Depth below which gamma*exp(gamma*psi) stays under ``xi_floor``."""
    return (math.log(gamma) + math.log(1.0 / xi_floor)) / gamma


def normalize_certificate(cert, free_endpoint: bool = False):
    """Scale p, the measures and lambda so that |p(T)| + lambda = 1, or lambda = 1 for a free endpoint."""
    if free_endpoint:
        if cert.lam <= 0.0:
            raise DegenerateNormalization(cert.lam)
        return cert.scaled(1.0 / cert.lam)
    magnitude = float(np.linalg.norm(cert.p[-1]) + cert.lam)
    if magnitude < 1e-12:
        raise DegenerateNormalization(magnitude)
    return cert.scaled(1.0 / magnitude)


def extract_certificate(result: SolveResult, prob: SweepingProblem, cfg: SolveConfig, atom_thresh: float = 0.05,
                        spike_factor: float = 10.0):
    from .pmpverify import PmpCertificate

    traj = result.trajectory
    grid = traj.grid
    N = traj.N
    gamma = result.gamma
    recovered = recover_adjoint(prob.spec, gamma, traj, result.control, -result.terminal_grad,
                                cfg.u_ref, cfg.beta, atom_thresh, spike_factor, cfg.integrator)
    jump = recovered.jump
    cert = PmpCertificate(
        grid=grid.copy(), x=traj.states.copy(), u=result.control,
        p=recovered.p, p_jumps=[(float(grid[N]), jump)] if np.linalg.norm(jump) > 0 else [],
        nus=recovered.measures, xis=traj.multipliers.copy(), lam=1.0,
        active_tol=penalty_active_tol(gamma),
    )
    return normalize_certificate(cert, prob.free_endpoint)
