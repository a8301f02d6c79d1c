"""
Integrators for the sweeping dynamics.

The penalized system replaces the normal cone of C by the exponential force
sum_i gamma*exp(gamma*psi_i(x))*grad psi_i(x).  It is integrated with an
adaptive two-stage Rosenbrock-W scheme that treats only the penalty Jacobian
implicitly.  The projection (catching-up) scheme integrates the sweeping
process itself and serves as the reference solution.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .exceptions import (
    GridMismatch,
    InvarianceViolation,
    NoConvergence,
    ProjectionFailure,
    StateOutsideC,
    StepFailure,
)
from .exprcore import ScalarField, VectorField, eval_with_derivatives
from .sweepset import SweepingSet, project_with_multipliers, psi_gamma_value, psi_max

logger = logging.getLogger(__name__)

# exp() arguments are capped here; penalties beyond this are already rejected steps
EXP_CAP = 700.0


# --- signals ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Piecewise-constant control: ``values[j]`` acts on [grid[j], grid[j+1])."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if grid.ndim != 1 or len(grid) != len(values) + 1:
            raise ValueError(f"control grid has {len(grid)} nodes for {len(values)} values")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, T: float, N: int, value, m: int = 1) -> "ControlSignal":
        grid = np.linspace(0.0, T, N + 1)
        values = np.broadcast_to(np.asarray(value, dtype=float), (N, m)).copy()
        return cls(grid, values)

    @property
    def N(self):
        return len(self.values)

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def T(self):
        return float(self.grid[-1])

    def at(self, t) -> np.ndarray:
        if self.N == 0:
            return np.zeros(self.m)
        j = int(np.searchsorted(self.grid, t, side="right")) - 1
        return self.values[min(max(j, 0), self.N - 1)]

    def lies_in(self, lo, hi, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= np.asarray(lo) - tol) and np.all(self.values <= np.asarray(hi) + tol))

    def clip(self, lo, hi) -> "ControlSignal":
        return ControlSignal(self.grid, np.clip(self.values, lo, hi))

    def with_values(self, values) -> "ControlSignal":
        return ControlSignal(self.grid, np.asarray(values, dtype=float).reshape(self.values.shape))


@dataclass(eq=False)
class Trajectory:
    grid: np.ndarray
    states: np.ndarray
    multipliers: np.ndarray
    substeps: np.ndarray = None
    max_penalty: np.ndarray = None
    gamma: Optional[float] = None
    kind: str = "penalized"

    def __post_init__(self):
        cells = max(len(self.grid) - 1, 0)
        if self.substeps is None:
            self.substeps = np.zeros(cells, dtype=int)
        if self.max_penalty is None:
            self.max_penalty = np.zeros(cells)

    @property
    def N(self):
        return len(self.grid) - 1

    @property
    def final_state(self):
        return self.states[-1]

    def state_at(self, t) -> np.ndarray:
        """Linear interpolation of the sampled path."""
        return np.array([np.interp(t, self.grid, self.states[:, i]) for i in range(self.states.shape[1])])


# --- dynamics --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DynamicsSpec:
    f: VectorField
    Phi: ScalarField
    S: SweepingSet
    T: float
    Mbar: float
    beta: float = 1.0
    u_ref: Optional[ControlSignal] = None

    @property
    def n(self):
        return self.S.n

    @property
    def m(self):
        return self.f.m

    @property
    def r(self):
        return self.S.r

    def _blend(self):
        return self.beta < 1.0 and self.u_ref is not None

    def field(self, t, x, u) -> np.ndarray:
        """f_Phi = f^beta - grad Phi, where f^beta blends in the reference control."""
        value = self.f.value(t, x, u)
        if self._blend():
            value = (1.0 - self.beta) * self.f.value(t, x, self.u_ref.at(t)) + self.beta * value
        _, grad_phi, _ = eval_with_derivatives(self.Phi, t, x, None, 1)
        return value - grad_phi

    def field_jacobians(self, t, x, u):
        value, jac_x, jac_u = self.f.jacobians(t, x, u)
        if self._blend():
            ref_value, ref_x, _ = self.f.jacobians(t, x, self.u_ref.at(t))
            value = (1.0 - self.beta) * ref_value + self.beta * value
            jac_x = (1.0 - self.beta) * ref_x + self.beta * jac_x
            jac_u = self.beta * jac_u
        _, grad_phi, hess_phi = eval_with_derivatives(self.Phi, t, x, None, 2)
        return value - grad_phi, jac_x - hess_phi, jac_u

    def penalty(self, gamma: float, x, order: int = 1):
        """Return (xi, force, d force/dx) with xi_i = gamma*exp(gamma*psi_i(x))."""
        values, grads, hessians = self.S.evaluate(x, order=max(order, 1))
        xi = gamma * np.exp(np.minimum(gamma * values, EXP_CAP))
        force = xi @ grads
        if order < 2:
            return xi, force, None
        jac = np.einsum("i,ij,ik->jk", gamma * xi, grads, grads) + np.tensordot(xi, hessians, axes=1)
        return xi, force, jac

    def flow(self, gamma, t, x, u) -> np.ndarray:
        _, force, _ = self.penalty(gamma, x, 1)
        return self.field(t, x, u) - force


@dataclass
class IntegratorOptions:
    atol: float = 1e-8
    rtol: float = 1e-6
    h_min_factor: float = 1e-9
    inv_tol_factor: float = 1e-6
    # invariance level -alpha_k asserted when the start lies in C^gamma(k)
    alpha: Optional[float] = None
    newton_tol: float = 1e-11
    max_newton: int = 50
    projection_tol: float = 1e-10
    projection_max_iters: int = 50


# --- Rosenbrock-W (ROS2) ---------------------------------------------------

_G = 1.0 + 1.0 / math.sqrt(2.0)
_A21 = 1.0 / _G
_C21 = -2.0 / _G
_M = (3.0 / (2.0 * _G), 1.0 / (2.0 * _G))
_E = (1.0 / (2.0 * _G), 1.0 / (2.0 * _G))
_ELO = 2.0
FAC_MIN, FAC_MAX, FAC_SAFE = 0.2, 6.0, 0.9


@dataclass
class StepStats:
    accepted: int = 0
    rejected: int = 0


def ros2_integrate(rhs, jac, t0, t1, y0, opts: IntegratorOptions, h=None, h_min=1e-12, stats=None):
    """
    Integrate y' = rhs(t, y) from t0 to t1 (either direction) with the
    L-stable two-stage Rosenbrock-W method.

    ``jac`` only needs to cover the stiff part. Returns (y(t1), suggested h).
    """
    stats = stats if stats is not None else StepStats()
    y = np.array(y0, dtype=float)
    span = t1 - t0
    if span == 0.0:
        return y, h
    direction = 1.0 if span > 0 else -1.0
    h = abs(span) if not h else min(abs(h), abs(span))
    t = t0
    eye = np.eye(len(y))
    reject_last = False
    while direction * (t1 - t) > 1e-14 * max(1.0, abs(t1)):
        h = min(h, abs(t1 - t))
        f0 = rhs(t, y)
        j0 = jac(t, y)
        while True:
            step = direction * h
            try:
                lu = lu_factor(eye / (step * _G) - j0)
                k1 = lu_solve(lu, f0)
                k2 = lu_solve(lu, rhs(t + step, y + _A21 * k1) + (_C21 / step) * k1)
                y_new = y + _M[0] * k1 + _M[1] * k2
                scale = opts.atol + opts.rtol * np.maximum(np.abs(y), np.abs(y_new))
                err = max(math.sqrt(np.mean(((_E[0] * k1 + _E[1] * k2) / scale) ** 2)), 1e-10)
            except (ValueError, np.linalg.LinAlgError):
                err = math.inf
            if not math.isfinite(err):
                err = math.inf
            fac = min(FAC_MAX, max(FAC_MIN, FAC_SAFE / err ** (1.0 / _ELO)))
            if err <= 1.0:
                t += step
                y = y_new
                stats.accepted += 1
                h_next = h * fac
                if reject_last:
                    h_next = min(h_next, h)
                reject_last = False
                h = h_next
                break
            stats.rejected += 1
            reject_last = True
            logger.debug("ros2 step rejected at t=%.9g h=%.3e err=%.3e", t, h, err)
            h *= fac
            if h < h_min:
                raise StepFailure(t, h)
    return y, h


# --- penalized system ------------------------------------------------------

def integrate_penalized(spec: DynamicsSpec, gamma: float, x0, u: ControlSignal,
                        opts: Optional[IntegratorOptions] = None) -> Trajectory:
    opts = opts or IntegratorOptions()
    S = spec.S
    x0 = np.asarray(x0, dtype=float)
    inv_tol = opts.inv_tol_factor * (1.0 + 2.0 * spec.Mbar / S.eta)
    start = psi_gamma_value(S, gamma, x0)
    if start > inv_tol:
        raise InvarianceViolation(float(u.grid[0]), start, 0.0)
    bound = 0.0
    if opts.alpha is not None and start <= -opts.alpha + inv_tol:
        bound = -opts.alpha

    N = u.N
    states = np.zeros((N + 1, spec.n))
    xis = np.zeros((N + 1, spec.r))
    substeps = np.zeros(N, dtype=int)
    max_penalty = np.zeros(N)
    states[0] = x0
    xis[0] = spec.penalty(gamma, x0, 1)[0]
    h_min = opts.h_min_factor * max(spec.T, 1e-300)
    h = None
    for j in range(N):
        control = u.values[j]
        peak = [0.0]

        def rhs(t, x):
            _, force, _ = spec.penalty(gamma, x, 1)
            peak[0] = max(peak[0], float(np.linalg.norm(force)))
            return spec.field(t, x, control) - force

        def jac(t, x):
            return -spec.penalty(gamma, x, 2)[2]

        stats = StepStats()
        states[j + 1], h = ros2_integrate(rhs, jac, u.grid[j], u.grid[j + 1], states[j], opts, h, h_min, stats)
        substeps[j] = stats.accepted
        max_penalty[j] = peak[0]
        xis[j + 1] = spec.penalty(gamma, states[j + 1], 1)[0]
        value = psi_gamma_value(S, gamma, states[j + 1])
        if value > bound + inv_tol:
            raise InvarianceViolation(float(u.grid[j + 1]), value, bound)
    logger.debug("penalized run gamma=%g: %d substeps, max xi %.4g", gamma, substeps.sum(), xis.max(initial=0.0))
    return Trajectory(u.grid.copy(), states, xis, substeps, max_penalty, gamma, "penalized")


# --- implicit Euler transcription ------------------------------------------

@dataclass(eq=False)
class Transcription:
    """Implicit Euler path with the linearizations F_x, F_u taken at (x_{j+1}, u_j)."""

    trajectory: Trajectory
    jac_x: np.ndarray
    jac_u: np.ndarray
    gamma: float


def _implicit_euler_step(spec, gamma, t, x_prev, control, h, opts):
    eye = np.eye(spec.n)
    y = x_prev.copy()

    def evaluate(y):
        value, jac_x, jac_u = spec.field_jacobians(t, y, control)
        xi, force, pen_jac = spec.penalty(gamma, y, 2)
        residual = y - x_prev - h * (value - force)
        return residual, jac_x - pen_jac, jac_u, xi

    residual, jac_x, jac_u, xi = evaluate(y)
    scale = 1.0 + np.linalg.norm(x_prev)
    for _ in range(opts.max_newton):
        norm = np.linalg.norm(residual)
        if norm <= opts.newton_tol * scale:
            return y, jac_x, jac_u, xi
        step = np.linalg.solve(eye - h * jac_x, -residual)
        s = 1.0
        while True:
            trial = evaluate(y + s * step)
            if np.linalg.norm(trial[0]) <= (1.0 - 1e-4 * s) * norm:
                break
            s *= 0.5
            if s < 1e-10:
                break
        y = y + s * step
        residual, jac_x, jac_u, xi = trial
        if np.linalg.norm(s * step) <= 1e-14 * scale:
            return y, jac_x, jac_u, xi
    raise StepFailure(t, h)


def integrate_transcribed(spec: DynamicsSpec, gamma: float, x0, u: ControlSignal,
                          opts: Optional[IntegratorOptions] = None) -> Transcription:
    """Fixed-step implicit Euler on the control grid: x_{j+1} = x_j + h F(t_{j+1}, x_{j+1}, u_j)."""
    opts = opts or IntegratorOptions()
    N, n = u.N, spec.n
    states = np.zeros((N + 1, n))
    xis = np.zeros((N + 1, spec.r))
    jac_x = np.zeros((N, n, n))
    jac_u = np.zeros((N, n, spec.m))
    states[0] = np.asarray(x0, dtype=float)
    xis[0] = spec.penalty(gamma, states[0], 1)[0]
    for j in range(N):
        h = u.grid[j + 1] - u.grid[j]
        states[j + 1], jac_x[j], jac_u[j], xis[j + 1] = _implicit_euler_step(
            spec, gamma, u.grid[j + 1], states[j], u.values[j], h, opts
        )
    trajectory = Trajectory(u.grid.copy(), states, xis, np.ones(N, dtype=int), None, gamma, "transcribed")
    return Transcription(trajectory, jac_x, jac_u, gamma)


@dataclass(eq=False)
class AdjointSweep:
    nodes: np.ndarray  # nu_1..nu_N at rows 1..N, row 0 holds d/dx0 of the running part
    grad_u: np.ndarray
    grad_x0: np.ndarray


def transcribed_gradient(path: Transcription, terminal_grad, running_grads=None, weights=None) -> AdjointSweep:
    """
    Exact reverse sweep of the implicit Euler transcription.

    ``terminal_grad`` is d/dx_N of the endpoint cost, ``running_grads[k]`` the
    gradient of the running cost at node k with quadrature ``weights[k]``.
    The caller adds d/dx0 of the endpoint cost to ``grad_x0``.
    """
    grid = path.trajectory.grid
    N = len(grid) - 1
    n = path.jac_x.shape[1] if N else len(terminal_grad)
    nodes = np.zeros((N + 1, n))
    if running_grads is None:
        running = np.zeros((N + 1, n))
        weights = np.zeros(N + 1)
    else:
        running = np.asarray(running_grads, dtype=float)
        weights = np.asarray(weights, dtype=float)
    rhs = np.asarray(terminal_grad, dtype=float) + weights[N] * running[N]
    for k in range(N, 0, -1):
        h = grid[k] - grid[k - 1]
        nodes[k] = np.linalg.solve((np.eye(n) - h * path.jac_x[k - 1]).T, rhs)
        rhs = nodes[k] + weights[k - 1] * running[k - 1]
    nodes[0] = rhs
    steps = np.diff(grid)
    grad_u = np.einsum("j,jim,ji->jm", steps, path.jac_u, nodes[1:]) if N else np.zeros((0, path.jac_u.shape[-1]))
    return AdjointSweep(nodes, grad_u, rhs.copy())


# --- catching-up -----------------------------------------------------------

def integrate_catching_up(spec: DynamicsSpec, x0, u: ControlSignal, N_sub: int,
                          opts: Optional[IntegratorOptions] = None) -> Trajectory:
    """Moreau scheme x_{j+1} = proj_C(x_j + h f_Phi(t_j, x_j, u_j)); xi from the KKT weights over h."""
    opts = opts or IntegratorOptions()
    x0 = np.asarray(x0, dtype=float)
    top = psi_max(spec.S, x0)
    if top > opts.projection_tol:
        raise StateOutsideC(top, "catching-up needs an initial state in C")
    t0, T = float(u.grid[0]), float(u.grid[-1])
    grid = np.linspace(t0, T, N_sub + 1)
    states = np.zeros((N_sub + 1, spec.n))
    xis = np.zeros((N_sub + 1, spec.r))
    states[0] = x0
    for j in range(N_sub):
        h = grid[j + 1] - grid[j]
        predictor = states[j] + h * spec.field(grid[j], states[j], u.at(grid[j]))
        try:
            projection = project_with_multipliers(spec.S, predictor, opts.projection_tol, opts.projection_max_iters)
        except NoConvergence as exc:
            raise ProjectionFailure(float(grid[j]), exc) from exc
        states[j + 1] = projection.point
        if h > 0:
            xis[j + 1] = projection.multipliers / h
    return Trajectory(grid, states, xis, np.ones(N_sub, dtype=int), None, None, "catching-up")


def compare_to_oracle(pen: Trajectory, oracle: Trajectory) -> Tuple[float, float]:
    if pen.grid.shape != oracle.grid.shape or not np.allclose(pen.grid, oracle.grid, rtol=0.0, atol=1e-12):
        raise GridMismatch(f"grids differ: {len(pen.grid)} vs {len(oracle.grid)} nodes")
    gaps = np.linalg.norm(pen.states - oracle.states, axis=1)
    sup = float(gaps.max(initial=0.0))
    l2 = float(math.sqrt(np.trapezoid(gaps ** 2, pen.grid))) if len(gaps) > 1 else 0.0
    return sup, l2


# --- adjoint ---------------------------------------------------------------

@dataclass(eq=False)
class AdjointPath:
    grid: np.ndarray
    p: np.ndarray
    densities: np.ndarray
    cell_masses: np.ndarray


def _coefficient_matrix(spec, gamma, t, x, u, u_ref, beta):
    """A(t) with p' = -A^T p: blended df/dx minus Phi and penalty curvature."""
    _, jac_x, _ = spec.f.jacobians(t, x, u)
    if u_ref is not None and beta < 1.0:
        _, ref_x, _ = spec.f.jacobians(t, x, u_ref)
        jac_x = (1.0 - beta) * ref_x + beta * jac_x
    _, _, hess_phi = eval_with_derivatives(spec.Phi, t, x, None, 2)
    xi, _, pen_jac = spec.penalty(gamma, x, 2)
    return jac_x - hess_phi - pen_jac, xi


def integrate_adjoint(spec: DynamicsSpec, gamma: float, traj: Trajectory, u: ControlSignal,
                      u_ref: Optional[ControlSignal], beta: float, lam: float, omega, pT,
                      opts: Optional[IntegratorOptions] = None) -> AdjointPath:
    """
    Backward integration of p' = -A(t)^T p - lam*omega(t) from p(T) = pT.

    Also integrates the densities gamma*xi_i*<grad psi_i(x), p> over every
    cell, so atoms narrower than a cell keep their mass.
    """
    opts = opts or IntegratorOptions()
    if len(traj.grid) != len(u.grid):
        raise GridMismatch("adjoint control and trajectory grids differ")
    n, r, N = spec.n, spec.r, traj.N
    grid = traj.grid
    omega = np.zeros((N + 1, n)) if omega is None else np.asarray(omega, dtype=float)

    def omega_at(t):
        return np.array([np.interp(t, grid, omega[:, i]) for i in range(n)])

    def density(t, x, p):
        values, grads, _ = spec.S.evaluate(x, order=1)
        xi = gamma * np.exp(np.minimum(gamma * values, EXP_CAP))
        return gamma * xi * (grads @ p), gamma * xi[:, None] * grads

    p = np.zeros((N + 1, n))
    densities = np.zeros((N + 1, r))
    masses = np.zeros((N, r))
    p[N] = np.asarray(pT, dtype=float)
    densities[N] = density(grid[N], traj.states[N], p[N])[0]
    h_min = opts.h_min_factor * max(spec.T, 1e-300)
    h = None
    for j in range(N - 1, -1, -1):
        control = u.values[j]
        reference = None if u_ref is None else u_ref.values[j]

        def system(t, y):
            x = traj.state_at(t)
            A, _ = _coefficient_matrix(spec, gamma, t, x, control, reference, beta)
            rho, drho = density(t, x, y[:n])
            return A, rho, drho, x

        def rhs(t, y):
            A, rho, _, _ = system(t, y)
            return np.concatenate([-A.T @ y[:n] - lam * omega_at(t), rho])

        def jac(t, y):
            A, _, drho, _ = system(t, y)
            full = np.zeros((n + r, n + r))
            full[:n, :n] = -A.T
            full[n:, :n] = drho
            return full

        y0 = np.concatenate([p[j + 1], np.zeros(r)])
        y1, h = ros2_integrate(rhs, jac, grid[j + 1], grid[j], y0, opts, h, h_min)
        p[j] = y1[:n]
        # integrated backwards, so the cell integral carries the opposite sign
        masses[j] = -y1[n:]
        densities[j] = density(grid[j], traj.states[j], p[j])[0]
    return AdjointPath(grid.copy(), p, densities, masses)


# --- measures --------------------------------------------------------------

@dataclass(eq=False)
class AdjointMeasure:
    grid: np.ndarray
    density: np.ndarray
    atoms: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def ac_mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid)) if len(self.grid) > 1 else 0.0

    @property
    def atom_mass(self) -> float:
        return float(sum(w for _, w in self.atoms))

    @property
    def total_mass(self) -> float:
        return self.ac_mass + self.atom_mass

    @property
    def total_variation(self) -> float:
        smooth = float(np.trapezoid(np.abs(self.density), self.grid)) if len(self.grid) > 1 else 0.0
        return smooth + float(sum(abs(w) for _, w in self.atoms))

    def scaled(self, factor: float) -> "AdjointMeasure":
        return AdjointMeasure(self.grid, factor * self.density, [(t, factor * w) for t, w in self.atoms])


def _split_measure(grid, density, masses, atom_thresh, spike_factor):
    variation = float(np.sum(np.abs(masses)))
    if variation == 0.0:
        return AdjointMeasure(grid, np.zeros_like(density), [])
    spike = spike_factor * float(np.median(np.abs(density)))
    peaks = np.maximum(np.abs(density[:-1]), np.abs(density[1:]))
    flagged = (np.abs(masses) > atom_thresh * variation) & (peaks > spike)
    atoms = []
    cleaned = density.astype(float).copy()
    spiky = np.zeros(len(density), dtype=bool)
    j = 0
    while j < len(flagged):
        if not flagged[j]:
            j += 1
            continue
        start = j
        while j < len(flagged) and flagged[j]:
            j += 1
        atoms.append((0.5 * (grid[start] + grid[j]), float(np.sum(masses[start:j]))))
        for node in range(start, j + 1):
            if abs(density[node]) > spike:
                spiky[node] = True
    if spiky.any() and not spiky.all():
        keep = ~spiky
        cleaned[spiky] = np.interp(grid[spiky], grid[keep], density[keep])
    return AdjointMeasure(grid, cleaned, atoms)


def accumulate_measures(nu_densities, grid, cell_masses=None, atom_thresh: float = 0.05,
                        spike_factor: float = 10.0) -> List[AdjointMeasure]:
    """
    Split each density into an absolutely continuous part and atoms.

    Consecutive cells carrying more than ``atom_thresh`` of the total variation
    while the pointwise density exceeds ``spike_factor`` times its median
    collapse into a single atom at the midpoint of their span.
    """
    grid = np.asarray(grid, dtype=float)
    densities = np.atleast_2d(np.asarray(nu_densities, dtype=float))
    if densities.shape[0] != len(grid):
        densities = densities.T
    measures = []
    for i in range(densities.shape[1]):
        rho = densities[:, i]
        if cell_masses is not None:
            masses = np.asarray(cell_masses, dtype=float)[:, i]
        else:
            masses = 0.5 * np.diff(grid) * (rho[:-1] + rho[1:])
        measures.append(_split_measure(grid, rho, masses, atom_thresh, spike_factor))
    return measures


def terminal_atoms(S: SweepingSet, xT, xi_T, pT) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split p(T) at the constraints still pushing at T.

    Returns (left limit, weights) with pT = left + sum_i w_i grad psi_i(xT)
    and <grad psi_i(xT), left> = 0 for every pushing i.
    """
    pT = np.asarray(pT, dtype=float)
    xi_T = np.asarray(xi_T, dtype=float)
    _, grads, _ = S.evaluate(xT, order=1)
    weights = np.zeros(S.r)
    top = float(np.max(xi_T)) if len(xi_T) else 0.0
    pushing = [i for i in range(S.r) if top > 0.0 and xi_T[i] >= 1e-3 * top]
    if pushing and np.linalg.norm(pT) > 0:
        coefficients, *_ = np.linalg.lstsq(grads[pushing].T, pT, rcond=None)
        weights[pushing] = coefficients
    return pT - weights @ grads, weights


@dataclass(eq=False)
class RecoveredAdjoint:
    p: np.ndarray  # p[N] is the right limit at T
    jump: np.ndarray
    measures: List[AdjointMeasure]


def recover_adjoint(spec: DynamicsSpec, gamma: float, traj: Trajectory, u: ControlSignal, pT,
                    u_ref: Optional[ControlSignal] = None, beta: float = 1.0, atom_thresh: float = 0.05,
                    spike_factor: float = 10.0, opts: Optional[IntegratorOptions] = None) -> RecoveredAdjoint:
    """Adjoint arc and measures along a penalized path, with the terminal layer collapsed into atoms at T."""
    N = traj.N
    left, weights = terminal_atoms(spec.S, traj.states[N], traj.multipliers[N], pT)
    path = integrate_adjoint(spec, gamma, traj, u, u_ref, beta, 1.0, None, left, opts)
    measures = accumulate_measures(path.densities, path.grid, path.cell_masses, atom_thresh, spike_factor)
    for i, weight in enumerate(weights):
        if weight != 0.0:
            measures[i].atoms.append((float(path.grid[N]), float(weight)))
    p = path.p.copy()
    p[N] = np.asarray(pT, dtype=float)
    return RecoveredAdjoint(p, p[N] - left, measures)


# --- bounds ----------------------------------------------------------------

def estimate_Mbar(spec: DynamicsSpec, samples, lo, hi, rng, controls_per_state: int = 4) -> float:
    """Largest sampled |f - grad Phi| over states in C and controls in U, inflated by 10%."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    largest = 0.0
    for x in samples:
        t = rng.uniform(0.0, spec.T) if spec.T > 0 else 0.0
        controls = [lo, hi] + [rng.uniform(lo, hi) for _ in range(controls_per_state)]
        for control in controls:
            largest = max(largest, float(np.linalg.norm(spec.field(t, x, control))))
    return 1.1 * largest


def speed_violation(traj: Trajectory, bound: float) -> Tuple[float, float]:
    """(largest discrete speed, amount by which it exceeds ``bound``)."""
    if traj.N == 0:
        return 0.0, 0.0
    steps = np.diff(traj.grid)
    speeds = np.linalg.norm(np.diff(traj.states, axis=0), axis=1) / np.where(steps > 0, steps, 1.0)
    top = float(speeds.max())
    return top, max(0.0, top - bound)
