"""
Residual checks of a maximum principle certificate at grid resolution.

A certificate holds the state and control, the adjoint p (right-continuous,
with explicit jumps), the signed adjoint measures, the multiplier paths and
the cost multiplier lambda.  Each condition yields one scalar residual; the
adjoint-side residuals are normalized by the size of p so that they do not
change when (p, nu, lambda) is multiplied by a positive constant.
"""
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import nnls

from .dynamics import AdjointMeasure, ControlSignal, Trajectory
from .exceptions import GridMismatch, UnsupportedSetDescriptor
from .exprcore import eval_with_derivatives

logger = logging.getLogger(__name__)

CONDITIONS = (
    "primal_dynamics",
    "nontriviality",
    "adjoint",
    "slack_a",
    "slack_b",
    "transversality",
    "maximization",
)

CORRUPTIONS = ("xi_shift", "p3_sign_flip", "atoms_dropped", "lambda_change", "control_flip", "pT_perturbation")


@dataclass(eq=False)
class PmpCertificate:
    grid: np.ndarray
    x: np.ndarray
    u: ControlSignal
    p: np.ndarray
    p_jumps: List[Tuple[float, np.ndarray]]
    nus: List[AdjointMeasure]
    xis: np.ndarray
    lam: float
    # depth below which a constraint counts as inactive; None uses the verifier default
    active_tol: Optional[float] = None

    @property
    def N(self):
        return len(self.grid) - 1

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(self.grid, self.x, self.xis, kind="certificate")

    def jump_nodes(self) -> Dict[int, np.ndarray]:
        nodes = {}
        for t, dp in self.p_jumps:
            k = int(np.argmin(np.abs(self.grid - t)))
            nodes[k] = nodes.get(k, 0.0) + np.asarray(dp, dtype=float)
        return nodes

    def left_limits(self) -> np.ndarray:
        left = self.p.copy()
        for k, dp in self.jump_nodes().items():
            left[k] = left[k] - dp
        return left

    def scaled(self, factor: float) -> "PmpCertificate":
        return replace(
            self,
            p=factor * self.p,
            p_jumps=[(t, factor * np.asarray(dp)) for t, dp in self.p_jumps],
            nus=[nu.scaled(factor) for nu in self.nus],
            lam=factor * self.lam,
        )


@dataclass
class VerifyTolerances:
    primal_dynamics: float = 5e-3
    nontriviality: float = 1e-6
    adjoint: float = 1e-2
    slack_a: float = 1e-6
    slack_b: float = 1e-3
    transversality: float = 1e-6
    maximization: float = 1e-6
    active_tol: float = 1e-6

    def scaled(self, factor: float) -> "VerifyTolerances":
        return replace(self, **{name: getattr(self, name) * factor for name in CONDITIONS})


@dataclass
class ResidualReport:
    residuals: Dict[str, float]
    tolerances: Dict[str, float]
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> Dict[str, bool]:
        return {name: bool(self.residuals[name] <= self.tolerances[name]) for name in CONDITIONS}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> List[str]:
        return [name for name, good in self.passed.items() if not good]

    def to_doc(self) -> Dict:
        return {
            "pass": self.ok,
            "conditions": {
                name: {"residual": self.residuals[name], "tolerance": self.tolerances[name],
                       "pass": self.passed[name]}
                for name in CONDITIONS
            },
            "notes": dict(self.notes),
        }


def _check_grid(cert: PmpCertificate, prob):
    N = cert.N
    if cert.x.shape != (N + 1, prob.n):
        raise GridMismatch(f"state samples have shape {cert.x.shape}, expected {(N + 1, prob.n)}")
    if cert.p.shape != (N + 1, prob.n):
        raise GridMismatch(f"adjoint samples have shape {cert.p.shape}, expected {(N + 1, prob.n)}")
    if cert.xis.shape != (N + 1, prob.spec.r):
        raise GridMismatch(f"multiplier samples have shape {cert.xis.shape}")
    if cert.u.N != N:
        raise GridMismatch(f"control has {cert.u.N} cells for {N} grid cells")
    if len(cert.nus) != prob.spec.r:
        raise GridMismatch(f"{len(cert.nus)} measures for {prob.spec.r} constraints")


def _control_at_node(cert, k):
    return cert.u.values[min(k, cert.N - 1)] if cert.N else np.zeros(cert.u.m)


def _p_scale(cert, left=None) -> float:
    left = cert.left_limits() if left is None else left
    top = float(np.max(np.linalg.norm(np.vstack([left, cert.p]), axis=1), initial=0.0))
    return top if top > 0.0 else 1.0


def check_primal(cert: PmpCertificate, prob) -> float:
    _check_grid(cert, prob)
    spec = prob.spec
    S = spec.S
    violation = 0.0
    for k in range(cert.N + 1):
        violation = max(violation, float(np.max(S.values(cert.x[k]))))
    mismatch = 0.0
    for k in range(1, cert.N):
        t = cert.grid[k]
        slope = (cert.x[k + 1] - cert.x[k - 1]) / (cert.grid[k + 1] - cert.grid[k - 1])
        _, grads, _ = S.evaluate(cert.x[k], order=1)
        rhs = spec.field(t, cert.x[k], _control_at_node(cert, k)) - cert.xis[k] @ grads
        mismatch = max(mismatch, float(np.linalg.norm(slope - rhs)))
    return mismatch + max(violation, 0.0)


def _test_functions(T: float, n: int, seed: int, random_count: int = 16):
    """Polynomials (t/T)^q e_j for q <= 3 and random Gaussian bump combinations, sup-normalized."""
    span = T if T > 0 else 1.0
    tests = []
    for q in range(4):
        for j in range(n):
            tests.append(lambda t, q=q, j=j: np.outer(np.atleast_1d(t / span) ** q, np.eye(n)[j]))
    rng = np.random.default_rng(seed)
    nodes = np.linspace(0.0, T, 257)
    for _ in range(random_count):
        weights = rng.normal(size=(3, n))
        centers = rng.uniform(0.0, T, size=3)
        widths = rng.uniform(0.1, 0.5, size=3) * span

        def bump(t, weights=weights, centers=centers, widths=widths):
            t = np.atleast_1d(t)[:, None]
            return np.exp(-((t - centers) / widths) ** 2) @ weights

        top = float(np.max(np.linalg.norm(bump(nodes), axis=1)))
        tests.append(lambda t, bump=bump, top=top: bump(t) / top)
    return tests


def check_adjoint(cert: PmpCertificate, prob, seed: int = 0) -> float:
    """
    Weak form of dp = (theta - zeta^T) p dt + sum xi_i vartheta_i p dt + sum grad psi_i dnu_i
    against a dictionary of test functions.
    """
    _check_grid(cert, prob)
    spec = prob.spec
    S = spec.S
    N, n, r = cert.N, prob.n, S.r
    if N == 0:
        return 0.0
    grid = cert.grid
    left = cert.left_limits()
    integrand = np.zeros((N + 1, n))
    grads = np.zeros((N + 1, r, n))
    for k in range(N + 1):
        t, x = grid[k], cert.x[k]
        _, zeta, _ = spec.f.jacobians(t, x, _control_at_node(cert, k))
        _, _, theta = eval_with_derivatives(spec.Phi, t, x, None, 2)
        _, grads[k], hessians = S.evaluate(x, order=2)
        curvature = theta - zeta.T + np.tensordot(cert.xis[k], hessians, axes=1)
        integrand[k] = curvature @ left[k]
    steps = np.diff(grid)
    mids = 0.5 * (grid[:-1] + grid[1:])
    increments = left[1:] - cert.p[:-1]
    smooth = 0.5 * steps[:, None] * (integrand[:-1] + integrand[1:])
    mid_grads = 0.5 * (grads[:-1] + grads[1:])
    measure_cells = np.zeros((N, n))
    atom_terms = []
    for i, nu in enumerate(cert.nus):
        masses = 0.5 * steps * (nu.density[:-1] + nu.density[1:])
        measure_cells += masses[:, None] * mid_grads[:, i, :]
        for t_atom, weight in nu.atoms:
            x_atom = np.array([np.interp(t_atom, grid, cert.x[:, c]) for c in range(n)])
            _, atom_grads, _ = S.evaluate(x_atom, order=1)
            atom_terms.append((t_atom, weight * atom_grads[i]))
    jumps = [(t, np.asarray(dp, dtype=float)) for t, dp in cert.p_jumps]
    worst = 0.0
    for z in _test_functions(grid[-1] - grid[0], n, seed):
        z_mid = z(mids)
        lhs = float(np.sum(z_mid * increments))
        lhs += sum(float(z(t)[0] @ dp) for t, dp in jumps)
        rhs = float(np.sum(z_mid * (smooth + measure_cells)))
        rhs += sum(float(z(t)[0] @ vec) for t, vec in atom_terms)
        worst = max(worst, abs(lhs - rhs))
    variation = float(np.sum(np.linalg.norm(increments, axis=1)))
    variation += sum(float(np.linalg.norm(dp)) for _, dp in jumps)
    measure_variation = sum(nu.total_variation for nu in cert.nus)
    scale = max(variation, float(np.max(np.linalg.norm(left, axis=1))), measure_variation)
    return worst / scale if scale > 0.0 else worst


def check_slackness(cert: PmpCertificate, prob, active_tol: float = 1e-6) -> Tuple[float, float]:
    _check_grid(cert, prob)
    S = prob.spec.S
    depth = cert.active_tol if cert.active_tol is not None else active_tol
    left = cert.left_limits()
    res_a = res_b = 0.0
    for k in range(cert.N + 1):
        values, grads, _ = S.evaluate(cert.x[k], order=1)
        inactive = values < -depth
        if inactive.any():
            res_a = max(res_a, float(np.max(cert.xis[k][inactive])))
        res_b = max(res_b, float(np.max(np.abs(cert.xis[k] * (grads @ left[k])))))
    return res_a, res_b / _p_scale(cert, left)


def _control_samples(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    m = len(lo)
    if m <= 2:
        axes = [np.linspace(a, b, 11 if m == 1 else 7) for a, b in zip(lo, hi)]
        return np.array(list(itertools.product(*axes)))
    vertices = np.array(list(itertools.product(*zip(lo, hi)))) if m <= 6 else np.zeros((0, m))
    rng = np.random.default_rng(m)
    extra = rng.uniform(lo, hi, size=(32, m))
    return np.vstack([vertices, extra, 0.5 * (lo + hi)])


def _normal_distance(descriptor, x, v, active_tol) -> float:
    """Distance from v to the normal cone of the endpoint set at x."""
    kind = descriptor.kind
    if kind == "point":
        return 0.0
    if kind == "all":
        return float(np.linalg.norm(v))
    if kind == "affine":
        a = descriptor.a
        return float(np.linalg.norm(v - (a @ v) / (a @ a) * a))
    if kind == "sublevel":
        values = descriptor.constraint_values(x)
        grads = descriptor.constraint_gradients(x)
        active = values >= -active_tol
        if not active.any():
            return float(np.linalg.norm(v))
        _, misfit = nnls(grads[active].T, v)
        return float(misfit)
    raise UnsupportedSetDescriptor(kind)


def check_transversality_and_max(cert: PmpCertificate, prob, active_tol: float = 1e-6) -> Tuple[float, float, float]:
    _check_grid(cert, prob)
    N = cert.N
    left = cert.left_limits()
    scale = _p_scale(cert, left)
    _, g_x0, g_xT = prob.endpoint_cost(cert.x[0], cert.x[N])
    start = _normal_distance(prob.C0, cert.x[0], cert.p[0] - cert.lam * g_x0, active_tol)
    end = _normal_distance(prob.CT, cert.x[N], -cert.p[N] - cert.lam * g_xT, active_tol)
    res_tv = float(np.hypot(start, end)) / max(cert.lam, scale)

    samples = _control_samples(prob.lo, prob.hi)
    jump_nodes = cert.jump_nodes()
    gap = 0.0
    for k in range(N):
        if k in jump_nodes:
            continue
        t, x, p = cert.grid[k], cert.x[k], left[k]
        best = max(float(prob.spec.f.value(t, x, u) @ p) for u in samples)
        gap = max(gap, best - float(prob.spec.f.value(t, x, cert.u.values[k]) @ p))
    res_max = gap / scale

    if prob.free_endpoint:
        res_nontriv = abs(cert.lam - 1.0)
    else:
        res_nontriv = abs(float(np.linalg.norm(cert.p[N])) + cert.lam - 1.0)
    return res_tv, res_max, res_nontriv


def verify(cert: PmpCertificate, prob, tolerances: Optional[VerifyTolerances] = None, seed: int = 0) -> ResidualReport:
    tol = tolerances or VerifyTolerances()
    _check_grid(cert, prob)
    res_a, res_b = check_slackness(cert, prob, tol.active_tol)
    res_tv, res_max, res_nontriv = check_transversality_and_max(cert, prob, tol.active_tol)
    residuals = {
        "primal_dynamics": check_primal(cert, prob),
        "nontriviality": res_nontriv,
        "adjoint": check_adjoint(cert, prob, seed),
        "slack_a": res_a,
        "slack_b": res_b,
        "transversality": res_tv,
        "maximization": res_max,
    }
    notes = {}
    if prob.free_endpoint:
        notes["nontriviality"] = "free endpoint: lambda = 1 branch"
    report = ResidualReport(residuals, {name: getattr(tol, name) for name in CONDITIONS}, notes)
    for name in report.failures():
        logger.info("condition %s failed: residual %.3e > %.3e", name, residuals[name], report.tolerances[name])
    return report


def corrupt(cert: PmpCertificate, kind: str, prob=None) -> PmpCertificate:
    """Single-field corruptions the verifier must reject."""
    if kind == "xi_shift":
        xis = cert.xis.copy()
        if prob is not None:
            depth = cert.active_tol if cert.active_tol is not None else 1e-6
            active = np.array([prob.spec.S.values(x)[0] >= -depth for x in cert.x])
        else:
            active = np.ones(len(xis), dtype=bool)
        xis[active, 0] += 0.1
        return replace(cert, xis=xis)
    if kind == "p3_sign_flip":
        c = min(2, cert.p.shape[1] - 1)
        p = cert.p.copy()
        p[:, c] *= -1.0
        jumps = []
        for t, dp in cert.p_jumps:
            dp = np.array(dp, dtype=float)
            dp[c] *= -1.0
            jumps.append((t, dp))
        return replace(cert, p=p, p_jumps=jumps)
    if kind == "atoms_dropped":
        return replace(cert, nus=[AdjointMeasure(nu.grid, nu.density, []) for nu in cert.nus])
    if kind == "lambda_change":
        return replace(cert, lam=2.0 * cert.lam if cert.lam > 0 else 0.5)
    if kind == "control_flip":
        lo = prob.lo if prob is not None else -np.ones(cert.u.m)
        hi = prob.hi if prob is not None else np.ones(cert.u.m)
        return replace(cert, u=cert.u.with_values(lo + hi - cert.u.values))
    if kind == "pT_perturbation":
        p = cert.p.copy()
        c = int(np.argmin(np.abs(p[-1])))
        bump = np.zeros(p.shape[1])
        bump[c] = 0.1
        p[-1] += bump
        t_end = float(cert.grid[-1])
        jumps = [(t, np.asarray(dp, dtype=float)) for t, dp in cert.p_jumps if t != t_end]
        previous = sum((np.asarray(dp, dtype=float) for t, dp in cert.p_jumps if t == t_end), np.zeros(p.shape[1]))
        jumps.append((t_end, previous + bump))
        return replace(cert, p=p, p_jumps=jumps)
    raise ValueError(f"unknown corruption {kind!r}; expected one of {', '.join(CORRUPTIONS)}")


def closed_form_certificate(N: int = 2000) -> PmpCertificate:
    """
    Known extremal of the builtin "paper-6-1" problem: x = (t, 1, -1 - t^2),
    u = 1, xi_1 = xi_2 = 1, lambda = 1/4, adjoint jump (3/8, 0, 3/8) at T = 1/2.
    """
    T = 0.5
    t = np.linspace(0.0, T, N + 1)
    x = np.column_stack([t, np.ones_like(t), -1.0 - t ** 2])
    scale = 4.0 * t ** 2 + 1.0
    p = np.column_stack([3.0 / (4.0 * scale), np.zeros_like(t), -3.0 * t / (2.0 * scale)])
    p[-1] = (0.75, 0.0, 0.0)
    first = (12 * t ** 3 + 24 * t ** 2 + 3 * t - 6) / (8 * scale ** 2)
    second = (-12 * t ** 3 + 24 * t ** 2 - 3 * t - 6) / (8 * scale ** 2)
    nus = [AdjointMeasure(t, first, [(T, 3.0 / 16.0)]), AdjointMeasure(t, second, [(T, 3.0 / 16.0)])]
    return PmpCertificate(
        grid=t,
        x=x,
        u=ControlSignal.constant(T, N, 1.0, 1),
        p=p,
        p_jumps=[(T, np.array([0.375, 0.0, 0.375]))],
        nus=nus,
        xis=np.ones((N + 1, 2)),
        lam=0.25,
    )
