"""
The work behind each ``sweep`` subcommand, shared by the management command
and the Celery tasks.  Functions here take parsed inputs and return
JSON-ready summaries; artifact files are written into a caller-supplied
directory.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import artifacts
from .conf import sweep_setting
from .dynamics import (
    ControlSignal,
    DynamicsSpec,
    IntegratorOptions,
    compare_to_oracle,
    estimate_Mbar,
    integrate_catching_up,
    integrate_penalized,
    speed_violation,
)
from .exceptions import (
    AssumptionFailure,
    EmptyActiveSet,
    NoBoundarySamples,
    SchemaError,
    ScheduleError,
    SweepingError,
)
from .exprcore import eval_with_derivatives
from .ocpsolve import SolveConfig, extract_certificate, initial_base, k_tilde_bound, solve, start_state
from .pmpverify import CORRUPTIONS, VerifyTolerances, corrupt, verify
from .problems import ProblemFile, build_problem, find_interior_point
from .sweepset import (
    PenaltySchedule,
    SweepingSet,
    boundary_samples,
    check_A22,
    check_A23,
    check_A24,
    estimate_bounds,
    interior_samples,
    project_onto_C,
    psi_gamma_value,
    psi_max,
    find_recession_direction,
)

logger = logging.getLogger(__name__)


def integrator_options(**overrides) -> IntegratorOptions:
    options = {
        "atol": sweep_setting("ATOL"),
        "rtol": sweep_setting("RTOL"),
        "h_min_factor": sweep_setting("H_MIN_FACTOR"),
        "inv_tol_factor": sweep_setting("INV_TOL_FACTOR"),
        "projection_max_iters": sweep_setting("PROJECTION_MAX_ITERS"),
    }
    options.update(overrides)
    return IntegratorOptions(**options)


def verify_tolerances(tol_scale: float = 1.0, active_tol: Optional[float] = None) -> VerifyTolerances:
    tolerances = VerifyTolerances(active_tol=sweep_setting("ACTIVE_TOL") if active_tol is None else active_tol)
    return tolerances.scaled(tol_scale)


def _build(problem: ProblemFile, seed: int):
    return build_problem(problem, seed, sweep_setting("BOUNDARY_SAMPLES"), sweep_setting("SAMPLE_BOX"))


def parse_control(spec: str, problem: ProblemFile, N: Optional[int] = None) -> ControlSignal:
    """``const:v1,..,vm`` or ``csv:path``."""
    kind, _, value = spec.partition(":")
    if kind == "const":
        try:
            values = [float(v) for v in value.split(",")]
        except ValueError as exc:
            raise SchemaError(f"control {spec!r}: expected const:v1,...,vm") from exc
        if len(values) == 1 and problem.m > 1:
            values = values * problem.m
        if len(values) != problem.m:
            raise SchemaError(f"control {spec!r}: expected {problem.m} values")
        steps = 0 if problem.T == 0 else (problem.N if N is None else N)
        return ControlSignal.constant(problem.T, steps, values, problem.m)
    if kind == "csv":
        return artifacts.read_control_csv(value, problem.m)
    raise SchemaError(f"control {spec!r}: expected const:... or csv:...")


# --- check -----------------------------------------------------------------

def _reference_trajectory(problem: ProblemFile, S, options: IntegratorOptions):
    """Catching-up path under the midpoint control, started from the projected reference point."""
    x0 = problem.reference_point()
    if psi_max(S, x0) > 0:
        x0 = project_onto_C(S, x0, options.projection_tol, options.projection_max_iters)
    control = problem.midpoint_control()
    parsed = problem.parse()
    spec = DynamicsSpec(parsed["f"], parsed["phi"], S, problem.T, 1.0)
    return integrate_catching_up(spec, x0, control, control.N, options).states


def run_check(problem: ProblemFile, seed: int = 0, trajectory=None) -> Dict:
    """
    Sampled checks of the boundary gradient condition, the gradient coupling
    along a trajectory and boundedness of C.  Returns a report whose
    ``first_failure`` names the first condition that did not hold.
    """
    rng = np.random.default_rng(seed)
    count = sweep_setting("BOUNDARY_SAMPLES")
    box = sweep_setting("SAMPLE_BOX")
    S = problem.sweeping_set()
    reference = problem.reference_point()
    center = find_interior_point(S, reference, rng, box)
    if center is not None:
        boundary = boundary_samples(S, center, rng, count, box)
        interior = interior_samples(S, center, rng, count, box) + [center]
    else:
        boundary = [reference] if abs(psi_max(S, reference)) <= 1e-7 else []
        interior = []
    checks = {}
    estimates = {}

    try:
        eta_hat, witness = check_A22(S, boundary)
    except NoBoundarySamples:
        eta_hat, witness = 0.0, None
    declared = problem.constants.get("eta")
    good = eta_hat > 1e-8 and (declared is None or declared <= eta_hat * (1.0 + 1e-9) + 1e-12)
    checks["boundary_gradients"] = {
        "pass": bool(good),
        "eta_hat": eta_hat,
        "declared_eta": declared,
        "samples": len(boundary),
        "witness": None if witness is None else witness.tolist(),
    }
    estimates["eta_hat"] = eta_hat
    if boundary and eta_hat > 0:
        _, estimates["Mbar_psi"] = estimate_bounds(S, boundary, interior)
    parsed = problem.parse()
    spec = DynamicsSpec(parsed["f"], parsed["phi"], S, problem.T, 1.0)
    estimates["Mbar"] = estimate_Mbar(spec, boundary + interior or [reference], problem.lo, problem.hi, rng)

    coupling = {"pass": True, "b_hat": 0.0, "active_points": 0}
    if trajectory is None and good:
        try:
            trajectory = _reference_trajectory(problem, S, integrator_options())
        except SweepingError as exc:
            coupling["note"] = f"no reference trajectory: {exc}"
    for x in [] if trajectory is None else trajectory:
        try:
            b_hat, _ = check_A23(S, x, 0.0, 1e-7)
        except EmptyActiveSet:
            continue
        coupling["active_points"] += 1
        coupling["b_hat"] = max(coupling["b_hat"], b_hat)
    coupling["pass"] = bool(coupling["b_hat"] < 1.0 - 1e-9)
    if trajectory is None:
        coupling["pass"] = None
    elif not coupling["active_points"]:
        coupling["note"] = "trajectory never touches the boundary"
    checks["gradient_coupling"] = coupling
    estimates["b_hat"] = coupling["b_hat"]

    if problem.ball is not None:
        plain = SweepingSet(psi=parsed["psi"], n=problem.n)
        ball = check_A24(plain, problem.ball["y0"], problem.ball["R0"], rng, count,
                         trajectory=trajectory)
        ball["pass"] = ball.pop("passed")
        checks["ball"] = ball
    else:
        ray_origin = center if center is not None else reference
        direction = find_recession_direction(S, ray_origin, rng)
        bounded = {"pass": True, "unbounded_direction": None}
        if direction is not None:
            reach = box if trajectory is None else max(box, float(np.max(np.linalg.norm(
                np.asarray(trajectory) - ray_origin, axis=1))))
            bounded["unbounded_direction"] = direction.tolist()
            bounded["suggested_ball"] = {"y0": np.asarray(ray_origin).tolist(), "R0": 2.0 * reach}
            logger.warning("C looks unbounded along %s; consider a ball {y0, R0}", np.round(direction, 4).tolist())
        checks["ball"] = bounded

    failed = [name for name, entry in checks.items() if entry.get("pass") is False]
    return artifacts.jsonable({
        "problem": problem.name,
        "seed": seed,
        "checks": checks,
        "estimates": estimates,
        "pass": not failed,
        "first_failure": failed[0] if failed else None,
    })


def raise_for_check(report: Dict):
    if report["first_failure"]:
        name = report["first_failure"]
        entry = report["checks"][name]
        detail = ", ".join(f"{key}={entry[key]}" for key in ("eta_hat", "b_hat") if key in entry)
        raise AssumptionFailure(name, detail)


# --- simulate --------------------------------------------------------------

def _simulate(problem: ProblemFile, gamma: float, control: ControlSignal, seed: int, oracle: bool):
    """Return (summary, penalized trajectory, catching-up trajectory or None)."""
    built = _build(problem, seed)
    prob = built.problem
    S = prob.spec.S
    if not control.lies_in(prob.lo, prob.hi, 1e-12):
        raise SchemaError("control leaves the control box U")
    if gamma <= built.schedule.threshold:
        raise ScheduleError(
            f"gamma={gamma:g} is refused: the penalty schedule requires gamma > 2*Mbar/eta = "
            f"{built.schedule.threshold:.6g}"
        )
    sched = PenaltySchedule.for_set(S, [gamma], built.schedule.Mbar)
    options = integrator_options(alpha=sched.alpha(0))
    base = initial_base(prob, options)
    x0 = start_state(prob, sched, 0, base)
    traj = integrate_penalized(prob.spec, gamma, x0, control, options)
    levels = np.array([psi_gamma_value(S, gamma, x) for x in traj.states])
    top_speed, speed_excess = speed_violation(traj, sched.speed_bound())
    summary = {
        "gamma": gamma,
        "alpha": sched.alpha(0),
        "invariance_margin": float(-sched.alpha(0) - levels.max()),
        "max_xi": float(traj.multipliers.max(initial=0.0)),
        "xi_bound": sched.xi_bound(),
        "max_speed": top_speed,
        "speed_excess": speed_excess,
        "substeps": int(traj.substeps.sum()),
        "final_state": traj.final_state.tolist(),
    }
    reference = None
    if oracle:
        reference = integrate_catching_up(prob.spec, base, control, control.N, options)
        summary["sup_dist"], summary["l2_dist"] = compare_to_oracle(traj, reference)
    logger.info("simulated gamma=%g: max xi %.4g, margin %.3e", gamma, summary["max_xi"], summary["invariance_margin"])
    return summary, traj, reference


def simulate_gamma(problem: ProblemFile, gamma: float, control: ControlSignal, seed: int = 0,
                   oracle: bool = False) -> Dict:
    return _simulate(problem, gamma, control, seed, oracle)[0]


def run_simulate(problem: ProblemFile, gammas: Iterable[float], control: ControlSignal, seed: int = 0,
                 oracle: bool = False, out_dir: Optional[Path] = None, threads: int = 1) -> Dict:
    gammas = list(gammas)

    def run(gamma):
        return _simulate(problem, gamma, control, seed, oracle)

    if threads > 1 and len(gammas) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, gammas))
    else:
        results = [run(gamma) for gamma in gammas]
    summary = {"problem": problem.name, "seed": seed, "runs": [entry for entry, _, _ in results]}
    if out_dir is not None:
        out_dir = Path(out_dir)
        for gamma, (_, traj, reference) in zip(gammas, results):
            artifacts.write_trajectory_csv(out_dir / f"trajectory-gamma{gamma:g}.csv", traj, control)
            if reference is not None:
                artifacts.write_trajectory_csv(out_dir / "oracle.csv", reference, control)
        artifacts.write_json(out_dir / "simulate.json", summary)
    return artifacts.jsonable(summary)


# --- solve -----------------------------------------------------------------

def estimate_k_tilde(problem: ProblemFile, built, seed: int = 0) -> float:
    """
    Localization weight from sampled constants: Mbar_l = 2*M_l + K with M_l
    bounding |f| and |df/dx|, K bounding the Hessian of Phi, and M_g the largest
    |g| over sampled endpoint pairs in C.
    """
    default = sweep_setting("DEFAULT_K_TILDE")
    if built.center is None:
        logger.warning("no interior point of C; using K_tilde=%g", default)
        return default
    prob = built.problem
    spec = prob.spec
    rng = np.random.default_rng(seed)
    count = sweep_setting("BOUNDARY_SAMPLES")
    box = sweep_setting("SAMPLE_BOX")
    states = interior_samples(spec.S, built.center, rng, count, box) + [built.center]
    controls = [prob.lo, prob.hi, 0.5 * (prob.lo + prob.hi)]
    M_l = K = 0.0
    for x in states:
        t = rng.uniform(0.0, prob.T) if prob.T > 0 else 0.0
        for u in controls:
            value, jac_x, _ = spec.f.jacobians(t, x, u)
            M_l = max(M_l, float(np.linalg.norm(value)), float(np.linalg.norm(jac_x, 2)))
        _, _, hess = eval_with_derivatives(spec.Phi, t, x, None, 2)
        K = max(K, float(np.linalg.norm(hess, 2)))
    starts = [prob.C0.point] if prob.C0.kind == "point" else states
    ends = [x for x in states if prob.CT.residual(x) <= 1e-6] or states
    M_g = max(abs(prob.endpoint_cost(np.asarray(a), np.asarray(b), order=0)[0]) for a in starts for b in ends)
    if M_g == 0.0:
        logger.warning("endpoint cost vanishes on every sample; using K_tilde=%g", default)
        return default
    k_tilde = k_tilde_bound(2.0 * M_l + K, M_g, prob.delta)
    logger.info("K_tilde=%.6g from M_l=%.4g, K=%.4g, M_g=%.4g", k_tilde, M_l, K, M_g)
    return k_tilde


def solve_config(problem: ProblemFile, built, **overrides) -> SolveConfig:
    options = {
        "schedule": built.schedule,
        "N": problem.N,
        "K_tilde": sweep_setting("DEFAULT_K_TILDE"),
        "integrator": integrator_options(),
    }
    options.update({key: value for key, value in overrides.items() if value is not None})
    return SolveConfig(**options)


def run_solve(problem: ProblemFile, seed: int = 0, out_dir: Optional[Path] = None, tol_scale: float = 1.0,
              **overrides) -> Dict:
    built = _build(problem, seed)
    prob = built.problem
    if overrides.pop("auto_k_tilde", False):
        overrides["K_tilde"] = estimate_k_tilde(problem, built, seed)
    cfg = solve_config(problem, built, **overrides)
    u_init = ControlSignal.constant(problem.T, cfg.N, np.clip(0.0, prob.lo, prob.hi), problem.m)
    result = solve(prob, cfg, u_init)
    cert = extract_certificate(result, prob, cfg, sweep_setting("ATOM_THRESH"), sweep_setting("SPIKE_FACTOR"))
    report = verify(cert, prob, verify_tolerances(tol_scale, cert.active_tol), seed)
    summary = {
        "problem": problem.name,
        "seed": seed,
        "J": result.objective,
        "terminal_residual": result.terminal_residual,
        "final_state": result.trajectory.final_state.tolist(),
        "lambda": cert.lam,
        "gamma": result.gamma,
        "estimates": built.estimates,
        "log": result.log,
        "verification": report.to_doc(),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        artifacts.write_json(out_dir / "problem.json", problem.to_doc())
        artifacts.write_trajectory_csv(out_dir / "trajectory.csv", result.trajectory, result.control)
        artifacts.write_adjoint_csv(out_dir / "adjoint.csv", cert.grid, cert.p, cert.nus)
        artifacts.write_certificate(out_dir / "certificate.json", cert)
        artifacts.write_json(out_dir / "solve.json", summary)
    return artifacts.jsonable(summary)


# --- verify ----------------------------------------------------------------

def run_verify(cert, problem: ProblemFile, seed: int = 0, tol_scale: float = 1.0, corruptions: bool = False,
               threads: int = 1) -> Dict:
    prob = _build(problem, seed).problem
    tolerances = verify_tolerances(tol_scale, cert.active_tol)
    report = verify(cert, prob, tolerances, seed)
    summary = {"problem": problem.name, "seed": seed, "tol_scale": tol_scale, **report.to_doc()}
    if corruptions:
        summary["corruptions"] = corruption_suite(cert, prob, tolerances, seed, threads)
    return artifacts.jsonable(summary)


def corruption_suite(cert, prob, tolerances: VerifyTolerances, seed: int = 0, threads: int = 1,
                     kinds: Iterable[str] = CORRUPTIONS) -> Dict[str, List[str]]:
    """Conditions flagged for every single-field corruption of ``cert``."""

    def run(kind):
        return kind, verify(corrupt(cert, kind, prob), prob, tolerances, seed).failures()

    kinds = list(kinds)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return dict(pool.map(run, kinds))
    return dict(map(run, kinds))


def default_run_dir(kind: str, name: str = "") -> Path:
    from django.utils import timezone

    stamp = timezone.now().strftime("%Y%m%dT%H%M%S%f")
    return Path(sweep_setting("OUTPUT_DIR")) / f"{kind}-{name or 'problem'}-{stamp}"


def brief(summary: Dict) -> Dict:
    """Summary without the per-iteration log, for the run ledger."""
    return {key: value for key, value in summary.items() if key not in ("log",)}
