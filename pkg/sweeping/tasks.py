import logging

from celery import shared_task

from . import runner
from .artifacts import staged_directory
from .conf import sweep_setting
from .exceptions import SweepingError
from .models import RunRecord
from .problems import ProblemFile

logger = logging.getLogger(__name__)


@shared_task
def solve_problem(problem_doc, options=None):
    """
    Solve a problem document and write its artifacts.

    ``options`` may carry seed, tol_scale, out, record_id and any SolveConfig
    field (N, beta, optimizer, ...).
    """
    options = dict(options or {})
    problem = ProblemFile.from_doc(problem_doc)
    seed = options.pop("seed", sweep_setting("DEFAULT_SEED"))
    tol_scale = options.pop("tol_scale", 1.0)
    record_id = options.pop("record_id", None)
    out = options.pop("out", None) or runner.default_run_dir("solve", problem.name)
    logger.info("solving %s (seed %s) into %s", problem.name or "<problem>", seed, out)
    try:
        with staged_directory(out) as staging:
            summary = runner.run_solve(problem, seed, staging, tol_scale, **options)
    except SweepingError as exc:
        RunRecord.finish(record_id, "failed", {"error": str(exc), "type": type(exc).__name__})
        raise
    summary["out"] = str(out)
    RunRecord.finish(record_id, "ok", runner.brief(summary), out)
    return summary


@shared_task
def simulate_gamma(problem_doc, gamma, control="const:0", options=None):
    options = dict(options or {})
    problem = ProblemFile.from_doc(problem_doc)
    seed = options.get("seed", sweep_setting("DEFAULT_SEED"))
    signal = runner.parse_control(control, problem, options.get("N"))
    return runner.simulate_gamma(problem, float(gamma), signal, seed, bool(options.get("oracle", False)))
