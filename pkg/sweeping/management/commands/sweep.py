import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from sweeping import runner
from sweeping.artifacts import read_certificate, read_csv, staged_directory, write_certificate, write_json
from sweeping.conf import sweep_setting
from sweeping.exceptions import AssumptionFailure, SchemaError, SweepingError
from sweeping.models import RunRecord
from sweeping.problems import load_problem, registry

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = (
        "Optimal control of sweeping processes: check assumptions, simulate, solve, "
        "verify certificates and export builtin examples."
    )

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=None, help="Seed for every sampled check (default from settings)")
        parser.add_argument("--threads", type=int, default=None, help="Worker threads for gamma sweeps and corruption suites")
        parser.add_argument("--tol-scale", type=float, default=1.0, help="Multiply every verification tolerance")
        sub = parser.add_subparsers(dest="subcommand", required=True)

        check = sub.add_parser("check", help="Sampled checks of the standing assumptions")
        check.add_argument("problem", help="Problem JSON file or builtin example name")
        check.add_argument("--trajectory", help="CSV with columns x1..xn to test the gradient coupling along")
        check.add_argument("--out", help="Write the report JSON here")

        simulate = sub.add_parser("simulate", help="Integrate the penalized dynamics for fixed controls")
        simulate.add_argument("problem")
        simulate.add_argument("--gamma", type=float, action="append", required=True,
                              help="Penalty parameter; repeat for a sweep")
        simulate.add_argument("--control", default="const:0", help="const:v1,..,vm or csv:path")
        simulate.add_argument("--oracle", action="store_true", help="Also run the catching-up scheme and compare")
        simulate.add_argument("--N", type=int, default=None, help="Grid cells for a constant control")
        simulate.add_argument("--out", help="Output directory")

        solve = sub.add_parser("solve", help="Solve over the penalty schedule and extract a certificate")
        solve.add_argument("problem")
        solve.add_argument("--out", help="Output directory")
        solve.add_argument("--N", type=int, default=None)
        solve.add_argument("--optimizer", choices=("lbfgs", "projected-gradient"), default=None)
        solve.add_argument("--beta", type=float, default=None)
        solve.add_argument("--alpha-prox", type=float, default=None)
        solve.add_argument("--auto-k-tilde", action="store_true",
                           help="Estimate the localization weight from sampled bounds")
        solve.add_argument("--queue", action="store_true", help="Enqueue on the Celery worker instead of running here")

        verify = sub.add_parser("verify", help="Check a certificate against the optimality conditions")
        verify.add_argument("certificate")
        verify.add_argument("problem")
        verify.add_argument("--corruptions", action="store_true", help="Also run the single-field corruption suite")
        verify.add_argument("--out", help="Write the report JSON here")

        example = sub.add_parser("example", help="Builtin example problems")
        actions = example.add_subparsers(dest="action", required=True)
        actions.add_parser("list")
        export = actions.add_parser("export")
        export.add_argument("name")
        export.add_argument("--out", required=True)
        certificate = actions.add_parser("certificate", help="Write the closed-form certificate of an example")
        certificate.add_argument("name")
        certificate.add_argument("--out", required=True)
        certificate.add_argument("--N", type=int, default=2000)

        runs = sub.add_parser("runs", help="Recent entries of the run ledger")
        runs.add_argument("--limit", type=int, default=20)

    def handle(self, *args, **options):
        subcommand = options["subcommand"]
        seed = options["seed"] if options["seed"] is not None else sweep_setting("DEFAULT_SEED")
        threads = options["threads"] or sweep_setting("THREADS")
        try:
            getattr(self, f"handle_{subcommand}")(options, seed, threads)
        except SweepingError as exc:
            logger.error("%s failed: %s", subcommand, exc)
            self.record(subcommand, options.get("problem", ""), seed, "failed",
                        {"error": str(exc), "type": type(exc).__name__})
            raise CommandError(str(exc), returncode=exc.exit_code) from exc
        except ValueError as exc:
            # option values rejected before any numerics (N, beta, control grid)
            raise CommandError(str(exc), returncode=2) from exc

    # helpers

    def load(self, argument):
        if not Path(argument).exists() and argument in registry:
            return registry.get(argument)
        return load_problem(argument)

    def record(self, kind, problem, seed, status, summary=None, artifact_dir=None):
        if kind not in dict(RunRecord.KIND_CHOICES) or not sweep_setting("RECORD_RUNS"):
            return None
        return RunRecord.record(kind, problem, seed, status, summary, artifact_dir)

    def emit(self, text, style=None):
        self.stdout.write(style(text) if style else text)

    # subcommands

    def handle_check(self, options, seed, threads):
        problem = self.load(options["problem"])
        trajectory = None
        if options["trajectory"]:
            header, rows = read_csv(options["trajectory"])
            try:
                columns = [header.index(f"x{i + 1}") for i in range(problem.n)]
            except ValueError as exc:
                raise SchemaError(f"{options['trajectory']}: expected columns x1..x{problem.n}") from exc
            trajectory = rows[:, columns]
        report = runner.run_check(problem, seed, trajectory)
        if options["out"]:
            write_json(options["out"], report)
        estimates = report["estimates"]
        for key in ("eta_hat", "b_hat", "Mbar_psi", "Mbar"):
            if key in estimates:
                self.emit(f"{key:>9} = {estimates[key]:.6g}")
        for name, entry in report["checks"].items():
            state = {True: "pass", False: "FAIL", None: "skipped"}[entry["pass"]]
            self.emit(f"{name:>20}: {state}")
        suggestion = report["checks"]["ball"].get("suggested_ball")
        if suggestion:
            self.emit(f"C looks unbounded; add \"ball\": {suggestion} to the problem", self.style.WARNING)
        self.record("check", problem.name, seed, "ok" if report["pass"] else "failed", report)
        try:
            runner.raise_for_check(report)
        except AssumptionFailure as exc:
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def handle_simulate(self, options, seed, threads):
        problem = self.load(options["problem"])
        control = runner.parse_control(options["control"], problem, options["N"])
        out = options["out"] or runner.default_run_dir("simulate", problem.name)
        with staged_directory(out) as staging:
            summary = runner.run_simulate(problem, options["gamma"], control, seed, options["oracle"], staging, threads)
        for run in summary["runs"]:
            line = f"gamma={run['gamma']:g} max_xi={run['max_xi']:.6g} margin={run['invariance_margin']:.3e}"
            if "sup_dist" in run:
                line += f" sup_dist={run['sup_dist']:.3e} l2_dist={run['l2_dist']:.3e}"
            self.emit(line)
        self.emit(f"artifacts in {out}")
        self.record("simulate", problem.name, seed, "ok", summary, out)

    def handle_solve(self, options, seed, threads):
        problem = self.load(options["problem"])
        overrides = {
            "N": options["N"],
            "optimizer": options["optimizer"],
            "beta": options["beta"],
            "alpha_prox": options["alpha_prox"],
            "auto_k_tilde": options["auto_k_tilde"] or None,
        }
        overrides = {key: value for key, value in overrides.items() if value is not None}
        out = options["out"] or runner.default_run_dir("solve", problem.name)
        if options["queue"]:
            from sweeping.tasks import solve_problem

            record = self.record("solve", problem.name, seed, "queued", {}, out)
            task_options = {"seed": seed, "tol_scale": options["tol_scale"], "out": str(out),
                            "record_id": record.pk if record else None, **overrides}
            result = solve_problem.delay(problem.to_doc(), task_options)
            if record is not None:
                record.task_id = result.id
                record.save(update_fields=["task_id", "update_time"])
            self.emit(f"queued solve task {result.id}")
            return
        with staged_directory(out) as staging:
            summary = runner.run_solve(problem, seed, staging, options["tol_scale"], **overrides)
        self.emit(f"J = {summary['J']:.6g}")
        self.emit(f"terminal residual = {summary['terminal_residual']:.3e}")
        self.emit(f"lambda = {summary['lambda']:.6g}")
        verification = summary["verification"]
        for name, entry in verification["conditions"].items():
            self.emit(f"{name:>16}: {entry['residual']:.3e} (tol {entry['tolerance']:.1e})"
                      f"{'' if entry['pass'] else '  FAIL'}")
        self.emit(f"artifacts in {out}")
        self.record("solve", problem.name, seed, "ok", runner.brief(summary), out)

    def handle_verify(self, options, seed, threads):
        cert = read_certificate(options["certificate"])
        problem = self.load(options["problem"])
        summary = runner.run_verify(cert, problem, seed, options["tol_scale"], options["corruptions"], threads)
        if options["out"]:
            write_json(options["out"], summary)
        for name, entry in summary["conditions"].items():
            self.emit(f"{name:>16}: {entry['residual']:.3e} (tol {entry['tolerance']:.1e})"
                      f"{'' if entry['pass'] else '  FAIL'}")
        for kind, flagged in summary.get("corruptions", {}).items():
            self.emit(f"corruption {kind}: flagged {', '.join(flagged) or 'nothing'}")
        self.record("verify", problem.name, seed, "ok" if summary["pass"] else "failed", summary)
        if not summary["pass"]:
            failed = [name for name, entry in summary["conditions"].items() if not entry["pass"]]
            raise CommandError(f"certificate rejected: {', '.join(failed)}", returncode=1)
        self.emit("certificate accepted", self.style.SUCCESS)

    def handle_example(self, options, seed, threads):
        if options["action"] == "list":
            for name in registry.names():
                self.emit(f"{name:<16} {registry.document(name).get('description', '')}")
            return
        if options["action"] == "certificate":
            closed = registry.closed_form(options["name"])
            if closed is None or closed.certificate is None:
                raise SchemaError(f"example {options['name']!r} has no closed-form certificate")
            path = write_certificate(options["out"], closed.certificate(options["N"]))
            self.emit(f"wrote {path}")
            return
        path = registry.export(options["name"], options["out"])
        self.emit(f"wrote {path}")

    def handle_runs(self, options, seed, threads):
        for record in RunRecord.recent(options["limit"]):
            self.emit(f"{record.create_time:%Y-%m-%d %H:%M:%S}  {record.kind:<8} {record.status:<6} "
                      f"{record.problem or '-':<16} {record.artifact_dir or ''}")
