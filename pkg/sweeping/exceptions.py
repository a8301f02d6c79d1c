class SweepingError(Exception):
    """Base class for every error raised by the sweeping package."""

    # Exit status used by the CLI: 1 numeric failure, 2 usage/schema.
    exit_code = 1


# --- expressions -----------------------------------------------------------

class ExpressionSyntaxError(SweepingError):
    exit_code = 2

    def __init__(self, position, expected, source=""):
        self.position = position
        self.expected = tuple(sorted(expected))
        self.source = source
        super().__init__(
            f"syntax error at position {position} in {source!r}; "
            f"expected one of: {', '.join(self.expected) or '<nothing>'}"
        )


class UnknownIdentifier(SweepingError):
    exit_code = 2

    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown identifier {name!r}")


class IndexOutOfRange(SweepingError):
    exit_code = 2

    def __init__(self, name, limit):
        self.name = name
        self.limit = limit
        super().__init__(f"variable {name!r} is out of range (declared dimension {limit})")


class DomainError(SweepingError):
    def __init__(self, subexpression, value):
        self.subexpression = subexpression
        self.value = value
        super().__init__(f"{subexpression} is undefined at argument {value!r}")


class NonSmoothConstraint(SweepingError):
    exit_code = 2

    def __init__(self, index):
        self.index = index
        super().__init__(f"constraint psi{index} uses max2; constraint fields must be C^1,1")


# --- geometry --------------------------------------------------------------

class NoBoundarySamples(SweepingError):
    def __init__(self):
        super().__init__("no boundary samples with an active constraint were supplied")


class EmptyActiveSet(SweepingError):
    def __init__(self, threshold):
        self.threshold = threshold
        super().__init__(f"no constraint is active at threshold a={threshold}")


class NotOnBoundary(SweepingError):
    def __init__(self, psi_value):
        self.psi_value = psi_value
        super().__init__(f"point is not on the boundary of C (psi = {psi_value:.3e})")


class StateOutsideC(SweepingError, ValueError):
    """A state that must lie in C (or strictly inside it) does not."""

    def __init__(self, psi_value, requirement="point is outside C"):
        self.psi_value = psi_value
        super().__init__(f"{requirement} (psi = {psi_value:.3e})")


class DegenerateCone(SweepingError):
    def __init__(self, bound, observed):
        self.bound = bound
        self.observed = observed
        super().__init__(
            f"interior direction violates the cone bound: <d/|d|, grad psi_i> = {observed:.6g} "
            f"> {bound:.6g}; the boundary gradient condition does not hold here"
        )


class NoConvergence(SweepingError):
    def __init__(self, max_iters, residual=None):
        self.max_iters = max_iters
        self.residual = residual
        super().__init__(f"projection did not converge in {max_iters} iterations (residual {residual})")


class ScheduleError(SweepingError):
    exit_code = 2


# --- dynamics --------------------------------------------------------------

class StepFailure(SweepingError):
    def __init__(self, t, h=None):
        self.t = t
        self.h = h
        super().__init__(f"integration step underflow at t={t:.9g} (h={h})")


class InvarianceViolation(SweepingError):
    def __init__(self, t, value, bound):
        self.t = t
        self.value = value
        self.bound = bound
        super().__init__(f"smoothed constraint left its sublevel set at t={t:.9g}: {value:.6g} > {bound:.6g}")


class ProjectionFailure(SweepingError):
    def __init__(self, t, cause=None):
        self.t = t
        self.cause = cause
        super().__init__(f"projection onto C failed at t={t:.9g}: {cause}")


class GridMismatch(SweepingError):
    def __init__(self, message="time grids do not match"):
        super().__init__(message)


# --- solver ----------------------------------------------------------------

class LineSearchStall(SweepingError):
    def __init__(self, gamma, iteration):
        self.gamma = gamma
        self.iteration = iteration
        super().__init__(f"line search stalled at gamma={gamma:g}, iteration {iteration}")


class TerminalInfeasible(SweepingError):
    def __init__(self, residual):
        self.residual = residual
        super().__init__(f"terminal constraint still violated after the outer loop: residual {residual:.6g}")


class DegenerateNormalization(SweepingError):
    def __init__(self, magnitude):
        self.magnitude = magnitude
        super().__init__(f"|p(T)| + lambda = {magnitude:.3e} is too small to normalize")


# --- verification / io -----------------------------------------------------

class UnsupportedSetDescriptor(SweepingError):
    exit_code = 2

    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"unsupported set descriptor {kind!r}")


class SchemaError(SweepingError):
    exit_code = 2


class AssumptionFailure(SweepingError):
    def __init__(self, assumption, detail=""):
        self.assumption = assumption
        self.detail = detail
        super().__init__(f"assumption {assumption} failed" + (f": {detail}" if detail else ""))


class NoInteriorPoint(SweepingError):
    def __init__(self, reference):
        self.reference = reference
        super().__init__(f"no interior point of C found near {list(reference)}")
