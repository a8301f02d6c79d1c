"""
Geometry of the sweeping set C = {x : psi_i(x) <= 0, i = 1..r}.

Covers the log-sum-exp smoothing psi_gamma and its level sets, normal cones,
the boundary gradient checks, interior directions at boundary points,
the ball augmentation for unbounded sets and the Euclidean projection onto C.
"""
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import nnls

from .exceptions import (
    DegenerateCone,
    EmptyActiveSet,
    NoBoundarySamples,
    NoConvergence,
    NonSmoothConstraint,
    NotOnBoundary,
    ScheduleError,
    StateOutsideC,
)
from .exprcore import ScalarField, contains_max2, parse_field

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class SweepingSet:
    psi: Tuple[ScalarField, ...]
    n: int
    eta: float = 0.5
    Mbar_psi: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if len(self.psi) < 1:
            raise ValueError("a sweeping set needs at least one constraint")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        for i, field_ in enumerate(self.psi, start=1):
            if contains_max2(field_.ast):
                raise NonSmoothConstraint(i)
            if field_.n != self.n:
                raise ValueError(f"psi{i} is declared over {field_.n} variables, expected {self.n}")
        # normalization Mbar_psi >= 2 eta
        if self.Mbar_psi < 2 * self.eta:
            object.__setattr__(self, "Mbar_psi", 2 * self.eta)

    @property
    def r(self):
        return len(self.psi)

    def values(self, x) -> np.ndarray:
        return np.array([p.value(0.0, x) for p in self.psi])

    def evaluate(self, x, order=1):
        """Return (values (r,), gradients (r, n), Hessians (r, n, n) or None)."""
        jets = [p.jet(0.0, x, None, order) for p in self.psi]
        values = np.array([j.val for j in jets])
        grads = np.array([j.grad for j in jets]) if order >= 1 else None
        hessians = np.array([j.hess for j in jets]) if order >= 2 else None
        return values, grads, hessians

    def with_constants(self, eta=None, Mbar_psi=None):
        return replace(
            self,
            eta=self.eta if eta is None else eta,
            Mbar_psi=self.Mbar_psi if Mbar_psi is None else Mbar_psi,
        )


def sweeping_set(sources: Sequence[str], n: int, **constants) -> SweepingSet:
    fields = tuple(parse_field(src, n, 0, label=f"psi{i + 1}") for i, src in enumerate(sources))
    return SweepingSet(psi=fields, n=n, **constants)


# --- penalty schedule ------------------------------------------------------

@dataclass(frozen=True)
class PenaltySchedule:
    gammas: Tuple[float, ...]
    Mbar: float
    eta: float
    r: int
    Mbar_psi: float

    def __post_init__(self):
        if not self.gammas:
            raise ScheduleError("empty penalty schedule")
        if any(b <= a for a, b in zip(self.gammas, self.gammas[1:])):
            raise ScheduleError(f"penalty schedule must be strictly increasing: {self.gammas}")
        threshold = self.threshold
        low = [g for g in self.gammas if g <= threshold]
        if low:
            raise ScheduleError(
                f"every gamma must exceed 2*Mbar/eta = {threshold:.6g}; offending values {low}"
            )

    @classmethod
    def for_set(cls, S: SweepingSet, gammas, Mbar: float) -> "PenaltySchedule":
        return cls(tuple(float(g) for g in gammas), float(Mbar), S.eta, S.r, S.Mbar_psi)

    @classmethod
    def auto(cls, S: SweepingSet, Mbar: float, gamma_min=None, gamma_max=1e3, steps=8):
        if gamma_min is None:
            gamma_min = max(10.0, 4.0 * Mbar / S.eta)
        gamma_max = max(gamma_max, 2.0 * gamma_min)
        gammas = np.geomspace(gamma_min, gamma_max, steps)
        return cls.for_set(S, gammas, Mbar)

    @property
    def threshold(self):
        return 2.0 * self.Mbar / self.eta

    def __len__(self):
        return len(self.gammas)

    def alpha(self, k: int) -> float:
        gamma = self.gammas[k]
        return math.log(self.eta * gamma / (2.0 * self.Mbar)) / gamma

    def sigma(self, k: int) -> float:
        gamma = self.gammas[k]
        return (self.r * self.Mbar_psi / (2.0 * self.eta ** 2)) * (math.log(self.r) / gamma + self.alpha(k))

    def xi_bound(self) -> float:
        return 2.0 * self.Mbar / self.eta

    def speed_bound(self) -> float:
        return self.Mbar + 2.0 * self.Mbar * self.Mbar_psi / self.eta


# --- smoothing -------------------------------------------------------------

def psi_max(S: SweepingSet, x) -> float:
    return float(np.max(S.values(x)))


def _softmax(values, gamma):
    top = np.max(values)
    weights = np.exp(gamma * (values - top))
    total = weights.sum()
    return top, weights / total, total


def psi_gamma(S: SweepingSet, gamma: float, x) -> Tuple[float, np.ndarray]:
    """Log-sum-exp smoothing of max_i psi_i and its gradient."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    values, grads, _ = S.evaluate(x, order=1)
    top, weights, total = _softmax(values, gamma)
    value = top + math.log(total) / gamma
    return value, weights @ grads


def psi_gamma_value(S: SweepingSet, gamma: float, x) -> float:
    values = S.values(x)
    top, _, total = _softmax(values, gamma)
    return top + math.log(total) / gamma


class Membership(str, enum.Enum):
    IN_CK = "InCk"
    IN_CGAMMA = "InCgamma"
    IN_C = "InC"
    OUTSIDE = "Outside"


def level_membership(S: SweepingSet, sched: PenaltySchedule, k: int, x) -> Membership:
    gamma = sched.gammas[k]
    smoothed = psi_gamma_value(S, gamma, x)
    if smoothed <= -sched.alpha(k):
        return Membership.IN_CK
    if smoothed <= 0.0:
        return Membership.IN_CGAMMA
    if psi_max(S, x) <= 0.0:
        return Membership.IN_C
    return Membership.OUTSIDE


# --- active sets and normal cones ------------------------------------------

@dataclass(frozen=True)
class ActiveSet:
    indices: Tuple[int, ...]  # 0-based
    threshold: float

    def __len__(self):
        return len(self.indices)

    def __bool__(self):
        return bool(self.indices)


def active_set(S: SweepingSet, x, a: float = 0.0, feas_tol: float = FEAS_TOL, values=None) -> ActiveSet:
    """Indices with -a <= psi_i(x) <= 0, both ends widened by ``feas_tol``."""
    if values is None:
        values = S.values(x)
    indices = tuple(i for i, v in enumerate(values) if -a - feas_tol <= v <= feas_tol)
    return ActiveSet(indices, a)


def normal_cone_rays(S: SweepingSet, x, a: float = 0.0, feas_tol: float = FEAS_TOL) -> List[Tuple[int, np.ndarray]]:
    values, grads, _ = S.evaluate(x, order=1)
    if np.max(values) > feas_tol:
        raise StateOutsideC(float(np.max(values)))
    active = active_set(S, x, a, feas_tol, values)
    return [(i, grads[i].copy()) for i in active.indices]


def min_norm_point(points, tol: float = 1e-14, max_iter: int = 5000) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum-norm point of conv(points) by Frank-Wolfe with away steps and exact line search."""
    G = np.atleast_2d(np.asarray(points, dtype=float))
    k = G.shape[0]
    weights = np.zeros(k)
    start = int(np.argmin(np.einsum("ij,ij->i", G, G)))
    weights[start] = 1.0
    x = G[start].copy()
    for _ in range(max_iter):
        scores = G @ x
        xx = x @ x
        s = int(np.argmin(scores))
        gap = xx - scores[s]
        if gap <= tol * max(1.0, xx):
            break
        support = np.flatnonzero(weights > 0)
        a = int(support[np.argmax(scores[support])])
        if gap >= scores[a] - xx or weights[a] >= 1.0:
            direction = G[s] - x
            tau_max = 1.0
            away = False
        else:
            direction = x - G[a]
            tau_max = weights[a] / (1.0 - weights[a])
            away = True
        dd = direction @ direction
        if dd == 0.0:
            break
        tau = min(max(-(x @ direction) / dd, 0.0), tau_max)
        if away:
            weights *= 1.0 + tau
            weights[a] -= tau
            if tau == tau_max:
                weights[a] = 0.0
        else:
            weights *= 1.0 - tau
            weights[s] += tau
        x = weights @ G
    return x, weights


def check_A22(S: SweepingSet, boundary_samples, feas_tol: float = 1e-7):
    """Estimate eta from the distance of 0 to the hull of active gradients."""
    best = math.inf
    witness = None
    used = 0
    for sample in boundary_samples:
        values, grads, _ = S.evaluate(sample, order=1)
        active = active_set(S, sample, 0.0, feas_tol, values)
        if not active:
            continue
        used += 1
        point, _ = min_norm_point(grads[list(active.indices)])
        distance = float(np.linalg.norm(point))
        if distance < best:
            best = distance
            witness = np.asarray(sample, dtype=float)
    if not used:
        raise NoBoundarySamples()
    eta_hat = 0.5 * best
    logger.debug("boundary gradient check over %d samples: eta_hat=%.6g", used, eta_hat)
    return eta_hat, witness


def check_A23(S: SweepingSet, x, a: float = 0.0, feas_tol: float = FEAS_TOL) -> Tuple[float, bool]:
    values, grads, _ = S.evaluate(x, order=1)
    active = active_set(S, x, a, feas_tol, values)
    if not active:
        raise EmptyActiveSet(a)
    b_hat = 0.0
    for j in active.indices:
        gj = grads[j]
        coupling = sum(abs(grads[i] @ gj) for i in active.indices if i != j)
        b_hat = max(b_hat, coupling / (gj @ gj))
    return b_hat, b_hat < 1.0


def _project_on_cone(rays: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Projection of v onto cone(rays) through a nonnegative least squares."""
    coefficients, _ = nnls(rays.T, v)
    return rays.T @ coefficients


def interior_direction(S: SweepingSet, c, feas_tol: float = 1e-7) -> np.ndarray:
    values, grads, _ = S.evaluate(c, order=1)
    top = float(np.max(values))
    if abs(top) > feas_tol:
        raise NotOnBoundary(top)
    active = list(active_set(S, c, 0.0, feas_tol, values).indices)
    rays = grads[active]
    direction = np.zeros(S.n)
    for j in active:
        v = -grads[j]
        direction += v - _project_on_cone(rays, v)
    norm = float(np.linalg.norm(direction))
    bound = -4.0 * S.eta ** 2 / (S.r * S.Mbar_psi)
    if norm == 0.0:
        raise DegenerateCone(bound, 0.0)
    worst = max(float(direction @ grads[i]) / norm for i in active)
    if worst > bound + 1e-12:
        raise DegenerateCone(bound, worst)
    low, high = 4.0 * S.eta ** 2 / S.Mbar_psi, S.r * S.Mbar_psi
    if not low - 1e-12 <= norm <= high + 1e-12:
        raise DegenerateCone(low, norm)
    return direction


def shifted_start(S: SweepingSet, sched: PenaltySchedule, k: int, c, iterations: int = 60) -> np.ndarray:
    """
    Smallest shift of the boundary point ``c`` along d_c/|d_c| landing in C^gamma_k(k).

    The shift never exceeds sigma_k, which is the guaranteed one.
    """
    c = np.asarray(c, dtype=float)
    gamma = sched.gammas[k]
    target = -sched.alpha(k)
    if psi_gamma_value(S, gamma, c) <= target:
        return c.copy()
    if psi_max(S, c) < -1e-7:
        # interior point not yet inside the shrunken set: walk along -grad psi_gamma
        _, grad = psi_gamma(S, gamma, c)
        unit = -grad / np.linalg.norm(grad)
    else:
        d = interior_direction(S, c)
        unit = d / np.linalg.norm(d)
    high = sched.sigma(k)
    if psi_gamma_value(S, gamma, c + high * unit) > target:
        logger.warning("shift sigma_k=%.4g does not reach C^gamma(k) at gamma=%g", high, gamma)
        return c + high * unit
    low = 0.0
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if psi_gamma_value(S, gamma, c + mid * unit) <= target:
            high = mid
        else:
            low = mid
    return c + high * unit


# --- unbounded sets --------------------------------------------------------

def augment_with_ball(S: SweepingSet, y0, R0: float) -> SweepingSet:
    if R0 <= 0:
        raise ValueError("ball radius must be positive")
    terms = " + ".join(f"(x{i + 1} - {float(c)!r})^2" for i, c in enumerate(np.asarray(y0, dtype=float)))
    source = f"0.5 * ({terms} - {float(R0) ** 2!r})"
    ball = parse_field(source, S.n, 0, label=f"psi{S.r + 1}")
    return replace(S, psi=S.psi + (ball,))


def _sphere_boundary_points(S, y0, R0, rng, count):
    """Points of bdry C on the sphere S_R0(y0), found by bisection along short arcs."""
    found = []
    for _ in range(count):
        start = rng.normal(size=S.n)
        start /= np.linalg.norm(start)
        end = start + 0.5 * rng.normal(size=S.n)
        end /= np.linalg.norm(end)

        def on_arc(s):
            d = (1.0 - s) * start + s * end
            return y0 + R0 * d / np.linalg.norm(d)

        low, high = 0.0, 1.0
        inside_low = psi_max(S, on_arc(low)) <= 0
        if inside_low == (psi_max(S, on_arc(high)) <= 0):
            continue
        for _ in range(60):
            mid = 0.5 * (low + high)
            if (psi_max(S, on_arc(mid)) <= 0) == inside_low:
                low = mid
            else:
                high = mid
        point = on_arc(low if inside_low else high)
        found.append(point)
    return found


def check_star_shaped(S: SweepingSet, center, R0: float, rng, count: int = 512):
    """Sampled test that every segment from ``center`` to a point of C in the box stays in C."""
    center = np.asarray(center, dtype=float)
    if psi_max(S, center) > 0:
        return False, center
    for point in center + R0 * rng.uniform(-1.0, 1.0, size=(count, S.n)):
        if psi_max(S, point) > 0:
            continue
        for s in np.linspace(0.0, 1.0, 17)[1:-1]:
            if psi_max(S, center + s * (point - center)) > FEAS_TOL:
                return False, point
    return True, None


def check_A24(S: SweepingSet, y0, R0: float, rng, count: int = 512, trajectory=None, feas_tol: float = 1e-7):
    """
    Sampled ball condition: y0 - c is not a normal of C at boundary points c on
    the sphere S_R0(y0), and the trajectory (when given) stays strictly inside
    the ball.
    """
    y0 = np.asarray(y0, dtype=float)
    report = {"sphere_points": 0, "normal_witness": None, "star_shaped": None, "inside_ball": None}
    for c in _sphere_boundary_points(S, y0, R0, rng, count):
        values, grads, _ = S.evaluate(c, order=1)
        active = list(active_set(S, c, 0.0, feas_tol, values).indices)
        if not active:
            continue
        report["sphere_points"] += 1
        target = y0 - c
        _, misfit = nnls(grads[active].T, target)
        if misfit <= 1e-8 * np.linalg.norm(target):
            report["normal_witness"] = c.tolist()
            break
    report["star_shaped"], _ = check_star_shaped(S, y0, R0, rng, count)
    if trajectory is not None:
        distances = np.linalg.norm(np.asarray(trajectory) - y0, axis=1)
        report["inside_ball"] = bool(np.max(distances) < R0)
    report["passed"] = report["normal_witness"] is None and report["inside_ball"] is not False
    return report


def find_recession_direction(S: SweepingSet, center, rng, rays: int = 64, reach: float = 1e3) -> Optional[np.ndarray]:
    """Return a direction along which C appears unbounded, or None."""
    center = np.asarray(center, dtype=float)
    directions = [np.eye(S.n)[i] * sign for i in range(S.n) for sign in (1.0, -1.0)]
    random = rng.normal(size=(rays, S.n))
    directions.extend(random / np.linalg.norm(random, axis=1, keepdims=True))
    for d in directions:
        if all(psi_max(S, center + s * d) <= 0 for s in np.geomspace(1.0, reach, 12)):
            return np.asarray(d)
    return None


# --- sampling and constants ------------------------------------------------

def boundary_samples(S: SweepingSet, center, rng, count: int = 256, radius: float = 3.0) -> List[np.ndarray]:
    """Points of bdry C hit by random rays from the interior point ``center``."""
    center = np.asarray(center, dtype=float)
    top = psi_max(S, center)
    if top >= 0:
        raise StateOutsideC(top, "boundary sampling needs a strictly interior center")
    samples = []
    for d in rng.normal(size=(count, S.n)):
        d /= np.linalg.norm(d)
        grid = np.linspace(0.0, radius, 33)
        hits = [s for s in grid[1:] if psi_max(S, center + s * d) > 0]
        if not hits:
            continue
        high = hits[0]
        low = high - grid[1]
        for _ in range(60):
            mid = 0.5 * (low + high)
            if psi_max(S, center + mid * d) > 0:
                high = mid
            else:
                low = mid
        samples.append(center + low * d)
    return samples


def interior_samples(S: SweepingSet, center, rng, count: int = 256, radius: float = 3.0) -> List[np.ndarray]:
    center = np.asarray(center, dtype=float)
    points = center + radius * rng.uniform(-1.0, 1.0, size=(count, S.n))
    return [p for p in points if psi_max(S, p) <= 0]


def estimate_bounds(S: SweepingSet, boundary, interior=()) -> Tuple[float, float]:
    """(eta_hat, Mbar_psi_hat): Mbar_psi is the largest sampled gradient norm inflated by 10%."""
    eta_hat, _ = check_A22(S, boundary)
    largest = 0.0
    for point in list(boundary) + list(interior):
        _, grads, _ = S.evaluate(point, order=1)
        largest = max(largest, float(np.max(np.linalg.norm(grads, axis=1))))
    return eta_hat, max(1.1 * largest, 2.0 * eta_hat)


# --- projection ------------------------------------------------------------

@dataclass
class Projection:
    point: np.ndarray
    multipliers: np.ndarray
    iterations: int = 0
    active: Tuple[int, ...] = field(default_factory=tuple)


def _kkt_merit(S, y, z, lam, active):
    values, grads, _ = S.evaluate(z, order=1)
    stationarity = z - y + grads[active].T @ lam[active] if active else z - y
    inactive = [i for i in range(S.r) if i not in active]
    violation = np.maximum(values[inactive], 0.0) if inactive else np.zeros(0)
    return (stationarity @ stationarity + np.sum(values[active] ** 2) + violation @ violation), values


def project_with_multipliers(S: SweepingSet, y, tol: float = 1e-10, max_iters: int = 50) -> Projection:
    """Active-set SQP on the KKT system of min |z - y|^2 s.t. psi_i(z) <= 0."""
    y = np.asarray(y, dtype=float)
    values = S.values(y)
    lam = np.zeros(S.r)
    if np.max(values) <= tol:
        return Projection(y.copy(), lam, 0, ())
    z = y.copy()
    active = sorted(i for i, v in enumerate(values) if v > -tol)
    n = S.n
    for iteration in range(1, max_iters + 1):
        values, grads, hessians = S.evaluate(z, order=2)
        k = len(active)
        G = grads[active]
        H = np.eye(n) + np.tensordot(lam[active], hessians[active], axes=1) if k else np.eye(n)
        residual = np.concatenate([z - y + G.T @ lam[active], values[active]])
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = H
        kkt[:n, n:] = G.T
        kkt[n:, :n] = G
        try:
            step = np.linalg.solve(kkt, -residual)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(kkt, -residual, rcond=None)[0]
        merit, _ = _kkt_merit(S, y, z, lam, active)
        t = 1.0
        while True:
            trial_z = z + t * step[:n]
            trial_lam = lam.copy()
            trial_lam[active] += t * step[n:]
            trial_merit, trial_values = _kkt_merit(S, y, trial_z, trial_lam, active)
            if trial_merit <= (1.0 - 1e-4 * t) * merit or t < 1e-6:
                break
            t *= 0.5
        z, lam = trial_z, trial_lam
        values = trial_values

        negative = [i for i in active if lam[i] < -tol]
        if negative:
            drop = min(negative, key=lambda i: lam[i])
            active.remove(drop)
            lam[drop] = 0.0
            continue
        violated = [i for i in range(S.r) if i not in active and values[i] > tol]
        if violated:
            active.append(max(violated, key=lambda i: values[i]))
            active.sort()
            continue
        _, grads, _ = S.evaluate(z, order=1)
        stationarity = z - y + grads[active].T @ lam[active] if active else z - y
        scale = 1.0 + np.linalg.norm(y - z)
        if (np.linalg.norm(stationarity) <= tol * scale
                and np.max(values) <= tol
                and (not active or np.max(np.abs(values[active])) <= tol)):
            return Projection(z, np.maximum(lam, 0.0), iteration, tuple(active))
    raise NoConvergence(max_iters, float(np.max(values)))


def project_onto_C(S: SweepingSet, y, tol: float = 1e-10, max_iters: int = 50) -> np.ndarray:
    return project_with_multipliers(S, y, tol, max_iters).point
