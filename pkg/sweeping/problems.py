"""
Problem documents and the builtin example registry.

A problem document is plain JSON (``schema_version`` 1).  ``ProblemFile``
validates it and ``build_problem`` turns it into a ``SweepingProblem`` plus a
penalty schedule, estimating whichever of eta, Mbar_psi and Mbar the document
does not fix by seeded sampling around an interior point of C.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .artifacts import SCHEMA_VERSION, read_json, write_json
from .dynamics import ControlSignal, DynamicsSpec, estimate_Mbar
from .exceptions import NoInteriorPoint, SchemaError
from .exprcore import parse_field, parse_vector
from .ocpsolve import SetDescriptor, SweepingProblem
from .sweepset import (
    PenaltySchedule,
    SweepingSet,
    augment_with_ball,
    boundary_samples,
    estimate_bounds,
    interior_samples,
    psi_gamma,
    psi_max,
)

logger = logging.getLogger(__name__)

CONSTANT_KEYS = ("eta", "Mbar_psi", "Mbar")


def _need(doc, key, kind, where):
    if key not in doc:
        raise SchemaError(f"{where}: missing key {key!r}")
    value = doc[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    if kind is dict and isinstance(value, dict):
        return value
    raise SchemaError(f"{where}: {key!r} must be of type {kind.__name__}, got {type(value).__name__}")


def _numbers(value, length, where):
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise SchemaError(f"{where}: expected a list of numbers")
    if len(value) != length:
        raise SchemaError(f"{where}: expected {length} entries, got {len(value)}")
    return [float(v) for v in value]


def _expressions(value, where, length=None):
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"{where}: expected a list of expression strings")
    if length is not None and len(value) != length:
        raise SchemaError(f"{where}: expected {length} entries, got {len(value)}")
    return list(value)


def _descriptor_doc(doc, n, where, allowed):
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected an object")
    kind = doc.get("kind")
    if kind not in allowed:
        raise SchemaError(f"{where}: kind must be one of {', '.join(allowed)}, got {kind!r}")
    clean = {"kind": kind}
    if kind == "point":
        clean["point"] = _numbers(doc.get("point"), n, f"{where}.point")
    elif kind == "affine":
        clean["a"] = _numbers(doc.get("a"), n, f"{where}.a")
        clean["b"] = _need(doc, "b", float, where)
    elif kind == "sublevel":
        clean["psi"] = _expressions(doc.get("psi"), f"{where}.psi")
        if not clean["psi"]:
            raise SchemaError(f"{where}.psi: at least one constraint is required")
        if doc.get("point") is not None:
            clean["point"] = _numbers(doc["point"], n, f"{where}.point")
    return clean


def _schedule_doc(doc):
    if not isinstance(doc, dict) or len(doc) != 1:
        raise SchemaError("schedule: expected exactly one of 'gammas' or 'auto'")
    if "gammas" in doc:
        gammas = doc["gammas"]
        return {"gammas": _numbers(gammas, len(gammas) if isinstance(gammas, list) else -1, "schedule.gammas")}
    if "auto" in doc:
        auto = doc["auto"]
        if not isinstance(auto, dict):
            raise SchemaError("schedule.auto: expected an object")
        clean = {}
        for key, kind in (("gamma_min", float), ("gamma_max", float), ("steps", int)):
            if key in auto:
                clean[key] = _need(auto, key, kind, "schedule.auto")
        if clean.get("steps", 8) < 1:
            raise SchemaError("schedule.auto.steps must be positive")
        return {"auto": clean}
    raise SchemaError("schedule: expected exactly one of 'gammas' or 'auto'")


@dataclass
class ProblemFile:
    name: str
    n: int
    m: int
    T: float
    psi: List[str]
    f: List[str]
    phi: str
    g: str
    C0: Dict
    CT: Dict
    U: Dict
    schedule: Dict
    N: int = 100
    delta: float = 1.0
    ball: Optional[Dict] = None
    constants: Dict = field(default_factory=dict)
    description: str = ""

    @classmethod
    def from_doc(cls, doc) -> "ProblemFile":
        if not isinstance(doc, dict):
            raise SchemaError("problem: expected a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"problem: unsupported schema_version {version!r}")
        n = _need(doc, "n", int, "problem")
        m = _need(doc, "m", int, "problem")
        if n < 1 or m < 1:
            raise SchemaError("problem: n and m must be positive")
        T = _need(doc, "T", float, "problem")
        if T < 0:
            raise SchemaError("problem: T must be nonnegative")
        U = _need(doc, "U", dict, "problem")
        lo = _numbers(U.get("lo"), m, "U.lo")
        hi = _numbers(U.get("hi"), m, "U.hi")
        if any(a > b for a, b in zip(lo, hi)):
            raise SchemaError("U: every lower bound must not exceed its upper bound")
        ball = doc.get("ball")
        if ball is not None:
            if not isinstance(ball, dict):
                raise SchemaError("ball: expected an object")
            ball = {"y0": _numbers(ball.get("y0"), n, "ball.y0"), "R0": _need(ball, "R0", float, "ball")}
            if ball["R0"] <= 0:
                raise SchemaError("ball.R0 must be positive")
        constants = doc.get("constants") or {}
        if not isinstance(constants, dict) or set(constants) - set(CONSTANT_KEYS):
            raise SchemaError(f"constants: only {', '.join(CONSTANT_KEYS)} may be given")
        constants = {key: _need(constants, key, float, "constants") for key in constants}
        if any(value <= 0 for value in constants.values()):
            raise SchemaError("constants: every value must be positive")
        N = doc.get("N", 100)
        if isinstance(N, bool) or not isinstance(N, int) or N < 16:
            raise SchemaError("problem: N must be an integer >= 16")
        problem = cls(
            name=str(doc.get("name", "")),
            n=n,
            m=m,
            T=T,
            psi=_expressions(_need(doc, "psi", list, "problem"), "psi"),
            f=_expressions(_need(doc, "f", list, "problem"), "f", n),
            phi=doc.get("phi") or "0",
            g=_need(doc, "g", str, "problem"),
            C0=_descriptor_doc(doc.get("C0"), n, "C0", ("point", "sublevel")),
            CT=_descriptor_doc(doc.get("CT"), n, "CT", ("all", "affine", "sublevel")),
            U={"lo": lo, "hi": hi},
            schedule=_schedule_doc(doc.get("schedule")),
            N=N,
            delta=float(doc.get("delta", 1.0)),
            ball=ball,
            constants=constants,
            description=str(doc.get("description", "")),
        )
        if not problem.psi:
            raise SchemaError("psi: at least one constraint is required")
        if problem.delta <= 0:
            raise SchemaError("problem: delta must be positive")
        problem.parse()
        return problem

    def to_doc(self) -> Dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "description": self.description,
            "n": self.n,
            "m": self.m,
            "T": self.T,
            "psi": list(self.psi),
            "f": list(self.f),
            "phi": self.phi,
            "g": self.g,
            "C0": copy.deepcopy(self.C0),
            "CT": copy.deepcopy(self.CT),
            "U": copy.deepcopy(self.U),
            "delta": self.delta,
            "schedule": copy.deepcopy(self.schedule),
            "N": self.N,
        }
        if self.ball is not None:
            doc["ball"] = copy.deepcopy(self.ball)
        if self.constants:
            doc["constants"] = dict(self.constants)
        return doc

    def parse(self) -> Dict:
        """Parse every expression; raises the expression errors on bad input."""
        return {
            "psi": tuple(parse_field(src, self.n, 0, label=f"psi{i + 1}") for i, src in enumerate(self.psi)),
            "f": parse_vector(self.f, self.n, self.m, label="f"),
            "phi": parse_field(self.phi, self.n, 0, label="phi"),
            "g": parse_field(self.g, 2 * self.n, 0, label="g"),
            "C0": tuple(parse_field(src, self.n, 0, label=f"C0_{i + 1}")
                        for i, src in enumerate(self.C0.get("psi", ()))),
            "CT": tuple(parse_field(src, self.n, 0, label=f"CT_{i + 1}")
                        for i, src in enumerate(self.CT.get("psi", ()))),
        }

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.U["lo"])

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.U["hi"])

    def reference_point(self) -> np.ndarray:
        if self.C0.get("point") is not None:
            return np.array(self.C0["point"])
        if self.ball is not None:
            return np.array(self.ball["y0"])
        return np.zeros(self.n)

    def sweeping_set(self, eta: float = 0.5, Mbar_psi: float = 1.0) -> SweepingSet:
        S = SweepingSet(psi=self.parse()["psi"], n=self.n, eta=eta, Mbar_psi=Mbar_psi)
        if self.ball is not None:
            S = augment_with_ball(S, self.ball["y0"], self.ball["R0"])
        return S

    def midpoint_control(self, N: Optional[int] = None) -> ControlSignal:
        return ControlSignal.constant(self.T, self.N if N is None else N, 0.5 * (self.lo + self.hi), self.m)


def load_problem(path) -> ProblemFile:
    return ProblemFile.from_doc(read_json(path))


def dump_problem(problem: ProblemFile, path):
    return write_json(path, problem.to_doc())


# --- building --------------------------------------------------------------

def find_interior_point(S: SweepingSet, reference, rng, box: float = 3.0, depth: float = 1e-6):
    """A point with max psi < -depth near ``reference``, or None."""
    x = np.asarray(reference, dtype=float).copy()
    if psi_max(S, x) < -depth:
        return x
    for _ in range(50):
        _, grad = psi_gamma(S, 10.0, x)
        norm = float(np.linalg.norm(grad))
        if norm == 0.0:
            break
        x = x - 0.1 * grad / norm
        if psi_max(S, x) < -depth:
            return x
    reference = np.asarray(reference, dtype=float)
    for candidate in reference + box * rng.uniform(-1.0, 1.0, size=(512, S.n)):
        if psi_max(S, candidate) < -depth:
            return candidate
    return None


def _descriptor(doc, fields) -> SetDescriptor:
    kind = doc["kind"]
    return SetDescriptor(
        kind=kind,
        point=None if doc.get("point") is None else np.array(doc["point"]),
        a=None if doc.get("a") is None else np.array(doc["a"]),
        b=float(doc.get("b", 0.0)),
        fields=fields,
    )


@dataclass(eq=False)
class BuiltProblem:
    problem: SweepingProblem
    schedule: PenaltySchedule
    estimates: Dict[str, float]
    center: Optional[np.ndarray] = None
    source: Optional[ProblemFile] = None


def estimate_constants(problem: ProblemFile, rng, samples: int = 256, box: float = 3.0):
    """
    Return (constants, center): eta, Mbar_psi and Mbar, each taken from the
    document when given and otherwise estimated from seeded samples.
    """
    S = problem.sweeping_set()
    parsed = problem.parse()
    constants = dict(problem.constants)
    center = find_interior_point(S, problem.reference_point(), rng, box)
    if all(key in constants for key in CONSTANT_KEYS):
        return constants, center
    if center is None:
        raise NoInteriorPoint(problem.reference_point())
    boundary = boundary_samples(S, center, rng, samples, box)
    interior = interior_samples(S, center, rng, samples, box) + [center]
    eta_hat, Mbar_psi_hat = estimate_bounds(S, boundary, interior)
    constants.setdefault("eta", eta_hat)
    constants.setdefault("Mbar_psi", Mbar_psi_hat)
    if "Mbar" not in constants:
        spec = DynamicsSpec(parsed["f"], parsed["phi"], S, problem.T, 1.0)
        constants["Mbar"] = estimate_Mbar(spec, boundary + interior, problem.lo, problem.hi, rng)
    logger.info("constants for %s: %s", problem.name or "<problem>",
                ", ".join(f"{key}={constants[key]:.6g}" for key in CONSTANT_KEYS))
    return constants, center


def build_schedule(problem: ProblemFile, S: SweepingSet, Mbar: float) -> PenaltySchedule:
    if "gammas" in problem.schedule:
        return PenaltySchedule.for_set(S, problem.schedule["gammas"], Mbar)
    return PenaltySchedule.auto(S, Mbar, **problem.schedule["auto"])


def build_problem(problem: ProblemFile, seed: int = 0, samples: int = 256, box: float = 3.0) -> BuiltProblem:
    rng = np.random.default_rng(seed)
    parsed = problem.parse()
    constants, center = estimate_constants(problem, rng, samples, box)
    if constants["eta"] <= 0:
        raise SchemaError(f"{problem.name or 'problem'}: estimated eta is zero; the boundary gradients cancel")
    S = problem.sweeping_set(constants["eta"], constants["Mbar_psi"])
    spec = DynamicsSpec(parsed["f"], parsed["phi"], S, problem.T, constants["Mbar"])
    schedule = build_schedule(problem, S, constants["Mbar"])
    sweeping_problem = SweepingProblem(
        spec=spec,
        g=parsed["g"],
        C0=_descriptor(problem.C0, parsed["C0"]),
        CT=_descriptor(problem.CT, parsed["CT"]),
        lo=problem.lo,
        hi=problem.hi,
        T=problem.T,
        delta=problem.delta,
        name=problem.name,
    )
    return BuiltProblem(sweeping_problem, schedule, constants, center, problem)


# --- builtin examples ------------------------------------------------------

@dataclass(frozen=True)
class ClosedForm:
    state: Callable[[float], np.ndarray]
    control: Callable[[float], np.ndarray]
    objective: float
    certificate: Optional[Callable] = None


class ExampleRegistry:
    def __init__(self):
        self._docs: Dict[str, Dict] = {}
        self._closed_forms: Dict[str, ClosedForm] = {}

    def register(self, doc: Dict, closed_form: Optional[ClosedForm] = None):
        name = doc["name"]
        ProblemFile.from_doc(doc)
        self._docs[name] = copy.deepcopy(doc)
        if closed_form is not None:
            self._closed_forms[name] = closed_form

    def names(self) -> List[str]:
        return sorted(self._docs)

    def __contains__(self, name):
        return name in self._docs

    def document(self, name: str) -> Dict:
        if name not in self._docs:
            raise SchemaError(f"unknown example {name!r}; available: {', '.join(self.names())}")
        return copy.deepcopy(self._docs[name])

    def get(self, name: str) -> ProblemFile:
        return ProblemFile.from_doc(self.document(name))

    def closed_form(self, name: str) -> Optional[ClosedForm]:
        return self._closed_forms.get(name)

    def export(self, name: str, path):
        return dump_problem(self.get(name), path)


def _document(name, description, n, m, T, psi, f, g, C0, CT, lo, hi, schedule, N, constants=None, phi="0"):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "description": description,
        "n": n,
        "m": m,
        "T": T,
        "psi": psi,
        "f": f,
        "phi": phi,
        "g": g,
        "C0": C0,
        "CT": CT,
        "U": {"lo": lo, "hi": hi},
        "delta": 1.0,
        "schedule": schedule,
        "N": N,
    }
    if constants:
        doc["constants"] = constants
    return doc


def _lens_document(name, CT, description):
    return _document(
        name, description, n=3, m=1, T=0.5,
        psi=["x1^2 + x2^2 + x3", "x1^2 + (x2 - 2)^2 + x3"],
        f=["4*x1 + u1", "x2 - 1", "-2*x1 - x2 + u1 + 2"],
        g="-x4^2 - x6 - 1",
        C0={"kind": "point", "point": [0.0, 1.0, -1.0]},
        CT=CT,
        lo=[-1.0], hi=[1.0],
        schedule={"gammas": [100.0, 200.0, 400.0]},
        N=100,
        constants={"eta": 0.5, "Mbar_psi": 10.0, "Mbar": 10.0},
    )


def _lens_state(t):
    return np.array([t, 1.0, -1.0 - t * t])


def _lens_certificate(N=2000):
    from .pmpverify import closed_form_certificate

    return closed_form_certificate(N)


registry = ExampleRegistry()
registry.register(
    _lens_document(
        "paper-6-1",
        {"kind": "affine", "a": [8.0, 0.0, -4.0], "b": 9.0},
        "Intersection of two paraboloid sublevel sets, fixed start and an affine terminal target.",
    ),
    ClosedForm(state=_lens_state, control=lambda t: np.array([1.0]), objective=0.0, certificate=_lens_certificate),
)
registry.register(_lens_document(
    "paper-6-1-free",
    {"kind": "all"},
    "Same dynamics and set with a free terminal state.",
))
registry.register(_document(
    "polygon-2d", "Triangle cut out by three half-planes, steered towards an outside target.",
    n=2, m=2, T=1.0,
    psi=["-x1", "-x2", "x1 + x2 - 2"],
    f=["u1", "u2"],
    g="(x3 - 2)^2 + (x4 - 2)^2",
    C0={"kind": "point", "point": [0.5, 0.5]},
    CT={"kind": "all"},
    lo=[-1.0, -1.0], hi=[1.0, 1.0],
    schedule={"auto": {"gamma_max": 400.0, "steps": 3}},
    N=40,
    constants={"eta": 0.2, "Mbar_psi": 1.6, "Mbar": 1.6},
))
registry.register(_document(
    "unit-ball", "Closed unit disc with a single smooth constraint.",
    n=2, m=2, T=1.0,
    psi=["x1^2 + x2^2 - 1"],
    f=["u1", "u2"],
    g="-x3",
    C0={"kind": "point", "point": [0.0, 0.0]},
    CT={"kind": "all"},
    lo=[-1.0, -1.0], hi=[1.0, 1.0],
    schedule={"auto": {"gamma_max": 400.0, "steps": 3}},
    N=40,
))
registry.register(_document(
    "duplicated", "Half-plane written twice; the coupling of the repeated gradient is 1.",
    n=2, m=1, T=1.0,
    psi=["x2", "x2"],
    f=["u1", "1"],
    g="(x3 - 1)^2",
    C0={"kind": "point", "point": [0.0, -0.5]},
    CT={"kind": "all"},
    lo=[-1.0], hi=[1.0],
    schedule={"gammas": [50.0, 100.0]},
    N=20,
    constants={"eta": 0.4, "Mbar_psi": 1.1, "Mbar": 1.6},
))
registry.register(_document(
    "opposing", "Two opposing half-planes meeting in a line; C has no interior.",
    n=2, m=1, T=1.0,
    psi=["x1", "-x1"],
    f=["0", "u1"],
    g="(x4 - 1)^2",
    C0={"kind": "point", "point": [0.0, 0.0]},
    CT={"kind": "all"},
    lo=[-1.0], hi=[1.0],
    schedule={"gammas": [10.0, 20.0]},
    N=20,
    constants={"eta": 0.5, "Mbar_psi": 1.1, "Mbar": 1.1},
))
