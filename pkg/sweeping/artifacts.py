"""
Files written and read by the sweep command.

Every file goes through a temporary sibling and ``os.replace`` so readers
never see a half-written artifact; run directories are staged the same way.
Numbers are written with 17 significant digits, which round-trips doubles.
"""
import csv
import io
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager, suppress
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .dynamics import AdjointMeasure, ControlSignal, Trajectory
from .exceptions import SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def format_number(value) -> str:
    return format(float(value), ".17g")


def jsonable(value):
    """Recursively turn numpy containers and scalars into JSON-native values."""
    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        with suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    logger.debug("wrote %s", path)
    return path


def dumps_json(doc) -> str:
    return json.dumps(jsonable(doc), indent=2) + "\n"


def write_json(path, doc) -> Path:
    return atomic_write_text(path, dumps_json(doc))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise SchemaError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


@contextmanager
def staged_directory(target):
    """
    Yield a scratch directory whose files are moved into ``target`` on success.

    Nothing reaches ``target`` when the body raises.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    target.mkdir(exist_ok=True)
    for item in sorted(staging.iterdir()):
        os.replace(item, target / item.name)
    staging.rmdir()


# --- CSV -------------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(value) for value in row])
    return atomic_write_text(path, buffer.getvalue())


def read_csv(path):
    """Return (header, rows as a float array)."""
    try:
        with open(path, encoding="utf-8", newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            rows = [[float(value) for value in row] for row in reader if row]
    except FileNotFoundError as exc:
        raise SchemaError(f"{path}: no such file") from exc
    except (StopIteration, ValueError) as exc:
        raise SchemaError(f"{path}: malformed CSV ({exc})") from exc
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def trajectory_rows(traj: Trajectory, control: Optional[ControlSignal] = None):
    header = ["t"] + [f"x{i + 1}" for i in range(traj.states.shape[1])]
    if control is not None:
        header += [f"u{i + 1}" for i in range(control.m)]
    header += [f"xi{i + 1}" for i in range(traj.multipliers.shape[1])]
    rows = []
    for k, t in enumerate(traj.grid):
        row = [t, *traj.states[k]]
        if control is not None:
            row += list(control.at(t))
        row += list(traj.multipliers[k])
        rows.append(row)
    return header, rows


def write_trajectory_csv(path, traj: Trajectory, control: Optional[ControlSignal] = None) -> Path:
    header, rows = trajectory_rows(traj, control)
    return write_csv(path, header, rows)


def atoms_path(path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.atoms.json")


def write_adjoint_csv(path, grid, p, measures: Sequence[AdjointMeasure]) -> List[Path]:
    """Adjoint nodes plus the measure densities; atoms go to a ``.atoms.json`` sidecar."""
    p = np.asarray(p, dtype=float)
    header = ["t"] + [f"p{i + 1}" for i in range(p.shape[1])] + [f"nu{i + 1}_density" for i in range(len(measures))]
    rows = [[t, *p[k], *(nu.density[k] for nu in measures)] for k, t in enumerate(grid)]
    written = [write_csv(path, header, rows)]
    atoms = [{"i": i + 1, "t": float(t), "weight": float(w)} for i, nu in enumerate(measures) for t, w in nu.atoms]
    written.append(write_json(atoms_path(path), atoms))
    return written


def read_control_csv(path, m: int) -> ControlSignal:
    """Control from a CSV with a ``t`` column and ``u1..um``; the last row only closes the grid."""
    header, rows = read_csv(path)
    try:
        columns = [header.index("t")] + [header.index(f"u{i + 1}") for i in range(m)]
    except ValueError as exc:
        raise SchemaError(f"{path}: control CSV needs columns t, u1..u{m}") from exc
    if len(rows) < 1:
        raise SchemaError(f"{path}: control CSV has no rows")
    grid = rows[:, columns[0]]
    if np.any(np.diff(grid) <= 0):
        raise SchemaError(f"{path}: control grid must be strictly increasing")
    return ControlSignal(grid, rows[:-1, columns[1:]].reshape(len(grid) - 1, m))


# --- certificate codec -----------------------------------------------------

def certificate_to_doc(cert) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "grid": cert.grid,
        "x": cert.x,
        "u": cert.u.values,
        "p": cert.p,
        "p_jumps": [{"t": float(t), "dp": np.asarray(dp)} for t, dp in cert.p_jumps],
        "nu": [
            {"density": nu.density, "atoms": [{"t": float(t), "w": float(w)} for t, w in nu.atoms]}
            for nu in cert.nus
        ],
        "xi": np.asarray(cert.xis).T,
        "lambda": float(cert.lam),
        "active_tol": cert.active_tol,
    }


def _array(doc, key, ndim, where="certificate"):
    if key not in doc:
        raise SchemaError(f"{where}: missing key {key!r}")
    try:
        value = np.array(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {key!r} is not a numeric array") from exc
    if value.ndim != ndim and value.size:
        raise SchemaError(f"{where}: {key!r} must be a {ndim}-d array, got shape {value.shape}")
    return value


def certificate_from_doc(doc):
    from .pmpverify import PmpCertificate

    if not isinstance(doc, dict) or not doc:
        raise SchemaError("certificate: expected a non-empty JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"certificate: unsupported schema_version {version!r}")
    grid = _array(doc, "grid", 1)
    count = len(grid)
    if count < 2 or np.any(np.diff(grid) <= 0):
        raise SchemaError("certificate: grid needs at least two strictly increasing nodes")
    x = _array(doc, "x", 2)
    p = _array(doc, "p", 2)
    u = _array(doc, "u", 2)
    xi = _array(doc, "xi", 2)
    if x.shape[0] != count or p.shape != x.shape:
        raise SchemaError(f"certificate: x and p must have {count} rows of equal width")
    if u.shape[0] != count - 1:
        raise SchemaError(f"certificate: u must have {count - 1} rows")
    if xi.shape[1] != count:
        raise SchemaError(f"certificate: every xi path needs {count} values")
    if "lambda" not in doc:
        raise SchemaError("certificate: missing key 'lambda'")
    nus = []
    for i, entry in enumerate(doc.get("nu") or []):
        density = _array(entry, "density", 1, f"certificate nu[{i}]")
        if len(density) != count:
            raise SchemaError(f"certificate nu[{i}]: density needs {count} values")
        try:
            atoms = [(float(atom["t"]), float(atom["w"])) for atom in entry.get("atoms", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"certificate nu[{i}]: malformed atom ({exc})") from exc
        nus.append(AdjointMeasure(grid, density, atoms))
    if len(nus) != xi.shape[0]:
        raise SchemaError(f"certificate: {len(nus)} measures for {xi.shape[0]} multiplier paths")
    jumps = []
    for entry in doc.get("p_jumps", []):
        try:
            dp = np.asarray(entry["dp"], dtype=float)
            t = float(entry["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"certificate: malformed jump ({exc})") from exc
        if dp.shape != (x.shape[1],):
            raise SchemaError("certificate: every jump dp must have n entries")
        jumps.append((t, dp))
    active_tol = doc.get("active_tol")
    return PmpCertificate(
        grid=grid, x=x, u=ControlSignal(grid, u), p=p, p_jumps=jumps, nus=nus, xis=xi.T,
        lam=float(doc["lambda"]), active_tol=None if active_tol is None else float(active_tol),
    )


def write_certificate(path, cert) -> Path:
    return write_json(path, certificate_to_doc(cert))


def read_certificate(path):
    return certificate_from_doc(read_json(path))
