"""File formats: Matrix Market operators, JSON records and CSV traces.

Floats are written with ``repr``, which is the shortest decimal string that
round-trips exactly, so every file reproduces in-memory values bit-exactly.
"""

import csv
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy
import scipy.io
import scipy.sparse as sp

from .core import VIProblem, make_solution
from .errors import TVVIError

MANIFEST_NAME = "manifest.json"


class ProblemFormatError(TVVIError, ValueError):
    """An input file is missing, malformed or inconsistent."""


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [_to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def write_json(path, record):
    """Write ``record`` as sorted, indented JSON; NaN and inf are kept as
    JSON extensions so traces with undefined ratios survive."""
    with open(path, "w") as fh:
        json.dump(_to_jsonable(record), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ProblemFormatError(f"cannot read JSON from {path}: {exc}") from exc


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path):
    """Return ``(header, rows)`` with numeric fields parsed back to numbers."""

    def parse(v):
        for conv in (int, float):
            try:
                return conv(v)
            except ValueError:
                pass
        return v

    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[parse(v) for v in row] for row in r]
    return header, rows


def write_matrix(path, M):
    scipy.io.mmwrite(path, sp.coo_matrix(M), precision=17)
    return path


def read_matrix(path):
    try:
        return sp.csr_matrix(scipy.io.mmread(path))
    except (OSError, ValueError) as exc:
        raise ProblemFormatError(f"cannot read Matrix Market file {path}: {exc}") from exc


def _resolve(base, p):
    return p if os.path.isabs(p) else os.path.join(base, p)


def read_problem(descriptor):
    """Load a :class:`VIProblem` from a JSON descriptor.

    The descriptor holds ``{n, m, d, A_path, K_paths, u}`` where ``u`` is an
    inline list or a path to a whitespace-separated text file. Relative
    paths are resolved against the descriptor's directory.
    """
    rec = read_json(descriptor)
    if not isinstance(rec, dict):
        raise ProblemFormatError("problem descriptor must be a JSON object")
    base = os.path.dirname(os.path.abspath(descriptor))
    missing = [k for k in ("n", "m", "d", "A_path", "K_paths", "u") if k not in rec]
    if missing:
        raise ProblemFormatError(f"descriptor lacks {', '.join(missing)}")
    A = read_matrix(_resolve(base, rec["A_path"]))
    K = tuple(read_matrix(_resolve(base, p)) for p in rec["K_paths"])
    u = rec["u"]
    if isinstance(u, str):
        try:
            u = np.loadtxt(_resolve(base, u), ndmin=1)
        except (OSError, ValueError) as exc:
            raise ProblemFormatError(f"cannot read control vector: {exc}") from exc
    try:
        prob = VIProblem(A, K, np.asarray(u, dtype=float))
    except (ValueError, TypeError) as exc:
        raise ProblemFormatError(str(exc)) from exc
    if (prob.n, prob.m, prob.d) != (rec["n"], rec["m"], rec["d"]):
        raise ProblemFormatError(
            f"descriptor says (n, m, d) = {(rec['n'], rec['m'], rec['d'])}, "
            f"files give {(prob.n, prob.m, prob.d)}"
        )
    return prob


def write_problem(prob, directory, name="problem"):
    """Write ``prob`` as Matrix Market files plus a descriptor; returns its path."""
    os.makedirs(directory, exist_ok=True)
    a_name = f"{name}_A.mtx"
    k_names = [f"{name}_K{i + 1}.mtx" for i in range(prob.d)]
    write_matrix(os.path.join(directory, a_name), prob.A)
    for Ki, kn in zip(prob.K, k_names):
        write_matrix(os.path.join(directory, kn), Ki)
    desc = {"n": prob.n, "m": prob.m, "d": prob.d, "A_path": a_name, "K_paths": k_names, "u": prob.u}
    return write_json(os.path.join(directory, f"{name}.json"), desc)


def solution_record(sol):
    r = sol.residuals
    return {
        "y": sol.y,
        "q": sol.q,
        "residuals": {"state_eq": r.state_eq, "comp": r.comp, "feas": r.feas},
        "iterations": sol.iterations,
        "solver": sol.solver,
    }


def read_solution(path, prob):
    """Load a solution file and recompute its residuals against ``prob``."""
    rec = read_json(path)
    try:
        y = np.asarray(rec["y"], dtype=float)
        q = np.asarray(rec["q"], dtype=float).reshape(prob.m, prob.d)
    except (KeyError, ValueError, TypeError) as exc:
        raise ProblemFormatError(f"malformed solution file {path}: {exc}") from exc
    return make_solution(prob, y, q, rec.get("iterations", 0), rec.get("solver", ""))


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance record written once per output directory."""

    command: str
    config: dict
    input_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_time: float = 0.0
    versions: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.versions:
            self.versions = {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            }

    def write(self, directory):
        return write_json(os.path.join(directory, MANIFEST_NAME), asdict(self))
