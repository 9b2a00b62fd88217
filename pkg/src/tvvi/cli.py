"""Command-line front end.

Every subcommand reads its inputs from files, writes its results into the
``--out`` directory together with a ``manifest.json`` and maps failures onto
fixed exit codes: 2 for bad input, 3 for a solver that did not converge and
4 for an exceeded partition cap.
"""

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from .core import classify_sets, make_solution
from .errors import (
    DimensionError,
    Infeasible,
    NoConvergence,
    NoValidPartition,
    PartitionCapExceeded,
    SingularSystem,
    StepSizeInvalid,
    TVVIError,
)
from .io import (
    ProblemFormatError,
    RunManifest,
    file_digest,
    read_problem,
    read_solution,
    solution_record,
    write_csv,
    write_json,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2
EXIT_NO_CONVERGENCE = 3
EXIT_CAP_EXCEEDED = 4

log = logging.getLogger("tvvi")


def _exit_code(exc):
    if isinstance(exc, (ProblemFormatError, DimensionError, StepSizeInvalid, ValueError)):
        return EXIT_BAD_INPUT
    if isinstance(exc, (NoConvergence, Infeasible, SingularSystem, NoValidPartition)):
        return EXIT_NO_CONVERGENCE
    if isinstance(exc, PartitionCapExceeded):
        return EXIT_CAP_EXCEEDED
    return EXIT_FAILURE


def _limit_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def _vector(spec, n=None):
    """A vector from a text file or an inline comma-separated list."""
    if os.path.isfile(spec):
        v = np.loadtxt(spec, ndmin=1)
    else:
        try:
            v = np.array([float(t) for t in spec.split(",") if t.strip()])
        except ValueError as exc:
            raise ProblemFormatError(f"cannot parse vector {spec!r}") from exc
    if n is not None and v.shape != (n,):
        raise ProblemFormatError(f"vector has length {v.size}, expected {n}")
    return v


def _indices(spec):
    """Cell numbers on the command line are 1-based; returns 0-based indices."""
    if not spec:
        return []
    try:
        idx = sorted(int(t) - 1 for t in spec.split(",") if t.strip())
    except ValueError as exc:
        raise ProblemFormatError(f"cannot parse index list {spec!r}") from exc
    if idx and idx[0] < 0:
        raise ProblemFormatError("cell numbers start at 1")
    return idx


def _cells(idx):
    """0-based indices as the 1-based cell numbers used in output files."""
    return [int(j) + 1 for j in idx]


def _lower_solver(args):
    from .solvers import IPMConfig, PDHGConfig, SSNConfig, solve_vi_ipm, solve_vi_pdhg, solve_vi_ssn

    if args.solver == "ipm":
        cfg = IPMConfig(tol=min(args.tol, IPMConfig.tol), max_iter=args.max_iter or IPMConfig.max_iter)
        return lambda prob, warm_y=None: solve_vi_ipm(prob, cfg)
    if args.solver == "pdhg":
        cfg = PDHGConfig(tol=args.tol, max_iter=args.max_iter or PDHGConfig.max_iter)

        def lower(prob, warm_y=None):
            warm = None
            if warm_y is not None:
                warm = make_solution(prob, warm_y, np.zeros((prob.m, prob.d)))
            return solve_vi_pdhg(prob, cfg, warm=warm)

        return lower
    cfg = SSNConfig(
        gamma=args.gamma,
        tol_newton=args.tol,
        max_iter=args.max_iter or SSNConfig.max_iter,
        polish=not args.no_polish,
    )
    return lambda prob, warm_y=None: solve_vi_ssn(prob, cfg, y0=warm_y)


def _cost(args, n):
    from .stationarity import tracking_cost

    return tracking_cost(np.full(n, float(args.target)), args.alpha)


def _solution(args, prob):
    if args.solution:
        return read_solution(args.solution, prob)
    return _lower_solver(args)(prob)


def _derivative_record(res, sets):
    return {
        "kind": res.kind.name,
        "eta": res.eta,
        "multiplier": res.multiplier,
        "partition": None
        if res.partition is None
        else {"b0": _cells(res.partition.b0), "b1": _cells(res.partition.b1)},
        "ray_coefficients": res.ray_coefficients,
        "residual": res.residual,
        "biactive": _cells(sets.biactive),
    }


# --- subcommands -----------------------------------------------------------


def cmd_vi_solve(args):
    prob = read_problem(args.problem)
    sol = _lower_solver(args)(prob)
    return {"solution.json": solution_record(sol)}, [args.problem]


def cmd_differentiate(args):
    from .sensitivity import directional_derivative

    prob = read_problem(args.problem)
    sol = _solution(args, prob)
    sets = classify_sets(prob, sol)
    h = _vector(args.direction, prob.n)
    res = directional_derivative(prob, sol, sets, h, partition_cap=args.partition_cap)
    return {"derivative.json": _derivative_record(res, sets)}, [args.problem]


def cmd_subdiff(args):
    from .sensitivity import BiactivePartition, bouligand_element_apply, clarke_element_apply

    prob = read_problem(args.problem)
    sol = _solution(args, prob)
    sets = classify_sets(prob, sol)
    h = _vector(args.direction, prob.n)
    if args.clarke:
        res = clarke_element_apply(prob, sol, sets, h)
    else:
        b1 = _indices(args.b1)
        unknown = set(b1) - set(int(j) for j in sets.biactive)
        if unknown:
            raise ProblemFormatError(f"cells {_cells(sorted(unknown))} are not biactive")
        b0 = [int(j) for j in sets.biactive if int(j) not in b1]
        res = bouligand_element_apply(prob, sol, sets, BiactivePartition(b0, b1), h)
    return {"subdiff.json": _derivative_record(res, sets)}, [args.problem]


def cmd_check_stationarity(args):
    from .stationarity import b_stationarity_residual, strong_stationarity_check

    prob = read_problem(args.problem)
    u = prob.u if args.control is None else _vector(args.control, prob.n)
    prob = prob.with_control(u)
    cost = _cost(args, prob.n)
    sol = _solution(args, prob)
    cert = strong_stationarity_check(prob, cost, u, tol=args.tol, sol=sol)
    b_res = b_stationarity_residual(prob, cost, u, sol=sol, seed=args.seed)
    rec = {
        "holds": cert.holds,
        "residuals": cert.residuals,
        "b_stationarity_residual": b_res,
        "skipped_rays": _cells(cert.skipped_rays),
        "p": cert.p,
        "mu": cert.mu,
    }
    return {"certificate.json": rec}, [args.problem]


def _tr_config(args):
    from .trust_region import TRConfig

    cfg = TRConfig()
    if args.config:
        from .io import read_json

        try:
            cfg = replace(cfg, **read_json(args.config))
        except TypeError as exc:
            raise ProblemFormatError(f"unknown trust-region option: {exc}") from exc
    if args.tr_max_iter is not None:
        cfg = replace(cfg, max_iter=args.tr_max_iter)
    return cfg


TRACE_HEADER = ["iter", "f", "grad_norm", "delta", "rho", "phase", "step", "psi"]


def cmd_optimize(args):
    from .trust_region import tr_optimize

    prob = read_problem(args.problem)
    u0 = prob.u if args.control is None else _vector(args.control, prob.n)
    cost = _cost(args, prob.n)
    cfg = _tr_config(args)
    u, trace = tr_optimize(prob, cost, cfg, u0, lower=_lower_solver(args))
    out = {
        "trace.csv": (TRACE_HEADER, list(trace.rows())),
        "control.csv": (["u"], [[v] for v in u]),
        "result.json": {
            "stop_reason": trace.stop_reason,
            "iterations": trace.iterations,
            "f_final": trace.records[-1].f if trace.records else None,
            "tr_config": asdict(cfg),
        },
    }
    return out, [args.problem]


def _grid_rows(grid, values):
    x, y = grid.coordinates()
    return [[a, b, v] for a, b, v in zip(x, y, values)]


def cmd_experiment(args):
    from .bingham import BinghamConfig, GridSpec, TABLE1_ITERATIONS, run_experiment

    if args.which != "table1":
        raise ProblemFormatError(f"unknown experiment {args.which!r}")
    grid = GridSpec(args.grid, include_boundary=args.include_boundary)
    tr = _tr_config(args)
    out = {}
    summary_rows = []
    for a in args.alphas:
        cfg = BinghamConfig(grid=grid, alpha=a, tr=tr, lower_solver=_lower_solver(args))
        res = run_experiment(cfg)
        tag = f"alpha_{a:g}"
        out[f"trace_{tag}.csv"] = (TRACE_HEADER, list(res.trace.rows()))
        for name, field_values in (("control", res.u), ("state", res.y), ("adjoint", res.p)):
            out[f"{name}_{tag}.csv"] = (["x", "y", name], _grid_rows(grid, field_values))
        s = res.summary
        summary_rows.append(
            [a, s["iterations"], s["f_initial"], s["f_final"], s["grad_norm_final"],
             s["stop_reason"], s["gradient_variant"]]
        )
    header = ["alpha", "iterations", "f_initial", "f_final", "grad_norm_final",
              "stop_reason", "gradient_variant"]
    out["summary.csv"] = (header, summary_rows)
    ref = dict(zip((5e-3, 1e-3, 5e-4, 1e-4, 5e-5), TABLE1_ITERATIONS))
    log.info("reference iteration counts: %s", ref)
    return out, []


# --- wiring ----------------------------------------------------------------


def _add_solver_flags(p, default="ssn"):
    p.add_argument("--solver", choices=("ssn", "pdhg", "ipm"), default=default,
                   help=f"lower-level solver (default {default})")
    p.add_argument("--gamma", type=float, default=1000.0, help="Huber parameter for ssn")
    p.add_argument("--max-iter", type=int, default=None, help="lower-level iteration cap")
    p.add_argument("--no-polish", action="store_true",
                   help="return the regularized ssn solution without exact refinement")


def _add_cost_flags(p):
    p.add_argument("--alpha", type=float, default=5e-4, help="control-cost weight")
    p.add_argument("--target", type=float, default=1.0, help="constant tracking target")


def _add_tr_flags(p):
    p.add_argument("--config", default=None, help="JSON file with trust-region options")
    p.add_argument("--tr-max-iter", type=int, default=None)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--tol", type=float, default=1e-10)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tvvi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vi-solve", parents=[common], help="solve the variational inequality")
    p.add_argument("problem", help="JSON problem descriptor")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_vi_solve)

    for name, func, helptext in (
        ("differentiate", cmd_differentiate, "directional derivative of the solution map"),
        ("subdiff", cmd_subdiff, "element of the Bouligand or Clarke subdifferential"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("problem")
        p.add_argument("--solution", default=None, help="solution.json; solved afresh if absent")
        p.add_argument("--direction", required=True, help="file or comma-separated list")
        _add_solver_flags(p)
        p.set_defaults(func=func)
        if name == "differentiate":
            p.add_argument("--partition-cap", type=int, default=20)
        else:
            p.add_argument("--b1", default="", help="comma-separated biactive cells (numbered from 1) on their line")
            p.add_argument("--clarke", action="store_true", help="generalized-Jacobian element")

    p = sub.add_parser("check-stationarity", parents=[common], help="stationarity certificate")
    p.add_argument("problem")
    p.add_argument("--control", default=None)
    p.add_argument("--solution", default=None)
    _add_cost_flags(p)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_check_stationarity)

    p = sub.add_parser("optimize", parents=[common], help="trust-region optimal control")
    p.add_argument("problem")
    p.add_argument("--control", default=None, help="initial control; defaults to the problem's u")
    _add_cost_flags(p)
    _add_solver_flags(p, "ipm")
    _add_tr_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("experiment", parents=[common], help="Bingham flow parameter sweep")
    p.add_argument("which", choices=("table1",))
    p.add_argument("--alphas", type=float, nargs="+", default=[5e-3, 1e-3, 5e-4, 1e-4, 5e-5])
    p.add_argument("--grid", type=int, default=60, help="subdivisions per side")
    p.add_argument("--include-boundary", action="store_true")
    _add_solver_flags(p, "ipm")
    _add_tr_flags(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def _write_outputs(directory, outputs):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, payload in sorted(outputs.items()):
        path = os.path.join(directory, name)
        if name.endswith(".csv"):
            header, rows = payload
            write_csv(path, header, rows)
        else:
            write_json(path, payload)
        paths.append(name)
    return paths


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads(args.threads)
    np.random.seed(args.seed)
    t0 = time.perf_counter()
    try:
        outputs, inputs = args.func(args)
    except (TVVIError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc if not isinstance(exc, OSError) else ProblemFormatError(str(exc)))
    paths = _write_outputs(args.out, outputs)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = RunManifest(
        command=args.command,
        config=config,
        input_hashes={p: file_digest(p) for p in inputs if os.path.isfile(p)},
        outputs=paths,
        wall_time=time.perf_counter() - t0,
    )
    manifest.write(args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
