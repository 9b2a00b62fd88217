"""Finite-difference Bingham pipe-flow control problem and its parameter sweep.

The unit square is split into ``N`` subdivisions per side with homogeneous
Dirichlet data. ``A`` is the five-point Laplacian on interior nodes and
``K`` stacks centered differences in both directions, one gradient cell per
node. Plain centered differences on a grid with an odd number of interior
nodes per side have a nontrivial kernel; the first interior layer on the
low side is then switched to a one-sided difference.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import VIProblem
from .errors import InjectivityRepairFailed
from .stationarity import tracking_cost
from .trust_region import TRConfig, tr_optimize

log = logging.getLogger(__name__)

TABLE1_ALPHAS = (5e-3, 1e-3, 5e-4, 1e-4, 5e-5)
TABLE1_ITERATIONS = (24, 29, 33, 55, 58)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``N`` subdivisions per side, mesh step ``1/N``.

    With ``include_boundary`` the boundary nodes are kept as unknowns whose
    rows are identity-eliminated, giving ``(N+1)^2`` unknowns instead of
    ``(N-1)^2``.
    """

    N: int = 60
    include_boundary: bool = False

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two subdivisions")

    @property
    def h(self):
        return 1.0 / self.N

    @property
    def side(self):
        return self.N + 1 if self.include_boundary else self.N - 1

    @property
    def node_count(self):
        return self.side**2

    def interior_mask(self):
        """Boolean mask over unknowns, true on interior nodes."""
        if not self.include_boundary:
            return np.ones(self.node_count, dtype=bool)
        inner = np.zeros((self.side, self.side), dtype=bool)
        inner[1:-1, 1:-1] = True
        return inner.reshape(-1)

    def coordinates(self):
        """``(x, y)`` arrays of node coordinates in unknown ordering."""
        off = 0 if self.include_boundary else 1
        t = (np.arange(self.side) + off) * self.h
        X, Y = np.meshgrid(t, t, indexing="ij")
        return X.reshape(-1), Y.reshape(-1)


@dataclass(frozen=True)
class BinghamConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    alpha: float = 5e-4
    target: float = 1.0
    u0: float = 10.0
    tr: TRConfig = field(default_factory=TRConfig)
    lower_solver: object = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _second_difference(k, h):
    return sp.diags([-np.ones(k - 1), 2 * np.ones(k), -np.ones(k - 1)], [-1, 0, 1]) / h**2


def _embed(grid, op_inner):
    """Place an interior operator into the unknown vector of ``grid``."""
    if not grid.include_boundary:
        return sp.csr_matrix(op_inner)
    mask = grid.interior_mask()
    idx = np.flatnonzero(mask)
    E = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(grid.node_count, len(idx)))
    return E @ op_inner @ E.T


def build_laplacian_5pt(grid):
    """``h^-2`` scaled five-point Laplacian with Dirichlet elimination."""
    k = grid.N - 1
    T = _second_difference(k, grid.h)
    I = sp.identity(k)
    L = sp.kron(T, I) + sp.kron(I, T)
    A = _embed(grid, L)
    if grid.include_boundary:
        diag = np.where(grid.interior_mask(), 0.0, 4.0 / grid.h**2)
        A = A + sp.diags(diag)
    return sp.csc_matrix(A)


def centered_difference_1d(k, h, repair=False):
    """``(w_{i+1} - w_{i-1}) / 2h`` with zero ghost values; with ``repair`` the
    first row becomes the one-sided ``(w_1 - 0) / h``."""
    D = sp.diags([-np.ones(k - 1), np.ones(k - 1)], [-1, 1], shape=(k, k)).tolil() / (2 * h)
    if repair:
        D[0, :] = 0.0
        D[0, 0] = 1.0 / h
    return sp.csr_matrix(D)


def _smallest_singular(D):
    return float(np.linalg.svd(D.toarray(), compute_uv=False).min()) if D.shape[0] else 0.0


def build_gradient_centered(grid, return_variant=False):
    """Centered-difference gradient ``(K1, K2)``, one cell per node.

    The Kronecker structure gives ``K^T K = D^T D (x) I + I (x) D^T D``, so
    injectivity of ``K`` is that of the one-dimensional operator ``D``.
    """
    k = grid.N - 1
    variant = "centered"
    D = centered_difference_1d(k, grid.h)
    scale = 1.0 / grid.h
    if _smallest_singular(D) <= 1e-10 * scale:
        D = centered_difference_1d(k, grid.h, repair=True)
        variant = "centered+one-sided-first-layer"
        if _smallest_singular(D) <= 1e-10 * scale:
            raise InjectivityRepairFailed("one-sided first layer does not restore injectivity")
    I = sp.identity(k)
    K1 = sp.kron(D, I)
    K2 = sp.kron(I, D)
    if grid.include_boundary:
        # boundary cells see the node value itself so K stays injective there
        mask = grid.interior_mask()
        B = sp.diags(np.where(mask, 0.0, 1.0 / grid.h))
        K1 = _embed(grid, K1) + B
        K2 = _embed(grid, K2)
    K = (sp.csr_matrix(K1), sp.csr_matrix(K2))
    return (K, variant) if return_variant else K


def bingham_problem(grid, u=None, u0=10.0):
    A = build_laplacian_5pt(grid)
    K = build_gradient_centered(grid)
    if u is None:
        u = np.full(grid.node_count, float(u0))
    return VIProblem(A, K, u)


def bingham_cost(grid, alpha, target=1.0):
    return tracking_cost(np.full(grid.node_count, float(target)), alpha)


@dataclass
class ExperimentResult:
    alpha: float
    trace: object
    u: np.ndarray
    y: np.ndarray
    p: np.ndarray
    summary: dict


def run_experiment(cfg):
    """Run the trust-region method on the Bingham control problem.

    Returns an :class:`ExperimentResult` with the trace, optimal control,
    state and adjoint and a summary dict ``{alpha, iterations, f_initial,
    f_final, grad_norm_final, stop_reason, seconds, gradient_variant}``.
    """
    from .trust_region import ReducedProblem, generalized_gradient
    from .sensitivity import BiactivePartition, adjoint_solve

    grid = cfg.grid
    prob = bingham_problem(grid, u0=cfg.u0)
    cost = bingham_cost(grid, cfg.alpha, cfg.target)
    _, variant = build_gradient_centered(grid, return_variant=True)
    t0 = time.perf_counter()
    u_star, trace = tr_optimize(prob, cost, cfg.tr, prob.u, lower=cfg.lower_solver)
    secs = time.perf_counter() - t0
    pu, sol, sets = ReducedProblem(prob, cost, cfg.lower_solver).solve(u_star)
    adj = adjoint_solve(pu, sol, sets, BiactivePartition.all_zero(sets), cost.grad_y(sol.y, u_star))
    g = generalized_gradient(prob, cost, u_star, sol, sets)
    summary = {
        "alpha": cfg.alpha,
        "iterations": trace.iterations,
        "f_initial": trace.records[0].f if trace.records else float("nan"),
        "f_final": float(cost.eval(sol.y, u_star)),
        "grad_norm_final": float(np.linalg.norm(g)),
        "stop_reason": trace.stop_reason,
        "seconds": secs,
        "gradient_variant": variant,
    }
    return ExperimentResult(cfg.alpha, trace, u_star, np.array(sol.y), adj.p, summary)


def sweep_table1(alphas=TABLE1_ALPHAS, base=None):
    """Run :func:`run_experiment` for each ``alpha``; returns the results in order."""
    base = BinghamConfig() if base is None else base
    out = []
    for a in alphas:
        cfg = BinghamConfig(base.grid, a, base.target, base.u0, base.tr, base.lower_solver)
        res = run_experiment(cfg)
        log.info("alpha=%g iterations=%d", a, res.summary["iterations"])
        out.append(res)
    return out


def boundary_adjacent_max(grid, u):
    """Largest control value on the unknowns next to the boundary."""
    side = grid.side
    U = np.asarray(u).reshape(side, side)
    lo, hi = (1, side - 2) if grid.include_boundary else (0, side - 1)
    ring = np.zeros_like(U, dtype=bool)
    ring[lo, lo : hi + 1] = ring[hi, lo : hi + 1] = True
    ring[lo : hi + 1, lo] = ring[lo : hi + 1, hi] = True
    return float(U[ring].max())
