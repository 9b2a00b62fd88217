"""Sensitivity of the solution map ``u -> y``.

All derivative objects solve a saddle-point system of one shape,

    L eta + C^T nu = h,    C eta = 0,

where ``L = A + sum_{j in I} K_j^T T_j K_j`` carries the curvature of the
norm on inactive cells, ``T_j = (I - n_j n_j^T) / |(K y)_j|`` with the unit
normal ``n_j``, and the rows of ``C`` pin ``(K eta)_j`` to zero (zero blocks)
or to the line through ``q_j`` (line blocks). Which cells go where is what
distinguishes the Frechet derivative, a Bouligand element, a generalized
Jacobian element and the adjoint. The directional derivative is the
solution of the cone-constrained QP ``min 1/2 <L eta, eta> - <h, eta>`` over
the cone of admissible directions; it is found by enumerating partitions of
the biactive set.
"""

import enum
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import ConeSpec, cone_membership
from .errors import DimensionError, NoValidPartition, PartitionCapExceeded
from .linalg import SaddleSolver, block_rows, line_rows, stacked_block_diag
from .slack import SlackSelection, min_euclidean_slack, min_linf_slack

__all__ = [
    "AdjointResult",
    "BiactivePartition",
    "DerivativeKind",
    "DerivativeResult",
    "DerivativeSystem",
    "DirectionalDerivative",
    "FrechetVerdict",
    "SlackSelection",
    "adjoint_solve",
    "bouligand_element_apply",
    "clarke_element_apply",
    "curvature_blocks",
    "difference_quotient",
    "directional_derivative",
    "frechet_check",
    "frechet_derivative",
    "linear_representative",
    "min_euclidean_slack",
    "min_linf_slack",
    "solution_map",
]

log = logging.getLogger(__name__)

PARTITION_CAP = 20
TOL_STRICT = 1e-8


class DerivativeKind(enum.Enum):
    DIRECTIONAL = "directional"
    FRECHET = "frechet"
    BOULIGAND_ELEMENT = "bouligand_element"
    CLARKE_ELEMENT = "clarke_element"


@dataclass(frozen=True, eq=False)
class BiactivePartition:
    b0: np.ndarray
    b1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b0", np.sort(np.asarray(self.b0, dtype=int).reshape(-1)))
        object.__setattr__(self, "b1", np.sort(np.asarray(self.b1, dtype=int).reshape(-1)))
        if np.intersect1d(self.b0, self.b1).size:
            raise ValueError("b0 and b1 must be disjoint")

    def validate(self, sets):
        union = np.union1d(self.b0, self.b1)
        if len(union) != len(self.b0) + len(self.b1) or not np.array_equal(
            union, np.sort(sets.biactive)
        ):
            raise ValueError("partition does not split the biactive set")

    @classmethod
    def all_zero(cls, sets):
        return cls(sets.biactive, [])

    @classmethod
    def all_line(cls, sets):
        return cls([], sets.biactive)


@dataclass(frozen=True, eq=False)
class DerivativeResult:
    """Derivative direction with its multiplier and provenance.

    ``multiplier`` is an ``(m, d)`` array: ``T_j (K eta)_j`` on inactive cells
    and the constraint multipliers on constrained cells.
    ``ray_coefficients[i]`` is ``<q_j, (K eta)_j>`` for ``j = partition.b1[i]``.
    """

    eta: np.ndarray
    multiplier: np.ndarray
    kind: DerivativeKind
    partition: BiactivePartition = None
    ray_coefficients: np.ndarray = None
    residual: float = 0.0


@dataclass(frozen=True, eq=False)
class AdjointResult:
    p: np.ndarray
    lam: np.ndarray
    partition: BiactivePartition
    residual: float = 0.0


@dataclass(frozen=True, eq=False)
class FrechetVerdict:
    """Outcome of the strict-complementarity test.

    ``slack`` is a certified strictly complementary slack when
    ``differentiable`` holds; ``r_bar`` is the min-sup-norm value when it was
    computed.
    """

    differentiable: bool
    slack: np.ndarray = None
    r_bar: float = None

    def __bool__(self):
        return self.differentiable


# --- the shared linear system ----------------------------------------------


def curvature_blocks(prob, y, inactive):
    """``T_j`` on inactive cells, zero elsewhere; shape ``(m, d, d)``."""
    Ky = prob.apply_K(y)
    blocks = np.zeros((prob.m, prob.d, prob.d))
    if len(inactive):
        g = Ky[inactive]
        nrm = np.linalg.norm(g, axis=1)
        n = g / nrm[:, None]
        blocks[inactive] = (np.eye(prob.d)[None] - n[:, :, None] * n[:, None, :]) / nrm[
            :, None, None
        ]
    return blocks


class DerivativeSystem:
    """Factorized saddle system for fixed zero blocks and line blocks.

    Parameters
    ----------
    prob, sol, sets
        Problem, solution and its index sets.
    zero_blocks : array of int
        Cells with ``(K eta)_j = 0``.
    line_blocks : array of int
        Cells with ``(K eta)_j`` on ``span(q_j)``.
    """

    def __init__(self, prob, sol, sets, zero_blocks, line_blocks):
        self.prob = prob
        self.zero = np.asarray(zero_blocks, dtype=int)
        self.line = np.asarray(line_blocks, dtype=int)
        m, d = prob.m, prob.d
        Kst = prob.K_stacked
        self.T = curvature_blocks(prob, sol.y, sets.inactive)
        self.L = (prob.A + Kst.T @ stacked_block_diag(self.T) @ Kst).tocsc()
        q = np.asarray(sol.q)[self.line]
        nq = np.linalg.norm(q, axis=1) if len(self.line) else np.zeros(0)
        if np.any(nq < 0.5):
            raise ValueError("line blocks need a slack of (nearly) unit norm")
        self.dirs = q / nq[:, None] if len(self.line) else np.zeros((0, d))
        Z = block_rows(m, d, self.zero)
        R = line_rows(m, d, self.line, self.dirs)
        self._nz = Z.shape[0]
        self._rows = sp.vstack([Z, R], format="csr")
        self.C = (self._rows @ Kst).tocsr()
        self._solver = SaddleSolver(self.L, self.C if self.C.shape[0] else None)

    def solve(self, h):
        prob = self.prob
        h = np.asarray(h, dtype=float)
        if h.shape != (prob.n,):
            raise DimensionError(f"direction has shape {h.shape}, expected {(prob.n,)}")
        eta, nu = self._solver.solve(h)
        Keta = prob.apply_K(eta)
        theta = np.einsum("jab,jb->ja", self.T, Keta)
        if len(nu):
            # rows -> (m, d) multiplier array through the selection transpose
            theta += (self._rows.T @ nu).reshape(prob.d, prob.m).T
        resid = np.linalg.norm(self.L @ eta + (self.C.T @ nu if len(nu) else 0.0) - h)
        if self.C.shape[0]:
            resid = max(resid, np.linalg.norm(self.C @ eta))
        c = np.einsum("ja,ja->j", self.dirs, Keta[self.line]) if len(self.line) else np.zeros(0)
        return eta, theta, c, float(resid)

    def objective(self, eta, h):
        return 0.5 * eta @ (self.L @ eta) - h @ eta


# --- Frechet differentiability ---------------------------------------------


def frechet_check(prob, sol, sets, tol_strict=TOL_STRICT):
    """Decide whether some slack is strictly complementary on the active set."""
    A = sets.active
    if not len(A):
        return FrechetVerdict(True, np.array(sol.q), 0.0)
    if np.linalg.norm(sol.q[A], axis=1).max() < 1.0 - tol_strict:
        return FrechetVerdict(True, np.array(sol.q), None)
    sel = min_linf_slack(prob, sol, sets)
    if sel.r_bar < 1.0 - tol_strict:
        return FrechetVerdict(True, sel.q, sel.r_bar)
    return FrechetVerdict(False, None, sel.r_bar)


def frechet_derivative(prob, sol, sets, h):
    """Derivative at a strictly complementary point: ``(K eta)_j = 0`` on all active cells."""
    system = DerivativeSystem(prob, sol, sets, sets.active, [])
    eta, theta, _, resid = system.solve(h)
    return DerivativeResult(eta, theta, DerivativeKind.FRECHET, None, None, resid)


# --- elements of the subdifferentials --------------------------------------


def bouligand_element_apply(prob, sol, sets, partition, h):
    """Apply the Bouligand-subdifferential element attached to ``partition``."""
    partition.validate(sets)
    zero = np.union1d(sets.strongly_active, partition.b0)
    system = DerivativeSystem(prob, sol, sets, zero, partition.b1)
    eta, theta, c, resid = system.solve(h)
    return DerivativeResult(eta, theta, DerivativeKind.BOULIGAND_ELEMENT, partition, c, resid)


def clarke_element_apply(prob, sol, sets, h):
    """Generalized-Jacobian element with every biactive cell on its line."""
    partition = BiactivePartition.all_line(sets)
    system = DerivativeSystem(prob, sol, sets, sets.strongly_active, partition.b1)
    eta, theta, c, resid = system.solve(h)
    return DerivativeResult(eta, theta, DerivativeKind.CLARKE_ELEMENT, partition, c, resid)


def adjoint_solve(prob, sol, sets, partition, rhs):
    """Generalized adjoint ``p`` for the partition; ``rhs`` is ``grad_y J``."""
    res = bouligand_element_apply(prob, sol, sets, partition, rhs)
    return AdjointResult(res.eta, res.multiplier, partition, res.residual)


# --- directional derivative ------------------------------------------------


def _kkt_signs_hold(prob, sol, partition, theta, c, tol):
    if len(partition.b1) and np.min(c) < -tol:
        return False
    if len(partition.b0):
        q = sol.q[partition.b0]
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        if np.max(np.einsum("ja,ja->j", theta[partition.b0], q)) > tol:
            return False
    return True


def _candidate_partitions(B, first):
    """``first`` (as a b1 mask) then all subsets of ``B`` in bitmask order."""
    yield first
    k = len(B)
    for bits in range(2**k):
        mask = np.array([(bits >> i) & 1 for i in range(k)], dtype=bool)
        if not np.array_equal(mask, first):
            yield mask


class DirectionalDerivative:
    """Directional derivatives at a fixed solution, reusing factorizations.

    Partitions of the biactive set are tried starting from the one suggested
    by the generalized-Jacobian element; the first whose multipliers satisfy
    the KKT sign conditions of the cone QP is returned. If rounding defeats
    every sign test the cone-feasible candidate with least QP objective is
    returned, which is the QP minimizer since the minimizer is one of the
    candidates.
    """

    def __init__(self, prob, sol, sets, partition_cap=PARTITION_CAP, tol=1e-9):
        self.prob, self.sol, self.sets = prob, sol, sets
        self.B = np.asarray(sets.biactive, dtype=int)
        if len(self.B) > partition_cap:
            raise PartitionCapExceeded(len(self.B), partition_cap)
        self.tol = tol
        self.cone = ConeSpec.cone(sol, sets)
        self._systems = {}

    def system(self, mask):
        key = mask.tobytes()
        if key not in self._systems:
            zero = np.union1d(self.sets.strongly_active, self.B[~mask])
            self._systems[key] = DerivativeSystem(
                self.prob, self.sol, self.sets, zero, self.B[mask]
            )
        return self._systems[key]

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        B = self.B
        scale = max(1.0, np.linalg.norm(h))
        tol = self.tol * scale
        if not len(B):
            eta, theta, c, resid = self.system(np.zeros(0, bool)).solve(h)
            part = BiactivePartition([], [])
            return DerivativeResult(eta, theta, DerivativeKind.DIRECTIONAL, part, c, resid)
        c_line = self.system(np.ones(len(B), bool)).solve(h)[2]
        best = None
        for mask in _candidate_partitions(B, c_line > tol):
            part = BiactivePartition(B[~mask], B[mask])
            system = self.system(mask)
            eta, theta, c, resid = system.solve(h)
            res = DerivativeResult(eta, theta, DerivativeKind.DIRECTIONAL, part, c, resid)
            if _kkt_signs_hold(self.prob, self.sol, part, theta, c, tol):
                return res
            inside, _ = cone_membership(self.cone, self.prob, eta, tol=tol)
            if inside:
                obj = system.objective(eta, h)
                if best is None or obj < best[0] - 1e-14 * scale**2:
                    best = (obj, res)
        if best is None:
            raise NoValidPartition("no partition yields a direction in the cone")
        log.warning("KKT sign tests failed for every partition; using least-objective candidate")
        return best[1]


def directional_derivative(prob, sol, sets, h, partition_cap=PARTITION_CAP, tol=1e-9):
    """Directional derivative of the solution map in direction ``h``.

    Solves the cone-constrained QP through :class:`DirectionalDerivative`;
    build that object directly to evaluate many directions at one point.
    """
    return DirectionalDerivative(prob, sol, sets, partition_cap, tol)(h)


def linear_representative(prob, sol, sets, h, partition_cap=PARTITION_CAP, tol=1e-9):
    """Partition whose Bouligand element reproduces the directional derivative at ``h``.

    Returns ``(result, partition)`` where ``result`` is the Bouligand element.
    """
    dd = directional_derivative(prob, sol, sets, h, partition_cap)
    B = np.asarray(sets.biactive, dtype=int)
    Keta = prob.apply_K(dd.eta)
    scale = max(1.0, np.linalg.norm(dd.eta))
    zero = np.linalg.norm(Keta[B], axis=1) <= tol * scale if len(B) else np.zeros(0, bool)
    part = BiactivePartition(B[zero], B[~zero])
    res = bouligand_element_apply(prob, sol, sets, part, h)
    err = np.linalg.norm(res.eta - dd.eta)
    if err > 1e-9 * scale:
        raise NoValidPartition(f"representative misses the directional derivative by {err:.3e}")
    return res, part


# --- validation oracle -----------------------------------------------------


def solution_map(prob, u, tol=1e-12):
    """Exact solution at control ``u``.

    An interior-point solve supplies the warm start for the primal-dual
    solver with active-set refinement, which then typically finishes within
    one refinement cycle.
    """
    from .solvers import IPMConfig, PDHGConfig, solve_vi_ipm, solve_vi_pdhg

    prob = prob.with_control(u)
    warm = solve_vi_ipm(prob, IPMConfig(snap=True))
    return solve_vi_pdhg(prob, PDHGConfig(tol=tol, polish=True), warm=warm)


def difference_quotient(prob, u, h, t, base=None):
    """``(S(u + t h) - S(u)) / t``."""
    if not t > 0:
        raise ValueError("t must be positive")
    u = np.asarray(u, dtype=float)
    h = np.asarray(h, dtype=float)
    y0 = solution_map(prob, u).y if base is None else np.asarray(base.y)
    y1 = solution_map(prob, u + t * h).y
    return (y1 - y0) / t

