"""Problem and solution data model for TV-type variational inequalities.

A problem is the triple ``(A, K, u)``: find ``y`` such that

    <A y, v - y> + sum_j (|(K v)_j| - |(K y)_j|) >= <u, v - y>   for all v,

equivalently ``y`` minimizes ``1/2 <y, A y> - <u, y> + sum_j |(K y)_j|``. The
gradient operator ``K`` maps an n-vector to an ``(m, d)`` array whose row ``j``
is the discrete gradient at cell ``j``; it is stored as ``d`` sparse ``m x n``
blocks.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, TVVIError

EPS_ACTIVE = 1e-8
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class VIProblem:
    """Immutable problem data.

    Parameters
    ----------
    A : sparse matrix, shape (n, n)
        Symmetric positive definite operator.
    K : tuple of sparse matrices, each shape (m, n)
        Partial-derivative blocks ``K^(1), ..., K^(d)``.
    u : ndarray, shape (n,)
        Control.
    """

    A: sp.spmatrix
    K: tuple
    u: np.ndarray
    _Kst: sp.spmatrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = sp.csc_matrix(self.A, dtype=float)
        K = tuple(sp.csr_matrix(Ki, dtype=float) for Ki in self.K)
        u = np.array(self.u, dtype=float).reshape(-1)
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if not K:
            raise DimensionError("K needs at least one block")
        n = A.shape[0]
        m = K[0].shape[0]
        for Ki in K:
            if Ki.shape != (m, n):
                raise DimensionError(f"K block has shape {Ki.shape}, expected {(m, n)}")
        if u.shape != (n,):
            raise DimensionError(f"u has shape {u.shape}, expected {(n,)}")
        u.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "_Kst", sp.vstack(K, format="csr"))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.K[0].shape[0]

    @property
    def d(self):
        return len(self.K)

    @property
    def K_stacked(self):
        """``K`` as a single ``(d*m, n)`` matrix; row ``c*m + j`` is component
        ``c`` of cell ``j``."""
        return self._Kst

    def apply_K(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise DimensionError(f"vector has shape {y.shape}, expected {(self.n,)}")
        return (self._Kst @ y).reshape(self.d, self.m).T

    def apply_KT(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (self.m, self.d):
            raise DimensionError(f"slack has shape {q.shape}, expected {(self.m, self.d)}")
        return self._Kst.T @ q.T.reshape(-1)

    def with_control(self, u):
        return VIProblem(self.A, self.K, u)

    def check(self, n_probes=8, tol_sym=1e-12, seed=0):
        """Probe symmetry/definiteness of ``A`` and injectivity of ``K``."""
        rng = np.random.default_rng(seed)
        asym = abs(self.A - self.A.T)
        scale = max(1.0, abs(self.A).max())
        if asym.nnz and asym.max() > tol_sym * scale:
            raise TVVIError("A is not symmetric")
        for _ in range(n_probes):
            x = rng.standard_normal(self.n)
            if x @ (self.A @ x) <= 0:
                raise TVVIError("A failed the positive-definiteness probe")
            Kx = self.apply_K(x)
            if np.sum(Kx**2) <= 0:
                raise TVVIError("K failed the injectivity probe")
        return True


@dataclass(frozen=True, eq=False)
class ComplementarityResiduals:
    state_eq: float
    comp: float
    feas: float

    def max(self):
        return max(self.state_eq, self.comp, self.feas)


@dataclass(frozen=True, eq=False)
class VISolution:
    """State ``y`` and slack ``q`` (shape ``(m, d)``) with their residuals."""

    y: np.ndarray
    q: np.ndarray
    residuals: ComplementarityResiduals
    iterations: int = 0
    solver: str = ""


@dataclass(frozen=True, eq=False)
class IndexSets:
    inactive: np.ndarray
    active: np.ndarray
    strongly_active: np.ndarray
    biactive: np.ndarray
    eps_active: float = EPS_ACTIVE

    @property
    def m(self):
        return len(self.inactive) + len(self.active)


@dataclass(frozen=True, eq=False)
class ConeSpec:
    """Blocks constrained to zero and blocks constrained to a ray or line.

    ``ray_vectors[i]`` is the unit vector attached to ``ray_blocks[i]``.
    """

    zero_blocks: np.ndarray
    ray_blocks: np.ndarray
    ray_vectors: np.ndarray

    def __post_init__(self):
        zero = np.asarray(self.zero_blocks, dtype=int).reshape(-1)
        ray = np.asarray(self.ray_blocks, dtype=int).reshape(-1)
        vecs = np.asarray(self.ray_vectors, dtype=float)
        if vecs.size == 0:
            vecs = vecs.reshape(0, max(1, vecs.shape[-1] if vecs.ndim == 2 else 1))
        if len(vecs) != len(ray):
            raise DimensionError("one ray vector per ray block is required")
        if np.intersect1d(zero, ray).size:
            raise TVVIError("zero blocks and ray blocks must be disjoint")
        if len(vecs) and np.max(np.abs(np.linalg.norm(vecs, axis=1) - 1.0)) > 1e-8:
            raise TVVIError("ray vectors must have unit norm")
        object.__setattr__(self, "zero_blocks", zero)
        object.__setattr__(self, "ray_blocks", ray)
        object.__setattr__(self, "ray_vectors", vecs)

    @classmethod
    def cone(cls, sol, sets):
        """The cone of admissible derivative directions at a solution."""
        B = sets.biactive
        return cls(sets.strongly_active, B, _unit_rows(sol.q[B]))

    @classmethod
    def subspace(cls, sol, sets, b0, b1):
        """The subspace attached to a biactive partition ``b0 | b1``."""
        zero = np.union1d(sets.strongly_active, np.asarray(b0, dtype=int))
        b1 = np.asarray(b1, dtype=int)
        return cls(zero, b1, _unit_rows(sol.q[b1]))


def _unit_rows(Q):
    Q = np.asarray(Q, dtype=float)
    if Q.size == 0:
        return Q.reshape(0, Q.shape[-1] if Q.ndim == 2 else 1)
    return Q / np.linalg.norm(Q, axis=1, keepdims=True)


def energy(prob, y):
    """``1/2 <y, A y> - <u, y> + sum_j |(K y)_j|``."""
    y = np.asarray(y, dtype=float)
    Ky = prob.apply_K(y)
    return float(0.5 * y @ (prob.A @ y) - prob.u @ y + np.linalg.norm(Ky, axis=1).sum())


def residuals(prob, y, q):
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float).reshape(prob.m, prob.d)
    Ky = prob.apply_K(y)
    state = np.linalg.norm(prob.A @ y + prob.apply_KT(q) - prob.u)
    comp = np.abs(np.sum(q * Ky, axis=1) - np.linalg.norm(Ky, axis=1))
    feas = np.maximum(np.linalg.norm(q, axis=1) - 1.0, 0.0)
    return ComplementarityResiduals(
        float(state), float(comp.max(initial=0.0)), float(feas.max(initial=0.0))
    )


def make_solution(prob, y, q, iterations=0, solver=""):
    y = np.asarray(y, dtype=float).copy()
    q = np.asarray(q, dtype=float).reshape(prob.m, prob.d).copy()
    y.setflags(write=False)
    q.setflags(write=False)
    return VISolution(y, q, residuals(prob, y, q), iterations, solver)


def classify_sets(prob, sol, eps_active=EPS_ACTIVE, eps_strict=None):
    """Split cells into inactive, active, strongly active and biactive.

    A cell is active when ``|(K y)_j| <= eps_active``; an active cell is
    strongly active when ``|q_j| < 1 - eps_strict`` (default ``eps_active``).
    """
    eps_strict = eps_active if eps_strict is None else eps_strict
    gnorm = np.linalg.norm(prob.apply_K(sol.y), axis=1)
    qnorm = np.linalg.norm(sol.q, axis=1)
    active_mask = gnorm <= eps_active
    strong_mask = active_mask & (qnorm < 1.0 - eps_strict)
    idx = np.arange(prob.m)
    return IndexSets(
        inactive=idx[~active_mask],
        active=idx[active_mask],
        strongly_active=idx[strong_mask],
        biactive=idx[active_mask & ~strong_mask],
        eps_active=eps_active,
    )


def cone_membership(spec, prob, v, tol=1e-10, mode="cone"):
    """Test ``v`` against a :class:`ConeSpec`.

    ``mode="cone"`` requires ``(K v)_j`` on the ray through ``q_j``;
    ``mode="line"`` only requires it on the line ``span(q_j)``.

    Returns
    -------
    inside : bool
    report : dict
        Violation per offending block index.
    """
    if mode not in ("cone", "line"):
        raise ValueError(f"unknown mode {mode!r}")
    blocks = np.concatenate([spec.zero_blocks, spec.ray_blocks])
    if blocks.size and (blocks.min() < 0 or blocks.max() >= prob.m):
        raise DimensionError("cone specification refers to an unknown block")
    if spec.ray_vectors.size and spec.ray_vectors.shape[1] != prob.d:
        raise DimensionError("ray vectors have the wrong dimension")
    Kv = prob.apply_K(v)
    report = {}
    for j in spec.zero_blocks:
        viol = float(np.linalg.norm(Kv[j]))
        if viol > tol:
            report[int(j)] = viol
    for j, qj in zip(spec.ray_blocks, spec.ray_vectors):
        w = Kv[j]
        along = float(qj @ w)
        if mode == "cone":
            viol = np.linalg.norm(w) - along
        else:
            viol = float(np.linalg.norm(w - along * qj))
        if viol > tol:
            report[int(j)] = float(viol)
    return not report, report


def cone_membership_dual(prob, sol, sets, v, tol=1e-10):
    """Membership through the single-inequality description of the cone:

    ``<u - A y, v> >= sum_{I} <(Ky)_j/|(Ky)_j|, (Kv)_j> + sum_{A} |(Kv)_j|``.

    Only ``u - A y`` enters, so the verdict does not depend on the slack.
    """
    Ky = prob.apply_K(sol.y)
    Kv = prob.apply_K(v)
    I, A = sets.inactive, sets.active
    normals = Ky[I] / np.linalg.norm(Ky[I], axis=1, keepdims=True)
    lhs = float((prob.u - prob.A @ sol.y) @ v)
    rhs = float(np.sum(normals * Kv[I]) + np.linalg.norm(Kv[A], axis=1).sum())
    return lhs >= rhs - tol


def separable_problem(a, k_rows, u):
    """One state variable and ``k_rows`` scalar gradient cells ``K = (1, ..., 1)^T``."""
    A = sp.csc_matrix(np.array([[float(a)]]))
    K = (sp.csr_matrix(np.ones((int(k_rows), 1))),)
    return VIProblem(A, K, np.array([float(u)]))
