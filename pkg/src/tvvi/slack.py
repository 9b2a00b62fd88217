"""Selection of slack (dual) variables for a given VI state.

On inactive cells the slack is forced to ``(Ky)_j / |(Ky)_j|``. On active
cells any ``q_j`` with ``|q_j| <= 1`` and ``K^T q = u - A y`` is admissible, so
the slack is a point of the intersection of an affine set with a product of
balls. Two selections are offered: minimum Euclidean norm (Dykstra's
projection of the origin) and minimum sup-norm on the active cells
(bisection over the ball radius with alternating-projection feasibility
tests).

When the affine set only touches some of the balls, which happens on
biactive cells, Dykstra's method converges sublinearly. The minimum-norm
point is then computed as a second-order cone program with an
interior-point solver instead.
"""

from dataclasses import dataclass

import clarabel
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import Infeasible, SingularSystem
from .linalg import SaddleSolver, block_rows


@dataclass(frozen=True, eq=False)
class SlackSelection:
    q: np.ndarray
    r_bar: float = None
    criterion: str = "min_euclidean"


def forced_slack(prob, y, inactive):
    """Slack with the unit normals on ``inactive`` and zeros elsewhere."""
    Ky = prob.apply_K(y)
    q = np.zeros((prob.m, prob.d))
    g = Ky[inactive]
    q[inactive] = g / np.linalg.norm(g, axis=1, keepdims=True)
    return q


class SlackAffineSet:
    """``{x in R^{|A| x d} : sum_{j in A} K_j^T x_j = r}`` with its projector.

    The forced slack ``(Ky)_j / |(Ky)_j|`` on inactive cells with small
    gradients amplifies rounding errors in ``y``, so ``r`` is replaced by its
    least-squares projection onto the range of the system. The discarded
    part, relative to ``|r|``, is kept in ``inconsistency``; values above
    ``consistency_tol`` mean ``y`` is not a solution and raise
    :class:`Infeasible`.
    """

    def __init__(self, prob, y, active, q_fixed, consistency_tol=1e-4):
        self.active = np.asarray(active, dtype=int)
        self.shape = (len(self.active), prob.d)
        r = prob.u - prob.A @ y - prob.apply_KT(q_fixed)
        C = block_rows(prob.m, prob.d, self.active) @ prob.K_stacked
        k = C.shape[0]
        self.matrix = sp.csr_matrix(C.T)
        self.r = self._consistent_part(r)
        self.inconsistency = float(np.linalg.norm(r - self.r) / max(1.0, np.linalg.norm(r)))
        if self.inconsistency > consistency_tol:
            raise Infeasible(f"no slack reproduces u - A y (relative mismatch {self.inconsistency:.3e})")
        self._solver = SaddleSolver(sp.identity(k, format="csc"), sp.csr_matrix(C.T))

    def _consistent_part(self, r):
        M = self.matrix
        touched = np.flatnonzero(np.diff(M.indptr))
        out = np.zeros_like(r)
        if len(touched) and M.shape[1]:
            block = M[touched].toarray()
            x = sla.lstsq(block, r[touched], cond=1e-12)[0]
            out[touched] = block @ x
        return out

    def project(self, z):
        try:
            x, _ = self._solver.solve(np.asarray(z, dtype=float).reshape(-1), self.r)
        except SingularSystem as exc:
            raise Infeasible(f"no slack reproduces u - A y: {exc}") from exc
        return x.reshape(self.shape)


def project_balls(x, radius=1.0):
    nrm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(1.0, nrm / radius) if radius > 0 else np.zeros_like(x)


def dykstra_min_norm(aff, radius=1.0, tol=1e-10, max_iter=20000):
    """Point of ``aff`` intersected with the ball product closest to the origin."""
    z = np.zeros(aff.shape)
    x = aff.project(z)
    if np.linalg.norm(x, axis=1).max(initial=0.0) <= radius + tol:
        return x
    p = np.zeros(aff.shape)
    r = np.zeros(aff.shape)
    b = z
    for _ in range(max_iter):
        x = aff.project(b + p)
        p = b + p - x
        b_new = project_balls(x + r, radius)
        r = x + r - b_new
        gap = np.linalg.norm(x - b_new)
        change = np.linalg.norm(b_new - b)
        b = b_new
        if gap <= tol and change <= tol:
            break
    else:
        if gap > 1e-7:
            raise Infeasible(f"Dykstra iteration stalled with gap {gap:.3e}")
    # x is affine-feasible; clip the remaining ball excess of order tol
    return x


def socp_min_norm(aff, radius=1.0, tol=1e-12):
    """Same point as :func:`dykstra_min_norm`, by an interior-point method.

    The cone program is ``min |x|^2/2`` subject to the affine equations and
    ``(radius, x_j)`` in a second-order cone for every cell. The result is
    projected back onto the affine set so that the equations hold to
    factorization accuracy.
    """
    k, d = aff.shape
    nvar = k * d
    C = aff.matrix
    keep = np.flatnonzero(np.diff(C.indptr))
    C = C[keep]
    rows = C.shape[0]
    # each cone s_j = (radius, x_j) = b - G x with G = [0; -I]
    cone_rows = np.arange(k * (d + 1)).reshape(k, d + 1)[:, 1:].reshape(-1)
    G = sp.csr_matrix((-np.ones(nvar), (cone_rows, np.arange(nvar))), shape=(k * (d + 1), nvar))
    b_cone = np.zeros(k * (d + 1))
    b_cone[:: d + 1] = radius
    Amat = sp.vstack([C, G], format="csc")
    b = np.concatenate([aff.r[keep], b_cone])
    cones = [clarabel.ZeroConeT(rows)] + [clarabel.SecondOrderConeT(d + 1)] * k
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = tol
    settings.tol_feas = tol
    solver = clarabel.DefaultSolver(sp.identity(nvar, format="csc"), np.zeros(nvar), Amat, b, cones, settings)
    res = solver.solve()
    status = str(res.status)
    if "Solved" not in status:
        raise Infeasible(f"cone program for the slack ended with status {status}")
    x = aff.project(np.asarray(res.x).reshape(aff.shape))
    return _clip_sphere_cells(aff, x, radius)


def _clip_sphere_cells(aff, x, radius, band=1e-7):
    """Remove the ball excess left by the interior-point tolerance.

    Cells within ``band`` of the sphere are clipped onto it and held fixed;
    the others absorb the change through a least-change affine projection.
    """
    nrm = np.linalg.norm(x, axis=1)
    if nrm.max(initial=0.0) <= radius:
        return x
    k, d = aff.shape
    on = nrm >= radius * (1.0 - band)
    fixed = x.copy()
    fixed[on] *= (radius / nrm[on])[:, None]
    free_cols = np.flatnonzero(np.repeat(~on, d))
    on_cols = np.flatnonzero(np.repeat(on, d))
    C = aff.matrix.tocsc()
    rhs = aff.r - C[:, on_cols] @ fixed.reshape(-1)[on_cols]
    Cf = C[:, free_cols].tocsr()
    try:
        solver = SaddleSolver(sp.identity(len(free_cols), format="csc"), Cf)
        xf, _ = solver.solve(x.reshape(-1)[free_cols], rhs)
    except SingularSystem:
        return x
    out = fixed.reshape(-1).copy()
    out[free_cols] = xf
    out = out.reshape(k, d)
    if np.linalg.norm(out[~on], axis=1).max(initial=0.0) > radius:
        return x
    return out


def min_norm_slack_point(aff, radius=1.0, tol=1e-10, max_iter=500):
    """Dykstra's method with the cone-program fallback when it stalls."""
    try:
        return _clip_sphere_cells(aff, dykstra_min_norm(aff, radius, tol=tol, max_iter=max_iter), radius)
    except Infeasible:
        return socp_min_norm(aff, radius)


def alternating_feasible(aff, radius, x0, gap_tol=1e-9, max_iter=5000):
    """Alternating projections between ``aff`` and the balls of ``radius``.

    Returns ``(feasible, point)``; ``point`` is affine-feasible.
    """
    b = project_balls(x0, radius)
    prev = np.inf
    x = aff.project(b)
    for _ in range(max_iter):
        b = project_balls(x, radius)
        gap = np.linalg.norm(x - b)
        if gap < gap_tol:
            return True, x
        if gap > prev * (1.0 - 1e-7):
            return False, x
        prev = gap
        x = aff.project(b)
    return False, x


def min_euclidean_slack(prob, sol, sets, tol=1e-10):
    """Slack of smallest Euclidean norm compatible with ``sol.y``.

    The inactive cells take the exact unit normals. On cells just above the
    activity threshold those normals amplify rounding in ``y``; when that
    makes the active-cell equations inconsistent, the solver's own slack on
    the inactive cells is used instead, and as a last resort ``sol.q``.
    """
    if not len(sets.active):
        return SlackSelection(forced_slack(prob, sol.y, sets.inactive), None, "min_euclidean")
    q_solver = np.zeros_like(sol.q)
    q_solver[sets.inactive] = sol.q[sets.inactive]
    for q in (forced_slack(prob, sol.y, sets.inactive), q_solver):
        try:
            aff = SlackAffineSet(prob, sol.y, sets.active, q)
            q[sets.active] = min_norm_slack_point(aff, 1.0, tol=tol, max_iter=2000)
            return SlackSelection(q, None, "min_euclidean")
        except Infeasible:
            continue
    return SlackSelection(np.array(sol.q, dtype=float), None, "solver")


def min_linf_slack(prob, sol, sets, r_tol=1e-6, gap_tol=1e-9):
    """Slack minimizing ``max_{j active} |q_j|^2``; returns it with that value."""
    q = forced_slack(prob, sol.y, sets.inactive)
    A = sets.active
    if not len(A):
        return SlackSelection(q, 0.0, "min_linf")
    aff = SlackAffineSet(prob, sol.y, A, q)
    x0 = aff.project(np.zeros(aff.shape))
    best = x0
    hi = float(np.max(np.sum(x0**2, axis=1)))
    if hi > 1.0:
        ok, x = alternating_feasible(aff, 1.0, sol.q[A], gap_tol)
        if not ok:
            raise Infeasible("no slack with |q_j| <= 1 on the active cells")
        best, hi = x, float(np.max(np.sum(x**2, axis=1)))
    lo = 0.0
    while hi - lo > r_tol:
        mid = 0.5 * (lo + hi)
        ok, x = alternating_feasible(aff, np.sqrt(mid), best, gap_tol)
        if ok:
            hi, best = mid, x
        else:
            lo = mid
    q[A] = best
    r_bar = min(1.0, max(hi, float(np.max(np.sum(best**2, axis=1)))))
    return SlackSelection(q, r_bar, "min_linf")
