"""Lower-level solvers for the TV variational inequality.

``solve_vi_ssn``
    Semismooth Newton on the Huber-regularized optimality system
    ``A y + K^T H_gamma(K y) = u`` with ``H_gamma(w)_j = gamma w_j / max(1, gamma |w_j|)``.
``solve_vi_pdhg``
    Primal-dual first-order iteration on the unregularized saddle problem.
``solve_vi_ipm``
    Interior-point solution of the equivalent second-order cone program.
``polish_solution``
    Turns an approximate solution into an exact one by fixing the active set,
    running a constrained Newton method on the inactive cells and recovering
    the slack on the active cells. Every solver can hand its output to it.
"""

import logging
from dataclasses import dataclass

import clarabel
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import make_solution
from .errors import Infeasible, NoConvergence, SingularSystem, StepSizeInvalid
from .linalg import SaddleSolver, block_rows, power_norm, solve_spd, stacked_block_diag
from .slack import SlackAffineSet, forced_slack, min_norm_slack_point

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SSNConfig:
    gamma: float = 1000.0
    max_iter: int = 200
    tol_newton: float = 1e-10
    damping: float = 0.5
    polish: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.tol_newton > 0:
            raise ValueError("tol_newton must be positive")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")


@dataclass(frozen=True)
class PDHGConfig:
    tau: float = None
    sigma: float = None
    max_iter: int = 50000
    tol: float = 1e-10
    polish: bool = True
    polish_every: int = 25


def solve_vi_oracle_separable(a, k_rows, u):
    """Exact minimizer of ``a/2 y^2 - u y + k_rows |y|``."""
    return float(np.sign(u) * max(abs(u) - k_rows, 0.0) / a)


# --- Huber-regularized semismooth Newton -----------------------------------


def _huber(W, gamma):
    nrm = np.linalg.norm(W, axis=1)
    big = gamma * nrm > 1.0
    val = np.where(big, nrm - 0.5 / gamma, 0.5 * gamma * nrm**2)
    scale = gamma / np.maximum(1.0, gamma * nrm)
    return val.sum(), W * scale[:, None], nrm, big


def _huber_hessian_blocks(W, nrm, big, gamma):
    m, d = W.shape
    eye = np.eye(d)
    blocks = np.broadcast_to(gamma * eye, (m, d, d)).copy()
    if big.any():
        n = W[big] / nrm[big, None]
        blocks[big] = (eye[None] - n[:, :, None] * n[:, None, :]) / nrm[big, None, None]
    return blocks


def _grad_norm(prob, y, gamma):
    HW = _huber(prob.apply_K(y), gamma)[1]
    return np.linalg.norm(prob.A @ y + prob.apply_KT(HW) - prob.u)


def solve_vi_ssn(prob, cfg=SSNConfig(), y0=None):
    """Semismooth Newton with Armijo backtracking on the Huber energy.

    The returned slack is ``H_gamma(K y)`` with the unit normals written on
    cells where ``K y`` does not vanish; with ``cfg.polish`` the result is
    refined to an exact solution of the unregularized problem.
    """
    gamma = cfg.gamma
    Kst = prob.K_stacked
    y = np.zeros(prob.n) if y0 is None else np.array(y0, dtype=float)
    scale = max(1.0, np.linalg.norm(prob.u))

    def merit(z):
        hv = _huber(prob.apply_K(z), gamma)[0]
        return 0.5 * z @ (prob.A @ z) - prob.u @ z + hv

    res = np.inf
    for it in range(cfg.max_iter + 1):
        W = prob.apply_K(y)
        hval, HW, nrm, big = _huber(W, gamma)
        grad = prob.A @ y + Kst.T @ HW.T.reshape(-1) - prob.u
        res = np.linalg.norm(grad)
        if res <= cfg.tol_newton * scale:
            break
        if it == cfg.max_iter:
            raise NoConvergence(it, res)
        D = stacked_block_diag(_huber_hessian_blocks(W, nrm, big, gamma))
        M = (prob.A + Kst.T @ D @ Kst).tocsc()
        dy = solve_spd(M, -grad)
        e0 = 0.5 * y @ (prob.A @ y) - prob.u @ y + hval
        slope = grad @ dy
        # near convergence energy changes drown in rounding; then accept full
        # steps that reduce the residual instead
        floor = 1e-13 * max(1.0, abs(e0))
        t = 1.0
        if -slope > floor:
            while merit(y + t * dy) > e0 + 1e-4 * t * slope and t > 1e-12:
                t *= cfg.damping
        else:
            while _grad_norm(prob, y + t * dy, gamma) >= res and t > 1e-6:
                t *= cfg.damping
        y = y + t * dy
    W = prob.apply_K(y)
    q = _huber(W, gamma)[1]
    q /= np.maximum(1.0, np.linalg.norm(q, axis=1))[:, None]
    nrm = np.linalg.norm(W, axis=1)
    big = gamma * nrm > 1.0
    q[big] = W[big] / nrm[big, None]
    if cfg.polish:
        y, active = sharpen_active_guess(prob, y, gamma)
        return polish_solution(prob, y, active, iterations=it, solver="ssn")
    return make_solution(prob, y, q, iterations=it, solver="ssn")


def sharpen_active_guess(prob, y, gamma, gamma_max=1e5, factor=10.0):
    """Raise the Huber parameter from ``gamma`` to ``gamma_max`` with warm starts.

    Returns the last state and the cells with ``gamma |(K y)_j| <= 1``. The
    regularization bias shrinks like ``1/gamma``, which separates cells that
    are genuinely zero from small but nonzero gradients.
    """
    g = gamma
    while g < gamma_max:
        g_next = min(gamma_max, g * factor)
        try:
            # only the sign pattern matters here, so a loose tolerance suffices
            y = solve_vi_ssn(prob, SSNConfig(gamma=g_next, max_iter=100, tol_newton=1e-8), y0=y).y
        except NoConvergence:
            break
        g = g_next
    active = g * np.linalg.norm(prob.apply_K(y), axis=1) <= 1.0
    return y, active


# --- primal-dual first-order method ----------------------------------------


def _step_sizes(prob, cfg):
    Kst = prob.K_stacked
    knorm = power_norm(lambda v: Kst @ v, lambda w: Kst.T @ w, prob.n)
    tau, sigma = cfg.tau, cfg.sigma
    if tau is None and sigma is None:
        tau = sigma = 0.99 / knorm
    elif tau is None:
        tau = 0.99 / (sigma * knorm**2)
    elif sigma is None:
        sigma = 0.99 / (tau * knorm**2)
    if not (tau > 0 and sigma > 0 and tau * sigma * knorm**2 < 1.0):
        raise StepSizeInvalid(f"tau*sigma*||K||^2 = {tau * sigma * knorm**2:.4g} must be < 1")
    return tau, sigma


def solve_vi_pdhg(prob, cfg=PDHGConfig(), warm=None):
    """Primal-dual iteration with extrapolation parameter 1.

    ``y+ = (A + I/tau)^{-1}(u + y/tau - K^T q)`` followed by
    ``q+ = P(q + sigma K (2 y+ - y))`` with ``P`` the projection onto the
    product of unit balls.
    """
    tau, sigma = _step_sizes(prob, cfg)
    lu = spla.splu((prob.A + sp.identity(prob.n) / tau).tocsc())
    if warm is None:
        y, q = np.zeros(prob.n), np.zeros((prob.m, prob.d))
    else:
        y, q = np.array(warm.y, dtype=float), np.array(warm.q, dtype=float)
    scale = max(1.0, np.linalg.norm(prob.u))
    res = np.inf
    for k in range(1, cfg.max_iter + 1):
        y_new = lu.solve(prob.u + y / tau - prob.apply_KT(q))
        z = q + sigma * prob.apply_K(2.0 * y_new - y)
        q_new = z / np.maximum(1.0, np.linalg.norm(z, axis=1))[:, None]
        res = np.linalg.norm(y_new - y) / tau + np.linalg.norm(q_new - q) / sigma
        y, q = y_new, q_new
        converged = res <= cfg.tol * scale
        if cfg.polish and (converged or k % cfg.polish_every == 0):
            guess = np.linalg.norm(z, axis=1) <= 1.0
            try:
                sol = polish_solution(prob, y, guess, iterations=k, solver="pdhg")
            except (NoConvergence, Infeasible, SingularSystem):
                sol = None
            if sol is not None and _accept(sol, scale, cfg.tol):
                return sol
        if converged:
            sol = make_solution(prob, y, q, iterations=k, solver="pdhg")
            if _accept(sol, scale, max(cfg.tol, 1e-8)):
                return sol
    raise NoConvergence(cfg.max_iter, res)


def _accept(sol, scale, tol):
    r = sol.residuals
    return r.state_eq <= tol * scale and r.comp <= tol * scale and r.feas <= tol


# --- interior-point method -------------------------------------------------


@dataclass(frozen=True)
class IPMConfig:
    """Interior-point settings.

    ``polish`` hands the small-gradient cells to :func:`polish_solution` and
    fails if that fails. ``snap`` is the guarded variant: a few polishing
    rounds on cells with ``|(K y)_j| <= snap_rtol * max(1, max_i |(K y)_i|)``,
    kept only when they succeed without worsening the residuals.
    """

    tol: float = 1e-12
    max_iter: int = 200
    polish: bool = False
    active_rtol: float = 1e-7
    snap: bool = False
    snap_rtol: float = 1e-5
    snap_rounds: int = 3


def solve_vi_ipm(prob, cfg=IPMConfig()):
    """Interior-point solution of the cone program
    ``min 1/2 y^T A y - u^T y + sum_j t_j`` s.t. ``|(K y)_j| <= t_j``.

    At the default tolerance the returned pair already satisfies the
    complementarity system to about ``1e-11``, with ``|(K y)_j|`` of that
    order on active cells and many orders larger elsewhere. With
    ``cfg.polish`` the cells below ``cfg.active_rtol`` times the largest
    gradient are handed to :func:`polish_solution` as the active-set guess.
    """
    n, m, d = prob.n, prob.m, prob.d
    P = sp.block_diag([prob.A, sp.csc_matrix((m, m))], format="csc")
    c = np.concatenate([-prob.u, np.ones(m)])
    # cone j occupies rows j*(d+1) .. j*(d+1)+d holding (t_j, (K y)_j)
    blocks = [sp.hstack([sp.csr_matrix((m, n)), -sp.identity(m)])]
    blocks += [sp.hstack([-Ki, sp.csr_matrix((m, m))]) for Ki in prob.K]
    G = sp.vstack(blocks, format="csr")
    order = np.arange(m * (d + 1)).reshape(d + 1, m).T.reshape(-1)
    G = G[order].tocsc()
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = cfg.max_iter
    settings.tol_gap_abs = settings.tol_gap_rel = cfg.tol
    settings.tol_feas = cfg.tol
    cones = [clarabel.SecondOrderConeT(d + 1)] * m
    res = clarabel.DefaultSolver(P, c, G, np.zeros(m * (d + 1)), cones, settings).solve()
    status = str(res.status)
    if "Solved" not in status:
        raise NoConvergence(res.iterations, np.nan, f"interior-point method ended with status {status}")
    y = np.asarray(res.x[:n])
    z = np.asarray(res.z).reshape(m, d + 1)
    q = -z[:, 1:]
    q /= np.maximum(1.0, np.linalg.norm(q, axis=1))[:, None]
    raw = make_solution(prob, y, q, iterations=res.iterations, solver="ipm")
    g = np.linalg.norm(prob.apply_K(y), axis=1)
    if cfg.polish:
        active = g <= cfg.active_rtol * max(g.max(initial=0.0), 1e-300)
        return polish_solution(prob, y, active, iterations=res.iterations, solver="ipm")
    if cfg.snap:
        # at a degenerate kink both |(K y)_j| and 1 - |q_j| only reach about
        # sqrt(tol), which is enough to misclassify the cell
        active = g <= cfg.snap_rtol * max(1.0, g.max(initial=0.0))
        if active.any():
            try:
                snapped = polish_solution(
                    prob, y, active, max_rounds=cfg.snap_rounds, iterations=res.iterations, solver="ipm"
                )
            except (NoConvergence, Infeasible, SingularSystem):
                return raw
            floor = 1e-12 * max(1.0, np.linalg.norm(prob.u))
            if snapped.residuals.max() <= max(raw.residuals.max(), floor):
                return snapped
    return raw


# --- exact refinement ------------------------------------------------------


def _constrained_newton(prob, y_start, active, tol, max_iter=60):
    """Minimize the energy with ``(K y)_j = 0`` on ``active``; smooth elsewhere.

    Returns ``(y, nu, collapsed)`` where ``nu`` are the constraint multipliers
    (shape ``(|active|, d)``) and ``collapsed`` flags inactive cells whose
    gradient is driven to zero.
    """
    m, d = prob.m, prob.d
    Kst = prob.K_stacked
    act = np.flatnonzero(active)
    ina = np.flatnonzero(~active)
    C = block_rows(m, d, act) @ Kst if len(act) else None
    if C is not None:
        proj = SaddleSolver(sp.identity(prob.n, format="csc"), C)
        y, _ = proj.solve(y_start)
    else:
        y = np.array(y_start, dtype=float)
    scale = max(1.0, np.linalg.norm(prob.u))
    no_collapse = np.zeros(m, dtype=bool)

    def parts(z):
        Kz = prob.apply_K(z)
        g = np.linalg.norm(Kz[ina], axis=1)
        return Kz, g

    Ky, g = parts(y)
    gref = max(g.max(initial=0.0), 1e-300)
    prev_step = np.inf
    for it in range(max_iter):
        tiny = g <= 1e-8 * gref
        if tiny.any():
            collapsed = no_collapse.copy()
            collapsed[ina[tiny]] = True
            return y, None, collapsed
        normals = np.zeros((m, d))
        normals[ina] = Ky[ina] / g[:, None]
        grad = prob.A @ y - prob.u + prob.apply_KT(normals)
        blocks = np.zeros((m, d, d))
        nI = normals[ina]
        blocks[ina] = (np.eye(d)[None] - nI[:, :, None] * nI[:, None, :]) / g[:, None, None]
        H = prob.A + Kst.T @ stacked_block_diag(blocks) @ Kst
        dy, nu = SaddleSolver(H, C).solve(-grad)
        kkt = np.linalg.norm(grad + (C.T @ nu if C is not None else 0.0))
        step = np.linalg.norm(dy)
        ynorm = max(1.0, np.linalg.norm(y))
        # with curvature ~1/|K y_j| on nearly flat cells the residual bottoms
        # out at rounding level; a step that stops shrinking signals that
        stalled = step <= 1e-8 * ynorm and step >= 0.5 * prev_step
        prev_step = step
        if kkt <= tol * scale or step <= 1e-15 * ynorm or stalled:
            # the last Newton correction is nearly free and removes the
            # remaining residual when the model is exact (e.g. d = 1)
            if step and np.all(parts(y + dy)[1] >= 0.5 * g):
                y = y + dy
            nu = nu.reshape(len(act), d) if len(act) else np.zeros((0, d))
            return y, nu, no_collapse

        def e_ina(z):
            Kz, gz = parts(z)
            return 0.5 * z @ (prob.A @ z) - prob.u @ z + gz.sum()

        e0 = e_ina(y)
        slope = grad @ dy
        t = 1.0
        # keep inactive cells from jumping onto the kink in a single step;
        # genuine collapse still shows up as a geometric decrease
        while t > 1e-14 and np.any(parts(y + t * dy)[1] < 0.01 * g):
            t *= 0.5
        while e_ina(y + t * dy) > e0 + 1e-4 * t * slope and t > 1e-14:
            t *= 0.5
        y = y + t * dy
        Ky, g = parts(y)
    if not len(ina) or g.min() > 1e-4 * gref:
        raise NoConvergence(max_iter, np.nan, "constrained Newton did not converge")
    collapsed = no_collapse.copy()
    collapsed[ina[np.argmin(g)]] = True
    return y, None, collapsed


def polish_solution(prob, y0, active_guess, tol=1e-11, max_rounds=60, iterations=0, solver=""):
    """Exact solution from an approximate state and an active-set guess.

    ``active_guess`` is a boolean mask over the cells or a list of cell
    indices. The active set is corrected until the constrained Newton limit admits a
    slack with ``|q_j| <= 1`` on every active cell. Cells that collapse are
    added and locked; when no admissible slack exists the unlocked active
    cell with the largest gradient in ``y0`` is released, since active-cell
    multipliers are not unique and carry no reliable ranking.
    """
    guess = np.asarray(active_guess)
    if guess.dtype == bool:
        if guess.shape != (prob.m,):
            raise ValueError(f"active mask has shape {guess.shape}, expected {(prob.m,)}")
        active = guess.copy()
    else:
        active = np.zeros(prob.m, dtype=bool)
        active[guess.astype(int)] = True
    locked = np.zeros_like(active)
    y_start = np.array(y0, dtype=float)
    priority = np.linalg.norm(prob.apply_K(y_start), axis=1)
    for _ in range(max_rounds):
        y, nu, collapsed = _constrained_newton(prob, y_start, active, tol)
        if collapsed.any():
            active |= collapsed
            locked |= collapsed
            continue
        inactive = np.flatnonzero(~active)
        act = np.flatnonzero(active)
        q = forced_slack(prob, y, inactive)
        if not len(act):
            return make_solution(prob, y, q, iterations, solver)
        q[act] = nu
        if np.linalg.norm(nu, axis=1).max() <= 1.0 + 1e-10:
            return make_solution(prob, y, q, iterations, solver)
        try:
            aff = SlackAffineSet(prob, y, act, forced_slack(prob, y, inactive))
            q[act] = min_norm_slack_point(aff, 1.0)
            if np.linalg.norm(q[act], axis=1).max() <= 1.0 + 1e-9:
                return make_solution(prob, y, q, iterations, solver)
        except Infeasible:
            pass
        free = act[~locked[act]]
        if not len(free):
            break
        active[free[np.argmax(priority[free])]] = False
        y_start = y
    raise NoConvergence(max_rounds, np.nan, "active-set polishing did not settle")
