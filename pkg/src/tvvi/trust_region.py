"""Two-phase nonsmooth trust-region method for ``min_u f(u) = J(S(u), u)``.

Phase ``STANDARD`` (radius above ``delta_min``) takes dogleg steps on the
quadratic model built from one generalized gradient. Phase ``MODIFIED``
(radius at or below ``delta_min``) gathers generalized gradients for every
subset of the possibly-biactive cells and takes a generalized Cauchy step
on the max-type model; its stationarity measure ``psi`` is the distance
from the origin to the convex hull of those gradients.
"""

import enum
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .core import classify_sets, make_solution
from .errors import DegeneratePsiZero, PartitionCapExceeded, TVVIError
from .linalg import inverse_norm_spd, sym_norm
from .sensitivity import BiactivePartition, DerivativeSystem, adjoint_solve
from .slack import min_euclidean_slack
from .solvers import IPMConfig, solve_vi_ipm

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    STANDARD = "standard"
    MODIFIED = "modified"


@dataclass(frozen=True)
class TRConfig:
    delta0: float = 10.0
    delta_min: float = 1e-6
    eta1: float = 0.25
    eta2: float = 0.75
    beta1: float = 0.5
    beta2: float = 1.3
    mu: float = 1.0
    dogleg_beta: float = 1.0
    dogleg_delta: float = 0.8
    stop_tol: float = 1e-4
    max_iter: int = 200
    lipschitz_Ly: float = None
    partition_cap_phase2: int = 12
    grad_tol: float = 1e-12
    psi_tol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.eta1 < self.eta2 < 1:
            raise ValueError("need 0 < eta1 < eta2 < 1")
        if not 0 < self.beta1 < 1 < self.beta2:
            raise ValueError("need 0 < beta1 < 1 < beta2")
        if not 0 < self.mu <= 1:
            raise ValueError("need 0 < mu <= 1")
        if not self.delta0 > self.delta_min > 0:
            raise ValueError("need delta0 > delta_min > 0")


@dataclass
class TRState:
    u_k: np.ndarray
    y_k: np.ndarray
    g_k: np.ndarray
    H_k: np.ndarray
    delta_k: float
    rho_k: float = None
    phase: Phase = Phase.STANDARD
    zeta_k: float = None


@dataclass(frozen=True)
class TRRecord:
    k: int
    f: float
    grad_norm: float
    delta: float
    rho: float
    phase: Phase
    step: str
    psi: float = float("nan")
    step_norm: float = 0.0


@dataclass
class TRTrace:
    records: list = field(default_factory=list)
    stop_reason: str = ""

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def iterations(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def rows(self):
        """Rows for CSV output: iter, f, grad_norm, delta, rho, phase, step, psi."""
        for r in self.records:
            yield (r.k, r.f, r.grad_norm, r.delta, r.rho, r.phase.value, r.step, r.psi)


# --- model steps -----------------------------------------------------------


def _pred(g, H, s):
    return -(g @ s + 0.5 * s @ (H @ s))


def dogleg_step(g, H, delta, beta=1.0, frac=0.8, H_inv=None):
    """Cauchy step, replaced by the Newton step when it is short enough and
    achieves a fraction ``frac`` of the Cauchy decrease.

    Returns ``(s, kind)`` with ``kind`` in ``{"newton", "cauchy"}``.
    """
    g = np.asarray(g, dtype=float)
    gn = np.linalg.norm(g)
    if gn == 0.0:
        raise ValueError("dogleg step needs a nonzero gradient")
    curv = g @ (H @ g)
    t = delta / gn if curv <= 0 else min(gn**2 / curv, delta / gn)
    s_c = -t * g
    try:
        s_n = -(H_inv @ g) if H_inv is not None else -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return s_c, "cauchy"
    if not np.all(np.isfinite(s_n)):
        return s_c, "cauchy"
    if np.linalg.norm(s_n) <= beta * delta and _pred(g, H, s_n) >= frac * _pred(g, H, s_c):
        return s_n, "newton"
    return s_c, "cauchy"


def bfgs_update(H, s, z, H_inv=None):
    """BFGS update of ``H`` (and optionally its inverse) with step ``s`` and
    gradient change ``z``; skipped when ``<s, z> <= 1e-12 |s| |z|``."""
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    sz = s @ z
    if sz <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(z) or sz <= 0.0:
        return (H, H_inv) if H_inv is not None else H
    Hs = H @ s
    H_new = H - np.outer(Hs, Hs) / (s @ Hs) + np.outer(z, z) / sz
    H_new = 0.5 * (H_new + H_new.T)
    if H_inv is None:
        return H_new
    # inverse update: (I - r s z^T) Hi (I - r z s^T) + r s s^T, r = 1/<s,z>
    r = 1.0 / sz
    Hz = H_inv @ z
    Hi_new = (
        H_inv
        - r * (np.outer(s, Hz) + np.outer(Hz, s))
        + (r * r * (z @ Hz) + r) * np.outer(s, s)
    )
    return H_new, 0.5 * (Hi_new + Hi_new.T)


def psi_measure(gradients):
    """Distance from the origin to ``conv(gradients)`` and the closest point.

    The min-norm point is found through the least-distance formulation
    ``min |x| s.t. <g_j, x> >= 1``, solved as a nonnegative least-squares
    problem. An empty solution set of that problem means the origin lies in
    the hull.
    """
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    if G.size == 0:
        raise ValueError("psi_measure needs at least one gradient")
    k, n = G.shape
    scale = np.abs(G).max()
    if scale == 0.0:
        return 0.0, np.zeros(n)
    Gs = G / scale
    E = np.vstack([Gs.T, np.ones((1, k))])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    lam, _ = nnls(E, f, maxiter=50 * (n + k))
    r = E @ lam - f
    if abs(r[-1]) <= 1e-14:
        return 0.0, np.zeros(n)
    # the convex weights are lam / sum(lam); recompute the point from them
    weights = lam / lam.sum()
    w = scale * (weights @ Gs)
    w = _refine_min_norm(G, w)
    return float(np.linalg.norm(w)), w


def _refine_min_norm(G, w, iters=50):
    """Frank-Wolfe steps toward the vertex most opposed to ``w``; removes
    rounding left by the quadratic-programming solve."""
    for _ in range(iters):
        j = int(np.argmin(G @ w))
        gap = w @ w - G[j] @ w
        if gap <= 1e-15 * max(1.0, w @ w):
            break
        dvec = G[j] - w
        dd = dvec @ dvec
        if dd == 0.0:
            break
        t = min(1.0, max(0.0, -(w @ dvec) / dd))
        w = w + t * dvec
    return w


def modified_subproblem(gradients, H, delta, mu=1.0, psi=None, w_hat=None, H_norm=None):
    """Generalized Cauchy step for the max-type model.

    Returns ``(d, zeta)`` with ``d = -t delta w_hat/|w_hat|``,
    ``t = min(1, psi / (delta ||H||))`` and ``zeta = max_j <g_j, d>``.
    """
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    if psi is None or w_hat is None:
        psi, w_hat = psi_measure(G)
    if psi <= 0.0:
        raise DegeneratePsiZero("origin lies in the convex hull of the gradients")
    Hn = sym_norm(H) if H_norm is None else H_norm
    t = 1.0 if Hn == 0.0 else min(1.0, psi / (delta * Hn))
    d = -t * delta * w_hat / np.linalg.norm(w_hat)
    zeta = float(np.max(G @ d))
    return d, zeta


def modified_decrease_holds(d, zeta, H, delta, psi, mu, H_norm, rtol=1e-10):
    lhs = -zeta - 0.5 * d @ (H @ d)
    rhs = 0.5 * mu * psi * (delta if H_norm == 0.0 else min(delta, psi / H_norm))
    return lhs >= rhs * (1.0 - rtol)


# --- reduced problem plumbing ----------------------------------------------


class ReducedProblem:
    """``u -> f(u)`` with cached exact lower-level solutions.

    ``lower`` maps ``(prob_at_u, warm_y)`` to a :class:`VISolution`.
    """

    def __init__(self, prob, cost, lower=None):
        self.prob = prob
        self.cost = cost
        self.lower = lower or default_lower_solver
        self._last_y = None

    def solve(self, u):
        pu = self.prob.with_control(u)
        sol = self.lower(pu, self._last_y)
        self._last_y = np.array(sol.y)
        # the reduced gradient is built from the min-norm slack
        sets = classify_sets(pu, sol)
        if len(sets.active):
            q = min_euclidean_slack(pu, sol, sets).q
            sol = make_solution(pu, sol.y, q, sol.iterations, sol.solver)
            sets = classify_sets(pu, sol)
        return pu, sol, sets

    def value(self, u, sol):
        return float(self.cost.eval(sol.y, u))


def default_lower_solver(prob, warm_y=None):
    """Interior-point solve with guarded snapping of degenerate cells;
    ``warm_y`` is unused."""
    return solve_vi_ipm(prob, IPMConfig(snap=True))


def generalized_gradient(prob, cost, u, sol=None, sets=None, partition=None):
    """``g = p + grad_u J`` with ``p`` the generalized adjoint.

    The default partition puts every biactive cell into ``b0``.
    """
    u = np.asarray(u, dtype=float)
    if sol is None:
        pu, sol, sets = ReducedProblem(prob, cost).solve(u)
    else:
        pu = prob.with_control(u)
        sets = classify_sets(pu, sol) if sets is None else sets
    partition = BiactivePartition.all_zero(sets) if partition is None else partition
    adj = adjoint_solve(pu, sol, sets, partition, cost.grad_y(sol.y, u))
    return adj.p + cost.grad_u(sol.y, u)


def identify_possible_biactive(prob, sol, delta, L_y):
    """Cells that may turn biactive within the radius, and clearly strong ones.

    Returns ``(P, A_v)`` with
    ``P = {i : |(Ky)_i| <= L_y delta and |q_i| >= 1 - L_y delta}`` and
    ``A_v = {i : |q_i| < 1 - L_y delta}``.
    """
    r = L_y * delta
    gnorm = np.linalg.norm(prob.apply_K(sol.y), axis=1)
    qnorm = np.linalg.norm(sol.q, axis=1)
    P = np.flatnonzero((gnorm <= r) & (qnorm >= 1.0 - r))
    A_v = np.flatnonzero(qnorm < 1.0 - r)
    return P, A_v


def subset_gradients(prob, cost, u, sol, sets, P):
    """One generalized gradient per subset of ``P``.

    Cells of the subset are pinned to zero; biactive cells outside it keep
    their line constraint.
    """
    gy = cost.grad_y(sol.y, u)
    gu = cost.grad_u(sol.y, u)
    B = np.asarray(sets.biactive, dtype=int)
    grads = []
    for r in range(len(P) + 1):
        for subset in itertools.combinations(P, r):
            sub = np.asarray(subset, dtype=int)
            zero = np.union1d(sets.strongly_active, sub)
            line = np.setdiff1d(B, sub)
            p = DerivativeSystem(prob, sol, sets, zero, line).solve(gy)[0]
            grads.append(p + gu)
    return np.array(grads)


# --- main loop -------------------------------------------------------------


def _radius_update(cfg, delta, rho):
    if rho <= cfg.eta1:
        return cfg.beta1 * delta
    if rho <= cfg.eta2:
        return max(cfg.delta_min, delta)
    return max(cfg.delta_min, cfg.beta2 * delta)


def tr_optimize(prob, cost, cfg=TRConfig(), u0=None, lower=None, callback=None):
    """Run the two-phase trust-region method.

    Returns ``(u_star, trace)``. ``trace.stop_reason`` is one of
    ``"step"`` (relative successful step below ``stop_tol``), ``"gradient"``,
    ``"psi"`` or ``"max_iter"``.
    """
    red = ReducedProblem(prob, cost, lower)
    u = np.array(prob.u if u0 is None else u0, dtype=float)
    u0_norm = max(np.linalg.norm(u), 1e-300)
    L_y = cfg.lipschitz_Ly if cfg.lipschitz_Ly is not None else inverse_norm_spd(prob.A)
    n = prob.n
    H = np.eye(n)
    H_inv = np.eye(n)
    delta = cfg.delta0
    trace = TRTrace()

    def record(rec):
        trace.append(rec)
        if callback is not None:
            callback(rec)

    pu, sol, sets = red.solve(u)
    f = red.value(u, sol)
    g = generalized_gradient(prob, cost, u, sol, sets)
    for k in range(cfg.max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.grad_tol:
            record(TRRecord(k, f, gnorm, delta, float("nan"), Phase.STANDARD, "stop"))
            trace.stop_reason = "gradient"
            return u, trace
        psi = float("nan")
        if delta > cfg.delta_min:
            phase = Phase.STANDARD
            d, _ = dogleg_step(g, H, delta, cfg.dogleg_beta, cfg.dogleg_delta, H_inv)
            pred = _pred(g, H, d)
        else:
            phase = Phase.MODIFIED
            P, _ = identify_possible_biactive(pu, sol, delta, L_y)
            if len(P) > cfg.partition_cap_phase2:
                raise PartitionCapExceeded(len(P), cfg.partition_cap_phase2, iteration=k)
            grads = subset_gradients(pu, cost, u, sol, sets, P)
            psi, w_hat = psi_measure(grads)
            if psi <= cfg.psi_tol:
                record(TRRecord(k, f, gnorm, delta, float("nan"), phase, "stop", psi))
                trace.stop_reason = "psi"
                return u, trace
            H_norm = sym_norm(H)
            d, zeta = modified_subproblem(grads, H, delta, cfg.mu, psi, w_hat, H_norm)
            if not modified_decrease_holds(d, zeta, H, delta, psi, cfg.mu, H_norm):
                raise TVVIError(f"modified Cauchy decrease violated at iteration {k}")
            pred = -(zeta + 0.5 * d @ (H @ d))
        u_trial = u + d
        pu_t, sol_t, sets_t = red.solve(u_trial)
        f_trial = red.value(u_trial, sol_t)
        ared = f - f_trial
        if abs(pred) < 1e-14:
            rho = 0.0
        elif phase is Phase.MODIFIED and not psi > gnorm * delta:
            rho = 0.0
        else:
            rho = ared / pred
        step_norm = float(np.linalg.norm(d))
        successful = rho > cfg.eta1
        log.info("iter %3d f=%.10g |g|=%.3e delta=%.3e rho=%.3f %s %s",
                 k, f, gnorm, delta, rho, phase.value, "ok" if successful else "null")
        record(TRRecord(k, f, gnorm, delta, float(rho), phase,
                        "successful" if successful else "null", psi, step_norm))
        delta_new = _radius_update(cfg, delta, rho)
        if successful:
            g_new = generalized_gradient(prob, cost, u_trial, sol_t, sets_t)
            H, H_inv = bfgs_update(H, d, g_new - g, H_inv)
            u, pu, sol, sets, f, g = u_trial, pu_t, sol_t, sets_t, f_trial, g_new
            if step_norm / u0_norm < cfg.stop_tol:
                trace.stop_reason = "step"
                delta = delta_new
                return u, trace
        delta = delta_new
    trace.stop_reason = "max_iter"
    return u, trace


__all__ = [
    "Phase",
    "ReducedProblem",
    "TRConfig",
    "TRRecord",
    "TRState",
    "TRTrace",
    "bfgs_update",
    "default_lower_solver",
    "dogleg_step",
    "generalized_gradient",
    "identify_possible_biactive",
    "modified_subproblem",
    "psi_measure",
    "subset_gradients",
    "tr_optimize",
]
