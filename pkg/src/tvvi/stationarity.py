"""First-order stationarity diagnostics for ``min_u f(u) = J(S(u), u)``.

``b_stationarity_residual`` samples directions and measures how far the
directional derivative of the reduced cost dips below zero.
``strong_stationarity_check`` builds the multiplier pair ``(p, mu)`` and
tests the cone and polar-cone conditions through a finite generator
description of the cone of admissible directions.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import ConeSpec, classify_sets, cone_membership
from .errors import RayRepresentativeInfeasible, SingularSystem
from .linalg import SaddleSolver, block_rows
from .sensitivity import DirectionalDerivative, DerivativeSystem, solution_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostFunction:
    """Objective ``J(y, u)`` with its partial gradients."""

    eval: callable
    grad_y: callable
    grad_u: callable

    def check_gradients(self, n, n_probes=3, step=1e-6, rtol=1e-5, seed=0):
        """Compare both gradients with central differences at random points."""
        rng = np.random.default_rng(seed)
        for _ in range(n_probes):
            y, u = rng.standard_normal(n), rng.standard_normal(n)
            for grad, which in ((self.grad_y, 0), (self.grad_u, 1)):
                g = grad(y, u)
                v = rng.standard_normal(n)
                args_p = [y, u]
                args_m = [y, u]
                args_p[which] = args_p[which] + step * v
                args_m[which] = args_m[which] - step * v
                fd = (self.eval(*args_p) - self.eval(*args_m)) / (2 * step)
                if abs(fd - g @ v) > rtol * max(1.0, abs(fd)):
                    return False
        return True


def tracking_cost(target, alpha):
    """``J(y, u) = 1/2 |y - target|^2 + alpha/2 |u|^2``."""
    target = np.asarray(target, dtype=float)

    def ev(y, u):
        return 0.5 * float(np.sum((y - target) ** 2)) + 0.5 * alpha * float(u @ u)

    return CostFunction(ev, lambda y, u: y - target, lambda y, u: alpha * np.asarray(u))


def zero_cost(n):
    z = np.zeros(n)
    return CostFunction(lambda y, u: 0.0, lambda y, u: z.copy(), lambda y, u: z.copy())


@dataclass(frozen=True, eq=False)
class StrongStationarityCertificate:
    """Multipliers with one residual per condition.

    ``residuals`` has keys ``adjoint_equation``, ``p_in_cone``,
    ``mu_lineality``, ``mu_rays`` and ``gradient_equation``.
    """

    p: np.ndarray
    mu: np.ndarray
    residuals: dict
    tol: float
    skipped_rays: list = field(default_factory=list)

    @property
    def holds(self):
        return max(self.residuals.values()) <= self.tol


def default_directions(n, n_random=64, seed=0):
    """Plus/minus coordinate directions followed by random unit vectors."""
    rng = np.random.default_rng(seed)
    eye = np.eye(n)
    rand = rng.standard_normal((n_random, n))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return list(eye) + list(-eye) + list(rand)


def b_stationarity_residual(prob, cost, u, directions=None, sol=None, seed=0):
    """``max(0, -min_h f'(u; h))`` over unit-normalized sample directions."""
    u = np.asarray(u, dtype=float)
    if directions is None:
        directions = default_directions(prob.n, seed=seed)
    directions = list(directions)
    if not directions:
        raise ValueError("at least one direction is required")
    sol = solution_map(prob, u) if sol is None else sol
    sets = classify_sets(prob.with_control(u), sol)
    gy = cost.grad_y(sol.y, u)
    gu = cost.grad_u(sol.y, u)
    dd = DirectionalDerivative(prob.with_control(u), sol, sets)
    worst = np.inf
    for h in directions:
        h = np.asarray(h, dtype=float)
        nh = np.linalg.norm(h)
        if nh == 0.0:
            continue
        h = h / nh
        slope = gy @ dd(h).eta + gu @ h
        worst = min(worst, slope)
    return float(max(0.0, -worst))


def _least_norm(C, target):
    """Least-norm ``v`` with ``C v = target``; raises SingularSystem if none."""
    n = C.shape[1]
    solver = SaddleSolver(sp.identity(n, format="csc"), C)
    v, _ = solver.solve(np.zeros(n), target)
    return v


def strong_stationarity_check(prob, cost, u, tol=1e-6, sol=None):
    """Assemble ``(p, mu)`` and test the strong-stationarity system.

    ``p = -grad_u J`` and ``mu = grad_y J - L p`` so the adjoint equation holds
    by construction. The remaining tests are ``p`` in the cone, ``mu``
    annihilating the lineality space, ``<mu, v_j> >= 0`` on least-norm ray
    representatives, and the reduced-gradient equation ``p_hat + grad_u J = 0``
    with ``p_hat`` the cone-constrained adjoint, which is the quantity that is
    not automatic in this construction.
    """
    u = np.asarray(u, dtype=float)
    prob = prob.with_control(u)
    sol = solution_map(prob, u) if sol is None else sol
    sets = classify_sets(prob, sol)
    gy = cost.grad_y(sol.y, u)
    gu = cost.grad_u(sol.y, u)
    p = -np.asarray(gu, dtype=float)
    system = DerivativeSystem(prob, sol, sets, [], [])
    mu = gy - system.L @ p
    scale = max(1.0, np.linalg.norm(gy), np.linalg.norm(gu))

    res = {}
    res["adjoint_equation"] = float(np.linalg.norm(system.L @ p - (gy - mu)))
    _, report = cone_membership(ConeSpec.cone(sol, sets), prob, p, tol=0.0)
    res["p_in_cone"] = max(report.values(), default=0.0)

    m, d = prob.m, prob.d
    blocks = np.union1d(sets.strongly_active, sets.biactive).astype(int)
    Kst = prob.K_stacked
    skipped = []
    if len(blocks):
        C = (block_rows(m, d, blocks) @ Kst).tocsr()
        proj = SaddleSolver(sp.identity(prob.n, format="csc"), C)
        mu_null, _ = proj.solve(mu)
        res["mu_lineality"] = float(np.linalg.norm(mu_null))
        ray_viol = 0.0
        pos = {int(j): i for i, j in enumerate(blocks)}
        for j in sets.biactive:
            target = np.zeros((len(blocks), d))
            qj = sol.q[j]
            target[pos[int(j)]] = qj / np.linalg.norm(qj)
            try:
                v = _least_norm(C, target.reshape(-1))
            except SingularSystem:
                exc = RayRepresentativeInfeasible(int(j))
                log.warning("%s; ray skipped", exc)
                skipped.append(int(j))
                continue
            ray_viol = max(ray_viol, -float(mu @ v) / max(1.0, np.linalg.norm(v)))
        res["mu_rays"] = max(0.0, ray_viol)
    else:
        # the cone is the whole space, so mu must vanish
        res["mu_lineality"] = float(np.linalg.norm(mu))
        res["mu_rays"] = 0.0

    p_hat = DirectionalDerivative(prob, sol, sets)(gy).eta
    res["gradient_equation"] = float(np.linalg.norm(p_hat + gu))
    log.debug("strong stationarity residuals %s (scale %.3g)", res, scale)
    return StrongStationarityCertificate(p, mu, res, tol, skipped)
