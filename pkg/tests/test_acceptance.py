"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line in ``REPORT``; the lines are printed
as they happen and again in the terminal summary (see ``conftest.py``).
The Bingham criteria share one sweep over the five reference weights on the
N = 60 grid and take several minutes.
"""

import time

import clarabel
import numpy as np
import pytest
import scipy.sparse as sp

from tvvi import (
    BiactivePartition,
    BinghamConfig,
    GridSpec,
    SSNConfig,
    TRConfig,
    VIProblem,
    b_stationarity_residual,
    bingham_cost,
    bingham_problem,
    bouligand_element_apply,
    classify_sets,
    difference_quotient,
    directional_derivative,
    frechet_check,
    frechet_derivative,
    linear_representative,
    make_solution,
    psi_measure,
    separable_problem,
    solve_vi_oracle_separable,
    solve_vi_pdhg,
    solve_vi_ssn,
    strong_stationarity_check,
    sweep_table1,
    tr_optimize,
    tracking_cost,
)
from tvvi.bingham import TABLE1_ALPHAS, TABLE1_ITERATIONS
from tvvi.sensitivity import solution_map
from tvvi.stationarity import default_directions
from tvvi.trust_region import ReducedProblem, _radius_update

from conftest import scalar_fixture, small_bingham

REPORT = []


def verdict(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT.append(line)
    print(line)
    assert ok, line


# --- 1 ---------------------------------------------------------------------


def test_01_solver_oracle_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    err_pdhg = err_ssn = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 4))
        a = rng.uniform(0.5, 4.0)
        u = rng.uniform(-6.0, 6.0)
        prob = separable_problem(a, k, u)
        y = solve_vi_oracle_separable(a, k, u)
        err_pdhg = max(err_pdhg, abs(solve_vi_pdhg(prob).y[0] - y))
        err_ssn = max(err_ssn, abs(solve_vi_ssn(prob, SSNConfig(gamma=1000.0)).y[0] - y))
    secs = time.perf_counter() - t0
    ok = err_pdhg <= 1e-6 and err_ssn <= 5e-3 and secs < 10.0
    verdict(1, ok, f"max error pdhg {err_pdhg:.2e} (<= 1e-6), ssn {err_ssn:.2e} (<= 5e-3), {secs:.1f} s (< 10 s)")


# --- 2 ---------------------------------------------------------------------


def _random_instances(rng, count):
    """Scalar-family instances (some exactly at the kink) and N = 8 grids."""
    out = []
    for i in range(count):
        if i % 2 == 0:
            k = int(rng.integers(1, 4))
            a = rng.uniform(0.5, 4.0)
            u = float(k) * rng.choice([-1.0, 1.0]) if i % 4 == 0 else rng.uniform(-6.0, 6.0)
            out.append((separable_problem(a, k, u), rng.standard_normal(1)))
        else:
            prob = small_bingham(8, u0=rng.uniform(5.0, 40.0))
            u = prob.u + rng.standard_normal(prob.n)
            out.append((prob.with_control(u), rng.standard_normal(prob.n)))
    return out


def test_02_directional_derivative_limit():
    rng = np.random.default_rng(2)
    steps = (1e-2, 1e-3, 1e-4, 1e-5)
    worst = 0.0
    monotone = True
    for prob, h in _random_instances(rng, 50):
        sol = solution_map(prob, prob.u)
        sets = classify_sets(prob, sol)
        eta = directional_derivative(prob, sol, sets, h).eta
        errs = [np.linalg.norm(difference_quotient(prob, prob.u, h, t, base=sol) - eta) / np.linalg.norm(h)
                for t in steps]
        monotone &= all(e1 <= e0 + 1e-9 for e0, e1 in zip(errs, errs[1:]))
        worst = max(worst, errs[-1])
    verdict(2, monotone and worst <= 1e-3,
            f"errors nonincreasing in t: {monotone}; worst relative error at t=1e-5 {worst:.2e} (<= 1e-3)")


# --- 3 ---------------------------------------------------------------------


def test_03_frechet_consistency():
    rng = np.random.default_rng(3)
    worst = 0.0
    all_diff = True
    for _ in range(50):
        prob = small_bingham(8, u0=rng.uniform(5.0, 40.0))
        prob = prob.with_control(prob.u + rng.standard_normal(prob.n))
        sol = solution_map(prob, prob.u)
        sets = classify_sets(prob, sol)
        verdict_ = frechet_check(prob, sol, sets)
        all_diff &= bool(verdict_)
        if verdict_.slack is not None:
            sol = make_solution(prob, sol.y, verdict_.slack)
        h = rng.standard_normal(prob.n)
        eta = frechet_derivative(prob, sol, sets, h).eta
        t = 1e-6
        fd = (solution_map(prob, prob.u + t * h).y - solution_map(prob, prob.u - t * h).y) / (2 * t)
        worst = max(worst, np.linalg.norm(fd - eta) / np.linalg.norm(eta))
    verdict(3, all_diff and worst <= 1e-4,
            f"all points differentiable: {all_diff}; worst relative mismatch {worst:.2e} (<= 1e-4)")


# --- 4 ---------------------------------------------------------------------


def test_04_min_linf_slack_detection():
    prob, sol, sets = scalar_fixture(1.0, 2, q=[[1.0], [0.0]])
    two_row = frechet_check(prob, sol, sets)
    prob, sol, sets = scalar_fixture(1.0)
    scalar = frechet_check(prob, sol, sets)
    ok = (bool(two_row) and abs(two_row.r_bar - 0.25) <= 1e-6
          and not scalar and abs(scalar.r_bar - 1.0) <= 1e-6)
    verdict(4, ok, f"two-row: differentiable={bool(two_row)} r_bar={two_row.r_bar:.7f}; "
                   f"scalar: differentiable={bool(scalar)} r_bar={scalar.r_bar:.7f}")


# --- 5 ---------------------------------------------------------------------


def test_05_partition_realizability():
    prob, sol, sets = scalar_fixture(1.0)
    eps = 1e-5
    worst = 0.0
    resid = 0.0
    for partition, side in ((BiactivePartition([], [0]), 1.0), (BiactivePartition([0], []), -1.0)):
        for h in (1.0, -1.0, 0.7):
            elem = bouligand_element_apply(prob, sol, sets, partition, [h])
            resid = max(resid, elem.residual)
            # Jacobian at the differentiable point 1 + side*eps by a symmetric quotient
            u = np.array([1.0 + side * eps])
            t = 0.1 * eps
            dq = (solution_map(prob, u + t * h).y - solution_map(prob, u - t * h).y) / (2 * t)
            worst = max(worst, abs(dq[0] - elem.eta[0]))
    verdict(5, worst <= 1e-6 and resid <= 1e-10,
            f"quotient vs element {worst:.2e} (<= 1e-6); system residual {resid:.2e} (<= 1e-10)")


# --- 6 ---------------------------------------------------------------------


def _biactive_instance(rng):
    """Zero state on a 4x4-interior grid with a chosen slack: cells with
    ``|q_j| = 1`` are biactive, the rest strongly active."""
    base = small_bingham(5)
    q = rng.standard_normal((base.m, base.d))
    q *= rng.uniform(0.1, 0.9, base.m)[:, None] / np.linalg.norm(q, axis=1, keepdims=True)
    b = rng.choice(base.m, size=int(rng.integers(1, 7)), replace=False)
    q[b] /= np.linalg.norm(q[b], axis=1, keepdims=True)
    prob = base.with_control(base.apply_KT(q))
    sol = make_solution(prob, np.zeros(prob.n), q)
    return prob, sol, classify_sets(prob, sol)


def test_06_linear_representative():
    rng = np.random.default_rng(6)
    worst = 0.0
    sizes = []
    for i in range(50):
        if i % 5 == 0:
            k = int(rng.integers(1, 4))
            prob, sol, sets = scalar_fixture(float(k), k, a=rng.uniform(0.5, 4.0), q=np.ones((k, 1)))
        else:
            prob, sol, sets = _biactive_instance(rng)
        sizes.append(len(sets.biactive))
        h = rng.standard_normal(prob.n)
        eta = directional_derivative(prob, sol, sets, h).eta
        rep, _ = linear_representative(prob, sol, sets, h)
        worst = max(worst, np.linalg.norm(rep.eta - eta) / max(1.0, np.linalg.norm(eta)))
    ok = min(sizes) >= 1 and worst <= 1e-9
    verdict(6, ok, f"biactive sizes {min(sizes)}..{max(sizes)}; worst mismatch {worst:.2e} (<= 1e-9)")


# --- 7 ---------------------------------------------------------------------


def _minmax_socp(G):
    """``-min_{|d| <= 1} max_j <g_j, d>`` from a conic solve of the epigraph form."""
    k, n = G.shape
    # variables (d, xi): minimize xi s.t. G d - xi <= 0 and |d| <= 1
    P = sp.csc_matrix((n + 1, n + 1))
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_lin = sp.hstack([sp.csc_matrix(G), -sp.csc_matrix(np.ones((k, 1)))])
    A_soc = sp.vstack([sp.csc_matrix((1, n + 1)), sp.hstack([-sp.identity(n), sp.csc_matrix((n, 1))])])
    A = sp.vstack([A_lin, A_soc], format="csc")
    b = np.concatenate([np.zeros(k), [1.0], np.zeros(n)])
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = 1e-12
    cones = [clarabel.NonnegativeConeT(k), clarabel.SecondOrderConeT(n + 1)]
    res = clarabel.DefaultSolver(P, c, A, b, cones, settings).solve()
    return -res.x[-1]


def test_07_psi_duality():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        k, n = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        G = rng.standard_normal((k, n)) + (rng.standard_normal(n) if i % 2 else 0.0)
        psi, _ = psi_measure(G)
        worst = max(worst, abs(psi - _minmax_socp(G)))
    verdict(7, worst <= 1e-6, f"worst |psi - independent min-max value| {worst:.2e} (<= 1e-6)")


# --- 8 ---------------------------------------------------------------------


def test_08_tr_scalar_control():
    alpha = 0.01
    prob = separable_problem(1.0, 1, 0.0)
    cost = tracking_cost(np.array([1.0]), alpha)
    grid = np.linspace(-5.0, 10.0, 1500001)
    fgrid = 0.5 * (np.maximum(grid - 1.0, 0.0) - 1.0) ** 2 + 0.5 * alpha * grid**2
    u_oracle = grid[np.argmin(fgrid)]
    cfg = TRConfig()
    u, trace = tr_optimize(prob, cost, cfg, np.array([10.0]))
    recs = trace.records
    descent = all(b.f <= a.f for a, b in zip(recs, recs[1:]) if a.step == "successful")
    table = all(b.delta == _radius_update(cfg, a.delta, a.rho) for a, b in zip(recs, recs[1:]))
    f_star = cost.eval(solution_map(prob, u).y, u)
    ok = abs(f_star - fgrid.min()) <= 1e-4 and abs(u[0] - u_oracle) <= 1e-4 and len(recs) <= 50
    verdict(8, ok and descent and table,
            f"u={u[0]:.6f} oracle {u_oracle:.6f}, |f - f_oracle|={abs(f_star - fgrid.min()):.1e}, "
            f"{len(recs)} iterations, descent {descent}, radius table {table}")


# --- 9-11: the Bingham sweep ------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    results = sweep_table1(TABLE1_ALPHAS, BinghamConfig(grid=GridSpec(60)))
    return results, time.perf_counter() - t0


@pytest.mark.slow
def test_09_table1_sweep(sweep):
    results, secs = sweep
    counts = [r.summary["iterations"] for r in results]
    stops = [r.summary["stop_reason"] for r in results]
    monotone = all(b >= a for a, b in zip(counts, counts[1:]))
    band = all(p / 2 <= c <= 2 * p for c, p in zip(counts, TABLE1_ITERATIONS))
    ok = monotone and band and all(s == "step" for s in stops) and secs < 600
    verdict(9, ok, f"iterations {counts} vs reference {list(TABLE1_ITERATIONS)}; nondecreasing {monotone}; "
                   f"within factor 2 {band}; stop reasons {sorted(set(stops))}; {secs:.0f} s (< 600 s)")


@pytest.mark.slow
def test_10_cost_trace_anchor(sweep):
    res = dict(zip(TABLE1_ALPHAS, sweep[0]))[5e-4]
    f0, f_end = res.summary["f_initial"], res.summary["f_final"]
    g = res.trace.column("grad_norm")[-6:]
    tail = bool(np.all(np.diff(g) < 0))
    rel = abs(f0 - 1277.104634583353) / 1277.104634583353
    verdict(10, rel <= 0.05 and f_end < 840 and tail,
            f"f(u0)={f0:.3f} ({100 * rel:.1f}% from 1277.105, <= 5%); final f={f_end:.3f} (< 840); "
            f"last six gradient norms strictly decreasing {tail}")


@pytest.mark.slow
def test_11_stationarity_cross_check(sweep):
    res = dict(zip(TABLE1_ALPHAS, sweep[0]))[5e-3]
    grid = GridSpec(60)
    prob = bingham_problem(grid)
    cost = bingham_cost(grid, 5e-3)
    _, sol, _ = ReducedProblem(prob, cost).solve(res.u)
    bound = 1e-4 * np.linalg.norm(cost.grad_u(None, prob.u))
    dirs = default_directions(prob.n, n_random=128, seed=11)[2 * prob.n:]
    b_res = b_stationarity_residual(prob, cost, res.u, dirs, sol=sol)
    cert = strong_stationarity_check(prob, cost, res.u, sol=sol)
    g_res = cert.residuals["gradient_equation"]
    verdict(11, b_res <= bound and g_res <= 1e-4,
            f"B-stationarity residual {b_res:.2e} (<= {bound:.2e}); gradient-equation residual {g_res:.2e} (<= 1e-4)")
