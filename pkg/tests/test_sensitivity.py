import numpy as np
import pytest

from tvvi import (
    BiactivePartition,
    ConeSpec,
    DerivativeKind,
    PartitionCapExceeded,
    adjoint_solve,
    bouligand_element_apply,
    classify_sets,
    clarke_element_apply,
    cone_membership,
    difference_quotient,
    directional_derivative,
    frechet_check,
    frechet_derivative,
    linear_representative,
    make_solution,
    min_euclidean_slack,
    min_linf_slack,
    separable_problem,
)
from tvvi.sensitivity import DerivativeSystem, solution_map

from conftest import scalar_fixture, small_bingham


def part(b0=(), b1=()):
    return BiactivePartition(list(b0), list(b1))


# --- slack selection --------------------------------------------------------


@pytest.mark.parametrize(
    "u, k_rows, q0, expected",
    [(1.0, 1, None, [1.0]), (1.0, 2, [[1.0], [0.0]], [0.5, 0.5]), (2.0, 1, None, [1.0])],
)
def test_min_euclidean_slack(u, k_rows, q0, expected):
    prob, sol, sets = scalar_fixture(u, k_rows, q=q0)
    sel = min_euclidean_slack(prob, sol, sets)
    np.testing.assert_allclose(sel.q.ravel(), expected, atol=1e-9)


@pytest.mark.parametrize(
    "u, k_rows, q0, r_bar", [(1.0, 2, [[1.0], [0.0]], 0.25), (1.0, 1, None, 1.0), (0.5, 1, None, 0.25)]
)
def test_min_linf_slack(u, k_rows, q0, r_bar):
    prob, sol, sets = scalar_fixture(u, k_rows, q=q0)
    sel = min_linf_slack(prob, sol, sets)
    np.testing.assert_allclose(sel.r_bar, r_bar, atol=1e-6)
    assert make_solution(prob, sol.y, sel.q).residuals.max() <= 1e-8


def test_min_euclidean_slack_on_grid():
    prob = small_bingham(8, u0=30.0)
    sol = solution_map(prob, prob.u)
    sets = classify_sets(prob, sol)
    q = min_euclidean_slack(prob, sol, sets).q
    assert make_solution(prob, sol.y, q).residuals.max() <= 1e-8
    assert np.sum(q[sets.active] ** 2) <= np.sum(sol.q[sets.active] ** 2) + 1e-10


# --- Frechet ----------------------------------------------------------------


def test_frechet_check_examples():
    prob, sol, sets = scalar_fixture(1.0, 2, q=[[1.0], [0.0]])
    verdict = frechet_check(prob, sol, sets)
    assert verdict and verdict.r_bar == pytest.approx(0.25, abs=1e-6)
    prob, sol, sets = scalar_fixture(1.0)
    verdict = frechet_check(prob, sol, sets)
    assert not verdict and verdict.r_bar == pytest.approx(1.0, abs=1e-6)
    assert frechet_check(*scalar_fixture(2.0))


@pytest.mark.parametrize("u, h, eta", [(2.0, 1.0, 1.0), (0.5, 1.0, 0.0), (2.0, 0.0, 0.0)])
def test_frechet_derivative_examples(u, h, eta):
    prob, sol, sets = scalar_fixture(u)
    res = frechet_derivative(prob, sol, sets, [h])
    assert res.kind is DerivativeKind.FRECHET
    np.testing.assert_allclose(res.eta, [eta], atol=1e-14)


# --- directional derivative and subdifferential elements -------------------


@pytest.mark.parametrize("u, h, eta", [(1.0, 1.0, 1.0), (1.0, -1.0, 0.0), (0.5, 1.0, 0.0), (0.5, -3.0, 0.0)])
def test_directional_derivative_scalar(u, h, eta):
    prob, sol, sets = scalar_fixture(u)
    res = directional_derivative(prob, sol, sets, [h])
    np.testing.assert_allclose(res.eta, [eta], atol=1e-14)
    assert cone_membership(ConeSpec.cone(sol, sets), prob, res.eta)[0]


@pytest.mark.parametrize(
    "partition, h, eta", [(part(b0=[0]), 1.0, 0.0), (part(b0=[0]), -1.0, 0.0), (part(b1=[0]), -1.0, -1.0)]
)
def test_bouligand_element_scalar(partition, h, eta):
    prob, sol, sets = scalar_fixture(1.0)
    res = bouligand_element_apply(prob, sol, sets, partition, [h])
    np.testing.assert_allclose(res.eta, [eta], atol=1e-14)
    assert res.kind is DerivativeKind.BOULIGAND_ELEMENT


def test_bouligand_element_rejects_bad_partition():
    prob, sol, sets = scalar_fixture(1.0)
    with pytest.raises(ValueError):
        bouligand_element_apply(prob, sol, sets, part(), [1.0])
    with pytest.raises(ValueError):
        BiactivePartition([0], [0])


def test_bouligand_equals_frechet_without_biactive(rng):
    prob = small_bingham(8, u0=30.0)
    sol = solution_map(prob, prob.u)
    sets = classify_sets(prob, sol)
    assert len(sets.biactive) == 0
    h = rng.standard_normal(prob.n)
    a = bouligand_element_apply(prob, sol, sets, part(), h).eta
    b = frechet_derivative(prob, sol, sets, h).eta
    np.testing.assert_allclose(a, b, atol=1e-12 * np.linalg.norm(b))


@pytest.mark.parametrize("u, h, eta", [(1.0, 1.0, 1.0), (0.5, 1.0, 0.0), (1.0, 0.0, 0.0)])
def test_clarke_element_scalar(u, h, eta):
    prob, sol, sets = scalar_fixture(u)
    res = clarke_element_apply(prob, sol, sets, [h])
    np.testing.assert_allclose(res.eta, [eta], atol=1e-14)


@pytest.mark.parametrize("u, h, eta, b0, b1", [(1.0, 1.0, 1.0, [], [0]), (1.0, -1.0, 0.0, [0], []), (2.0, 5.0, 5.0, [], [])])
def test_linear_representative_scalar(u, h, eta, b0, b1):
    prob, sol, sets = scalar_fixture(u)
    res, partition = linear_representative(prob, sol, sets, [h])
    np.testing.assert_allclose(res.eta, [eta], atol=1e-14)
    np.testing.assert_array_equal(partition.b0, b0)
    np.testing.assert_array_equal(partition.b1, b1)


@pytest.mark.parametrize("u, rhs, p", [(2.0, 0.0, 0.0), (3.0, 1.0, 1.0), (0.5, 1.0, 0.0), (0.5, -4.0, 0.0)])
def test_adjoint_scalar(u, rhs, p):
    prob, sol, sets = scalar_fixture(u)
    adj = adjoint_solve(prob, sol, sets, BiactivePartition.all_zero(sets), [rhs])
    np.testing.assert_allclose(adj.p, [p], atol=1e-14)
    np.testing.assert_allclose(adj.lam[sets.inactive], 0.0, atol=1e-14)


def test_partition_cap():
    # every cell of the two-row family is biactive when both slacks have norm one
    prob = separable_problem(1.0, 3, 3.0)
    sol = make_solution(prob, [0.0], [[1.0], [1.0], [1.0]])
    sets = classify_sets(prob, sol)
    assert len(sets.biactive) == 3
    with pytest.raises(PartitionCapExceeded):
        directional_derivative(prob, sol, sets, [1.0], partition_cap=2)


@pytest.mark.parametrize("u, h, t, expected", [(2.0, 1.0, 1e-6, 1.0), (1.0, -1.0, 1e-6, 0.0), (2.0, 0.0, 1e-3, 0.0)])
def test_difference_quotient_scalar(u, h, t, expected):
    prob = separable_problem(1.0, 1, u)
    dq = difference_quotient(prob, [u], [h], t)
    np.testing.assert_allclose(dq, [expected], atol=1e-6)


def test_difference_quotient_needs_positive_step():
    prob = separable_problem(1.0, 1, 2.0)
    with pytest.raises(ValueError):
        difference_quotient(prob, [2.0], [1.0], 0.0)


# --- properties on a grid -------------------------------------------------


@pytest.fixture(scope="module")
def grid_point():
    prob = small_bingham(8, u0=30.0)
    sol = solution_map(prob, prob.u)
    return prob, sol, classify_sets(prob, sol)


def test_positive_homogeneity(grid_point, rng):
    prob, sol, sets = grid_point
    h = rng.standard_normal(prob.n)
    base = directional_derivative(prob, sol, sets, h).eta
    for a in (0.1, 3.0, 17.0):
        np.testing.assert_allclose(
            directional_derivative(prob, sol, sets, a * h).eta, a * base, atol=1e-10 * a * np.linalg.norm(base)
        )


def test_bouligand_element_is_linear(grid_point, rng):
    prob, sol, sets = grid_point
    h1, h2 = rng.standard_normal((2, prob.n))
    p = BiactivePartition.all_zero(sets)
    e = lambda h: bouligand_element_apply(prob, sol, sets, p, h).eta
    np.testing.assert_allclose(e(h1 + 2.5 * h2), e(h1) + 2.5 * e(h2), atol=1e-10 * np.linalg.norm(e(h1)))


def test_difference_quotients_converge(grid_point, rng):
    prob, sol, sets = grid_point
    h = rng.standard_normal(prob.n)
    eta = directional_derivative(prob, sol, sets, h).eta
    errs = [np.linalg.norm(difference_quotient(prob, prob.u, h, t, base=sol) - eta) for t in (1e-2, 1e-3, 1e-4)]
    for t, e in zip((1e-2, 1e-3, 1e-4), errs):
        assert e <= 50.0 * t * np.linalg.norm(h)


def test_bouligand_element_meets_subspace(rng):
    # two-row family at the kink with slack (1, 0): cell 0 is biactive
    prob, sol, sets = scalar_fixture(1.0, 2, q=[[1.0], [0.0]])
    np.testing.assert_array_equal(sets.biactive, [0])
    for b0, b1 in ([[0], []], [[], [0]]):
        res = bouligand_element_apply(prob, sol, sets, part(b0, b1), [rng.standard_normal()])
        spec = ConeSpec.subspace(sol, sets, b0, b1)
        assert cone_membership(spec, prob, res.eta, mode="line")[0]


def test_directional_derivative_solves_cone_qp(rng):
    # brute force over all partitions: the derivative minimizes the QP over the cone
    prob, sol, sets = scalar_fixture(1.0)
    for h in rng.standard_normal(20):
        eta = directional_derivative(prob, sol, sets, [h]).eta[0]
        grid = np.linspace(0.0, 10.0, 100001)
        np.testing.assert_allclose(eta, grid[np.argmin(0.5 * grid**2 - h * grid)], atol=1e-4)


def test_derivative_system_residual(grid_point, rng):
    prob, sol, sets = grid_point
    system = DerivativeSystem(prob, sol, sets, sets.active, [])
    eta, theta, _, resid = system.solve(rng.standard_normal(prob.n))
    assert resid <= 1e-10
    np.testing.assert_allclose(prob.apply_K(eta)[sets.active], 0.0, atol=1e-10)
