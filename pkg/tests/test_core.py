import numpy as np
import pytest
import scipy.sparse as sp

from tvvi import (
    ConeSpec,
    DimensionError,
    VIProblem,
    classify_sets,
    cone_membership,
    energy,
    residuals,
    separable_problem,
    solve_vi_ipm,
)
from tvvi.core import cone_membership_dual

from conftest import scalar_fixture, small_bingham


@pytest.mark.parametrize(
    "k_rows, u, y, expected",
    [(1, 2.0, 1.0, -0.5), (1, 0.0, 0.0, 0.0), (2, 1.0, 0.5, 0.625)],
)
def test_energy_examples(k_rows, u, y, expected):
    prob = separable_problem(1.0, k_rows, u)
    np.testing.assert_allclose(energy(prob, [y]), expected, atol=1e-15)


def test_energy_rejects_wrong_dimension():
    with pytest.raises(DimensionError):
        energy(separable_problem(1.0, 1, 1.0), [1.0, 2.0])


def test_problem_validates_shapes():
    with pytest.raises(DimensionError):
        VIProblem(sp.identity(2), (sp.identity(3),), np.zeros(2))
    with pytest.raises(DimensionError):
        VIProblem(sp.identity(2), (sp.identity(2),), np.zeros(3))


def test_problem_is_immutable():
    prob = separable_problem(1.0, 1, 2.0)
    with pytest.raises(ValueError):
        prob.u[0] = 3.0


def test_residual_examples():
    prob = separable_problem(1.0, 1, 2.0)
    r = residuals(prob, [1.0], [[1.0]])
    assert (r.state_eq, r.comp, r.feas) == (0.0, 0.0, 0.0)
    r = residuals(prob, [0.0], [[0.0]])
    np.testing.assert_allclose([r.state_eq, r.comp, r.feas], [2.0, 0.0, 0.0])
    r = residuals(separable_problem(1.0, 1, 1.0), [0.0], [[1.5]])
    np.testing.assert_allclose(r.feas, 0.5)


@pytest.mark.parametrize(
    "u, inactive, strong, biactive",
    [(2.0, [0], [], []), (0.5, [], [0], []), (1.0, [], [], [0])],
)
def test_classify_scalar(u, inactive, strong, biactive):
    _, _, sets = scalar_fixture(u)
    np.testing.assert_array_equal(sets.inactive, inactive)
    np.testing.assert_array_equal(sets.strongly_active, strong)
    np.testing.assert_array_equal(sets.biactive, biactive)
    assert sets.m == 1


def test_classify_partitions_cells():
    prob = small_bingham(8, u0=30.0)
    sol = solve_vi_ipm(prob)
    sets = classify_sets(prob, sol)
    allc = np.sort(np.concatenate([sets.inactive, sets.active]))
    np.testing.assert_array_equal(allc, np.arange(prob.m))
    np.testing.assert_array_equal(
        np.sort(np.concatenate([sets.strongly_active, sets.biactive])), sets.active
    )
    gn = np.linalg.norm(prob.apply_K(sol.y), axis=1)
    assert np.all(gn[sets.inactive] > sets.eps_active)
    assert np.all(gn[sets.active] <= sets.eps_active)


def test_cone_membership_examples():
    prob, sol, sets = scalar_fixture(1.0)
    spec = ConeSpec.cone(sol, sets)
    assert cone_membership(spec, prob, [2.0])[0]
    inside, report = cone_membership(spec, prob, [-2.0])
    assert not inside and report[0] == pytest.approx(4.0)
    assert cone_membership(spec, prob, [-2.0], mode="line")[0]
    for mode in ("cone", "line"):
        assert cone_membership(spec, prob, [0.0], mode=mode)[0]


def test_cone_membership_rejects_unknown_block():
    prob, _, _ = scalar_fixture(1.0)
    spec = ConeSpec([3], [], np.zeros((0, 1)))
    with pytest.raises(DimensionError):
        cone_membership(spec, prob, [0.0])


def test_cone_spec_requires_unit_rays():
    with pytest.raises(Exception):
        ConeSpec([], [0], [[2.0]])


def test_solution_minimizes_energy(rng):
    prob = small_bingham(8, u0=30.0)
    sol = solve_vi_ipm(prob)
    e0 = energy(prob, sol.y)
    for _ in range(50):
        v = sol.y + 1e-3 * rng.standard_normal(prob.n)
        assert energy(prob, v) >= e0 - 1e-9


def test_slack_is_forced_on_inactive_cells():
    prob = small_bingham(8, u0=30.0)
    sol = solve_vi_ipm(prob)
    sets = classify_sets(prob, sol)
    Ky = prob.apply_K(sol.y)[sets.inactive]
    normals = Ky / np.linalg.norm(Ky, axis=1, keepdims=True)
    np.testing.assert_allclose(sol.q[sets.inactive], normals, atol=1e-5)


@pytest.mark.parametrize(
    "u, k_rows, q",
    [(1.0, 1, None), (1.0, 2, [[0.5], [0.5]]), (1.0, 2, [[1.0], [0.0]]), (2.0, 1, None)],
)
def test_cone_descriptions_agree(rng, u, k_rows, q):
    prob, sol, sets = scalar_fixture(u, k_rows=k_rows, q=q)
    spec = ConeSpec.cone(sol, sets)
    for _ in range(100):
        v = rng.standard_normal(1)
        assert cone_membership(spec, prob, v)[0] == cone_membership_dual(prob, sol, sets, v)
