"""Sensitivity of the one-dimensional VI ``min a/2 y^2 - u y + k |y|``.

At ``u = k`` the solution map has a kink: the one-sided derivatives are
``1/a`` to the right and ``0`` to the left. The script compares both with
difference quotients and shows the Frechet check and the two Bouligand
elements at the kink.
"""

import numpy as np

from tvvi import (
    BiactivePartition,
    bouligand_element_apply,
    classify_sets,
    difference_quotient,
    directional_derivative,
    frechet_check,
    separable_problem,
)
from tvvi.sensitivity import solution_map


def main():
    a, k = 2.0, 1
    for u in (0.5, 1.0, 1.5):
        prob = separable_problem(a, k, u)
        sol = solution_map(prob, prob.u)
        sets = classify_sets(prob, sol)
        check = frechet_check(prob, sol, sets)
        print(f"u={u}: y={sol.y[0]:.4f} biactive={[int(j) for j in sets.biactive]} differentiable={bool(check)}")
        for h in (1.0, -1.0):
            eta = directional_derivative(prob, sol, sets, np.array([h])).eta[0]
            dq = difference_quotient(prob, prob.u, np.array([h]), 1e-6, base=sol)[0]
            print(f"  h={h:+.0f}: derivative {eta:+.4f}, quotient {dq:+.4f}")

    prob = separable_problem(a, k, float(k))
    sol = solution_map(prob, prob.u)
    sets = classify_sets(prob, sol)
    for name, part in (("B0", BiactivePartition([0], [])), ("B1", BiactivePartition([], [0]))):
        elem = bouligand_element_apply(prob, sol, sets, part, [1.0])
        print(f"element with the kink cell in {name}: {elem.eta[0]:+.4f}")


if __name__ == "__main__":
    main()
