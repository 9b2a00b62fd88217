"""Trust-region control of Bingham flow on a coarse grid.

Runs the optimizer on a 16 x 16 grid for one cost weight and prints the
trace, the final active and biactive counts and the stationarity
certificate. Takes a few seconds.
"""

import numpy as np

from tvvi import (
    GridSpec,
    TRConfig,
    bingham_cost,
    bingham_problem,
    classify_sets,
    strong_stationarity_check,
    tr_optimize,
)
from tvvi.trust_region import ReducedProblem


def main(n_grid=16, alpha=5e-4):
    grid = GridSpec(n_grid)
    prob = bingham_problem(grid)
    cost = bingham_cost(grid, alpha)
    u, trace = tr_optimize(prob, cost, TRConfig(), prob.u)
    for rec in trace.records:
        print(f"{rec.k:3d}  f={rec.f:11.4f}  |g|={rec.grad_norm:.2e}  delta={rec.delta:.2e}  {rec.step}")
    _, sol, _ = ReducedProblem(prob, cost).solve(u)
    sets = classify_sets(prob, sol)
    print(f"active cells {len(sets.active)}, biactive {len(sets.biactive)}")
    cert = strong_stationarity_check(prob, cost, u, sol=sol)
    for name, value in cert.residuals.items():
        print(f"  {name}: {value:.2e}")
    print(f"control range [{np.min(u):.3f}, {np.max(u):.3f}]")


if __name__ == "__main__":
    main()
