"""Sensitivity analysis and optimal control of total-variation variational
inequalities of the second kind.

The lower-level problem is: find ``y`` with

    <A y, v - y> + sum_j |(K v)_j| - sum_j |(K y)_j| >= <u, v - y>  for all v,

equivalently ``min_y 1/2 y^T A y - u^T y + sum_j |(K y)_j|``. The package
solves it, differentiates its solution map in the directional, Bouligand and
Clarke sense, certifies stationarity of control problems built on it and
optimizes such problems with a nonsmooth trust-region method.
"""

from .bingham import (
    BinghamConfig,
    GridSpec,
    bingham_cost,
    bingham_problem,
    build_gradient_centered,
    build_laplacian_5pt,
    run_experiment,
    sweep_table1,
)
from .core import (
    ComplementarityResiduals,
    ConeSpec,
    IndexSets,
    VIProblem,
    VISolution,
    classify_sets,
    cone_membership,
    energy,
    make_solution,
    residuals,
    separable_problem,
)
from .errors import (
    DegeneratePsiZero,
    DimensionError,
    Infeasible,
    InjectivityRepairFailed,
    NoConvergence,
    NoValidPartition,
    PartitionCapExceeded,
    RayRepresentativeInfeasible,
    SingularSystem,
    StepSizeInvalid,
    TVVIError,
)
from .sensitivity import (
    BiactivePartition,
    DerivativeKind,
    adjoint_solve,
    bouligand_element_apply,
    clarke_element_apply,
    difference_quotient,
    directional_derivative,
    frechet_check,
    frechet_derivative,
    linear_representative,
    min_euclidean_slack,
    min_linf_slack,
    solution_map,
)
from .solvers import (
    IPMConfig,
    PDHGConfig,
    SSNConfig,
    polish_solution,
    solve_vi_ipm,
    solve_vi_oracle_separable,
    solve_vi_pdhg,
    solve_vi_ssn,
)
from .stationarity import (
    CostFunction,
    b_stationarity_residual,
    strong_stationarity_check,
    tracking_cost,
)
from .trust_region import (
    TRConfig,
    TRTrace,
    bfgs_update,
    dogleg_step,
    generalized_gradient,
    psi_measure,
    tr_optimize,
)

__version__ = "0.1.0"
