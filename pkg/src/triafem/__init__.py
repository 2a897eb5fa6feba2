"""Adaptive P1 finite elements on 2D triangle meshes.

The package implements the solve-estimate-mark-refine loop for second
order elliptic problems (linear non-symmetric and strongly monotone
nonlinear), together with the diagnostics used to verify estimator
reduction, quasi-orthogonality, R-linear decay of the estimator and
convergence rates.
"""

from .assembly import (
    DiscreteSolution,
    NonlinearSolveError,
    SolverError,
    SparseSystem,
    assemble_linear,
    assemble_operator,
    energy_products,
    evaluate,
    grad_norm_sq,
    h1_error_sq,
    solve_linear,
    solve_nonlinear,
    transfer,
)
from .driver import (
    AfemResult,
    AfemRunError,
    AfemTrace,
    RateFit,
    check_convergence,
    check_discrete_reliability,
    check_estimator_reduction,
    check_marking_optimality,
    check_quasi_orthogonality,
    check_rlinear,
    discrete_reliability_ratio,
    fit_rate,
    run_afem,
    run_uniform,
)
from .estimator import EstimatorReport, estimate, local_sum, oscillations
from .marking import AllZeroIndicators, MarkingResult, mark_binned, mark_min
from .mesh import (
    Mesh,
    MeshError,
    RefinementRecord,
    closure_audit,
    load_initial_mesh,
    lshape_mesh,
    overlay,
    read_mesh,
    refine_nvb,
    shape_regularity,
    uniform_refine,
    unit_square_mesh,
    write_mesh,
)
from .problems import (
    LinearProblem,
    NonlinearProblem,
    apply_operator_pointwise,
    builtin_names,
    builtin_problem,
    check_ellipticity,
)

__all__ = [
    "AfemResult",
    "AfemRunError",
    "AfemTrace",
    "AllZeroIndicators",
    "DiscreteSolution",
    "EstimatorReport",
    "LinearProblem",
    "MarkingResult",
    "Mesh",
    "MeshError",
    "NonlinearProblem",
    "NonlinearSolveError",
    "RateFit",
    "RefinementRecord",
    "SolverError",
    "SparseSystem",
    "apply_operator_pointwise",
    "assemble_linear",
    "assemble_operator",
    "builtin_names",
    "builtin_problem",
    "check_convergence",
    "check_discrete_reliability",
    "check_ellipticity",
    "check_estimator_reduction",
    "check_marking_optimality",
    "check_quasi_orthogonality",
    "check_rlinear",
    "closure_audit",
    "discrete_reliability_ratio",
    "energy_products",
    "estimate",
    "evaluate",
    "fit_rate",
    "grad_norm_sq",
    "h1_error_sq",
    "load_initial_mesh",
    "local_sum",
    "lshape_mesh",
    "mark_binned",
    "mark_min",
    "oscillations",
    "overlay",
    "read_mesh",
    "refine_nvb",
    "run_afem",
    "run_uniform",
    "shape_regularity",
    "solve_linear",
    "solve_nonlinear",
    "transfer",
    "uniform_refine",
    "unit_square_mesh",
    "write_mesh",
]
