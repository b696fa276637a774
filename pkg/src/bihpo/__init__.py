"""Bilevel hyperparameter optimization with ensemble hypergradients.

The package tunes regularization-style hyperparameters by differentiating
through (or around) an inner gradient-descent solve: iterative reverse-mode
differentiation (full and truncated), implicit differentiation with conjugate
gradient or fixed-point linear solvers, validation-split ensembling of the
resulting hypergradients, and an online variant that keeps per-split shadow
iterates. Closed-form ridge oracles and Monte-Carlo bias-variance diagnostics
quantify estimator quality.
"""

__version__ = "0.1.0"

from .data import (
    DataView,
    Dataset,
    Split,
    SplitPlan,
    carve_holdout,
    corrupt_labels,
    derive_seed,
    enumerate_all_splits,
    full_view,
    gen_linear,
    gen_multiclass,
    make_splits,
    read_libsvm,
    splitmix64,
    subset,
    val_size,
)
from .diagnostics import (
    BiasVarianceReport,
    FpcReport,
    RidgeOracle,
    SweepDesign,
    VarianceCurve,
    bias_variance_sweep,
    ensemble_variance_curve,
    fpc_verify,
    fpc_with_replacement,
    fpc_without_replacement,
    ridge_closed_form,
    ridge_curvature,
    ridge_exact_hypergrad,
)
from .errors import (
    BilevelError,
    ConfigError,
    ContractViolationError,
    InfeasiblePlanError,
    NumericalError,
    ParseError,
    SingularMatrixError,
)
from .hypergrad import (
    HypergradMethod,
    HypergradResult,
    InnerTrajectory,
    aid_hypergrad,
    contraction_params,
    estimate_hypergrad,
    finite_diff_hypergrad,
    inner_solve,
    itd_hypergrad,
    trhg_hypergrad,
)
from .linalg import LinearOperator, as_operator, cg_solve, dense_solve, fixed_point_solve, gemv
from .problems import (
    MODEL_KINDS,
    BilevelProblem,
    DerivativeReport,
    ModelSpec,
    build_problem,
    verify_derivatives,
)
from .strategies import (
    HPOTrace,
    OEHGState,
    OuterOptimizer,
    SplitEval,
    StepRecord,
    oehg_split_hypergrad,
    optimizer_step,
    run_ehg,
    run_oehg,
    run_single,
)

__all__ = [
    "__version__",
    "BiasVarianceReport",
    "BilevelError",
    "BilevelProblem",
    "ConfigError",
    "ContractViolationError",
    "DataView",
    "Dataset",
    "DerivativeReport",
    "FpcReport",
    "HPOTrace",
    "HypergradMethod",
    "HypergradResult",
    "InfeasiblePlanError",
    "InnerTrajectory",
    "LinearOperator",
    "MODEL_KINDS",
    "ModelSpec",
    "NumericalError",
    "OEHGState",
    "OuterOptimizer",
    "ParseError",
    "RidgeOracle",
    "SingularMatrixError",
    "Split",
    "SplitEval",
    "SplitPlan",
    "StepRecord",
    "SweepDesign",
    "VarianceCurve",
    "aid_hypergrad",
    "as_operator",
    "bias_variance_sweep",
    "build_problem",
    "carve_holdout",
    "cg_solve",
    "contraction_params",
    "corrupt_labels",
    "dense_solve",
    "derive_seed",
    "ensemble_variance_curve",
    "enumerate_all_splits",
    "estimate_hypergrad",
    "finite_diff_hypergrad",
    "fixed_point_solve",
    "fpc_verify",
    "fpc_with_replacement",
    "fpc_without_replacement",
    "full_view",
    "gemv",
    "gen_linear",
    "gen_multiclass",
    "inner_solve",
    "itd_hypergrad",
    "make_splits",
    "oehg_split_hypergrad",
    "optimizer_step",
    "read_libsvm",
    "ridge_closed_form",
    "ridge_curvature",
    "ridge_exact_hypergrad",
    "run_ehg",
    "run_oehg",
    "run_single",
    "splitmix64",
    "subset",
    "trhg_hypergrad",
    "val_size",
    "verify_derivatives",
]
