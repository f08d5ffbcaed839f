"""Two-phase Hessian-energy minimization on the unit ball.

The package minimizes energies of the form

    I[u] = int_{B1} [F(D2u)]^p + gp * max(u, 0) - gm * min(u, 0)

over grid fields with a fixed Dirichlet trace, builds the associated density
m = [F(D2u)]^(p-1), verifies the resulting double-divergence system in a
discrete weak sense, and measures the integrability and regularity estimates
the pair is expected to satisfy.
"""

from .energy import EnergyBreakdown, ProblemConfig, coercivity_check, evaluate, gradient
from .errors import (
    ConfigError,
    DomainError,
    HessminError,
    InputError,
    InternalError,
    NumericFailure,
    SingularityError,
    SolverFailure,
)
from .grid import (
    BoundaryData,
    Grid,
    HessianField,
    ScalarField,
    apply_trace,
    build_grid,
    hessian,
    integrate,
    load_field_csv,
    make_boundary,
    save_field_csv,
)
from .operators import (
    CertificationReport,
    Operator,
    SymMatrix,
    builtin_operator,
    certify_A1,
    certify_A2,
    certify_A3,
    certify_all,
    certify_derivative_bounds,
    derivative,
    frobenius_operator,
    positive_trace_operator,
    trace_operator,
    weighted_frobenius_operator,
)
from .operators import eval as operator_eval
from .solver import SolveOptions, SolveResult, minimize, multistart
from .system_check import (
    ResidualReport,
    SolutionPair,
    TestFunction,
    build_pair,
    check_first_equation,
    default_test_suite,
    weak_residual_second_equation,
)
from .analysis import (
    EstimateVerdict,
    FreeBoundary,
    NormSuite,
    RefinementResult,
    barrier_field,
    check_holder,
    check_integrability_gain,
    check_localization,
    check_regularity,
    extract_free_boundary,
    lq_norm,
    norm_suite,
    poincare_check,
    refinement_driver,
)

__version__ = "0.1.0"
