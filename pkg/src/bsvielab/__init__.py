"""Monte-Carlo laboratory for two-parameter backward stochastic equations
with terminal-measurable (anticipating) drivers."""

__version__ = "0.1.0"

from .certification import (
    LipschitzProfile,
    WellPosednessCertificate,
    certify,
    compute_bar_K,
    compute_hat_Kp,
)
from .core import (
    BrownianEnsemble,
    MomentRatio,
    PathProcess,
    SquareField,
    TimeGrid,
    TriangleField,
    ito_integral,
    lebesgue_integral,
    make_grid,
    martingale_moment_ratio,
    resample_after,
    simulate_brownian,
)
from .errors import (
    AnticipationRefused,
    CertificateRejected,
    CertificationFailure,
    InvalidArgument,
    NonConvergence,
    NumericalFailure,
    SolverDivergence,
)
from .fbsde import FbsdeSolution, FbsdeSpec, fbsde_to_bsvie, solve_fbsde_via_bsvie
from .generators import DecomposedGenerator, GeneratorSpec, decompose, verify_adaptedness
from .path_dependent import (
    AnticipatedBsdeSpec,
    PathGeneratorSpec,
    PathSegment,
    demo_no_adapted_solution,
    solve_anticipated_bsde,
    solve_path_dependent,
    solve_path_dependent_with_z,
)
from .regression import (
    BasisConfig,
    ConditionalOracle,
    RegressionEngine,
    conditional_expectation,
    martingale_representation,
    reconstruction_error,
)
from .scenarios import SCENARIO_IDS, get_scenario
from .solvers import (
    BsvieSolution,
    SolverConfig,
    m_extend,
    residual,
    solve_adapted_stepping,
    solve_parameterized_bsde,
    solve_type1,
    solve_type2,
    weighted_norm,
)
