"""Birth-death processes in interactive random environments.

Simulation of the joint level/environment Markov process, product-form
invariant measures r_n(z) nu(dz) / Xi for jump and diffusive environments,
and certified exponential / polynomial convergence-rate bounds.
"""

__version__ = "1.0.0"

from .convergence import (
    BoundsProfile,
    BusyPeriodMgf,
    CouplingResult,
    DecayCurve,
    DominationReport,
    EnvCouplingFit,
    G,
    IntegrabilityReport,
    PolynomialCertificate,
    RateCertificate,
    UStarReport,
    bounds_profile,
    busy_period_mgf,
    check_exponential_condition,
    check_integrability,
    couple_exponential,
    exponential_tail_eta,
    fit_env_coupling,
    g,
    hitting_bound_check,
    lyapunov_certificate,
    mminf_domination_check,
    sample_descent_steps,
    theta,
    tv_decay_polynomial,
    u_star,
    walk_domination_check,
)
from .diffusion import (
    DiffusionSpec,
    DomainSpec,
    ExponentialJumps,
    HybridInvariantMeasure,
    StationaryLaw,
    VariableDomainFamily,
    XiResult,
    binned_joint_measure,
    compute_xi_diffusive,
    example_process,
    half_line,
    interval,
    invariant_measure_diffusive,
    orthant,
    reflect_into,
    simulate_env_path,
    skew_symmetry_check,
    stationary_law,
    step_reflected,
    variable_half_line,
    xi_jump_rbm_closed_form,
    xi_rbm_arrival_closed_form,
)
from .errors import (
    AllCensored,
    BdEnvError,
    BoundViolated,
    CellMismatch,
    ConfigError,
    DivergenceSuspected,
    Divergence,
    DomainError,
    HorizonExceeded,
    InsufficientData,
    MissingParam,
    NegativeEffectiveDrift,
    NoCommonV,
    NotLyapunov,
    RateExplosion,
    RateTooLargeForStep,
    SkewSymmetryFailed,
    SpeedCap,
    StepRejected,
    UnknownModel,
    XiDivergent,
    ZeroDeathRate,
)
from .jointsim import (
    HittingSample,
    OccupancyResult,
    PathResult,
    SimConfig,
    default_bin_edges,
    hitting_time,
    simulate_joint_diffusive,
)
from .jumpenv import (
    EnvChainSpec,
    InvariantMeasureJump,
    JointGeneratorMatrix,
    JumpPathResult,
    build_joint_generator,
    env_from_matrix,
    invariant_measure_jump,
    simulate_jump_joint,
    solve_common_v,
    validate_generator,
    verify_balance,
)
from .models import (
    CumulativeRatio,
    ModelSpec,
    NormalizedWeights,
    SummabilityReport,
    catalog,
    check_summability,
    cumulative_ratio,
    geometric_variability,
    normalized_weights,
)
from .stats import (
    EmpiricalMeasure,
    MgfEstimate,
    TailFit,
    coarsen,
    fit_tail,
    mgf_estimate,
    survival_curve,
    tv_distance,
)

__all__ = [name for name in dir() if not name.startswith("_")]
