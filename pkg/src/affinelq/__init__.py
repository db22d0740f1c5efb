"""Affine linear-quadratic stochastic control with random coefficients.

Backward Riccati and costate equations on filtration lattices or
deterministic grids, feedback synthesis with exact discrete optimality,
Monte Carlo validation, and vanishing-discount ergodic analysis.
"""

from .errors import (
    AffineLQError,
    BadDimensions,
    ConfigError,
    ForcingNotSquareIntegrable,
    GridMismatch,
    IllConditionedFundamental,
    InsufficientGrid,
    LostPositivity,
    MissingChild,
    MonotonicityViolated,
    NegativeS,
    NoConvergence,
    NonConvexStep,
    NonPositiveAlpha,
    NonSymmetricS,
    NotStabilizable,
    NumericOverflow,
    SingularInnerMatrix,
    SolverError,
    StepSizeUnderflow,
    UnboundedCoefficient,
    UnstableClosedLoop,
    ValidationError,
)
from .lattice import FiltrationLattice
from .model import (
    CoefficientModel,
    Dimensions,
    DiscountedHorizon,
    FiniteHorizon,
    InfiniteHorizon,
    LatticeSpec,
    MCSpec,
    ScenarioConfig,
    dissipativity_margin,
    validate,
)
from .riccati import (
    FeedbackQuadratic,
    InfiniteRiccati,
    RiccatiSolution,
    StationaryFeedback,
    feedback_quadratic,
    generator_G,
    solve_finite_deterministic,
    solve_finite_lattice,
    solve_infinite,
)
from .dual import (
    DualInfinite,
    DualSolution,
    duality_residual,
    feedback_sup_norms,
    solve_dual_finite,
    solve_dual_fundamental,
    solve_dual_infinite,
)
from .synthesis import (
    CostPrediction,
    DPValue,
    FeedbackLaw,
    assemble_feedback,
    bellman_dp_oracle,
    evolve_controlled,
    fundamental_relation_residual,
    hamiltonian_residual,
    lattice_control_cost,
    predicted_cost,
)
from .simulate import (
    CostReport,
    DecayEstimate,
    PathBatch,
    StabilizabilityReport,
    closed_loop_decay,
    evaluate_cost,
    simulate,
    stabilizability_evidence,
)
from .ergodic import (
    DiscountedProblem,
    ErgodicLimit,
    ErgodicReport,
    ErgodicRow,
    discount_transform,
    ergodic_limit,
    scaling_identity_check,
    solve_discounted_family,
)

__version__ = "0.1.0"

__all__ = [
    "AffineLQError",
    "BadDimensions",
    "ConfigError",
    "CoefficientModel",
    "CostPrediction",
    "CostReport",
    "DPValue",
    "DecayEstimate",
    "Dimensions",
    "DiscountedHorizon",
    "DiscountedProblem",
    "DualInfinite",
    "DualSolution",
    "ErgodicLimit",
    "ErgodicReport",
    "ErgodicRow",
    "FeedbackLaw",
    "FeedbackQuadratic",
    "FiltrationLattice",
    "FiniteHorizon",
    "ForcingNotSquareIntegrable",
    "GridMismatch",
    "IllConditionedFundamental",
    "InfiniteHorizon",
    "InfiniteRiccati",
    "InsufficientGrid",
    "LatticeSpec",
    "LostPositivity",
    "MCSpec",
    "MissingChild",
    "MonotonicityViolated",
    "NegativeS",
    "NoConvergence",
    "NonConvexStep",
    "NonPositiveAlpha",
    "NonSymmetricS",
    "NotStabilizable",
    "NumericOverflow",
    "PathBatch",
    "RiccatiSolution",
    "ScenarioConfig",
    "SingularInnerMatrix",
    "SolverError",
    "StabilizabilityReport",
    "StationaryFeedback",
    "StepSizeUnderflow",
    "UnboundedCoefficient",
    "UnstableClosedLoop",
    "ValidationError",
    "assemble_feedback",
    "bellman_dp_oracle",
    "evolve_controlled",
    "closed_loop_decay",
    "discount_transform",
    "dissipativity_margin",
    "duality_residual",
    "ergodic_limit",
    "evaluate_cost",
    "feedback_quadratic",
    "feedback_sup_norms",
    "fundamental_relation_residual",
    "generator_G",
    "hamiltonian_residual",
    "lattice_control_cost",
    "predicted_cost",
    "scaling_identity_check",
    "simulate",
    "solve_discounted_family",
    "solve_dual_finite",
    "solve_dual_fundamental",
    "solve_dual_infinite",
    "solve_finite_deterministic",
    "solve_finite_lattice",
    "solve_infinite",
    "stabilizability_evidence",
    "validate",
]
