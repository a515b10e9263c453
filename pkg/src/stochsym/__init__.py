"""stochsym: compositional finite abstractions of networked stochastic affine systems.

The toolkit certifies sampled-data abstractions of coupled stochastic
affine subsystems through storage-function inequalities, aggregates the
certificates into a network-level simulation function via one dissipativity
LMI, evaluates probabilistic output-closeness bounds, synthesizes safety
controllers on the finite abstraction, and refines them to the concrete
network with Monte Carlo validation.
"""

from .model import (
    AffineSystem,
    Box,
    DiscretizationSpec,
    InterconnectionSpec,
    check_well_posed,
    validate_system,
)
from .certificates import (
    SstfConstants,
    StorageCertificate,
    check_dissipativity_lmi,
    check_geometric,
    check_lyapunov,
    derive_constants,
    gamma_slope_bound,
    kappa_tilde_from,
    solve_candidates,
)
from .composition import (
    CompositionResult,
    NetworkSsf,
    build_x_cmp,
    check_compositional_lmi,
    compose_ssf,
    gershgorin_fast_check,
    scalar_block_params,
)
from .bounds import (
    ClosenessBound,
    closeness_bound,
    epsilon_for_target,
    horizon_for_target,
    psi_hat,
    violation_probability,
)
from .abstraction import (
    AbstractionGrid,
    FiniteAbstraction,
    UniformGrid,
    build_deterministic,
    build_stochastic,
    delta_of,
    quantize,
)
from .synthesis import (
    Controller,
    SafetySpec,
    safety_fixpoint,
    safety_value_iteration,
)
from .runtime import (
    InterfaceState,
    SimConfig,
    SimulationResult,
    TrajectoryRecord,
    clopper_pearson_upper,
    cosimulate,
    em_step,
    interface_input,
)
from .cli import generate_rooms, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AffineSystem", "Box", "DiscretizationSpec", "InterconnectionSpec",
    "check_well_posed", "validate_system",
    "SstfConstants", "StorageCertificate", "check_dissipativity_lmi",
    "check_geometric", "check_lyapunov", "derive_constants",
    "gamma_slope_bound", "kappa_tilde_from", "solve_candidates",
    "CompositionResult", "NetworkSsf", "build_x_cmp",
    "check_compositional_lmi", "compose_ssf", "gershgorin_fast_check",
    "scalar_block_params",
    "ClosenessBound", "closeness_bound", "epsilon_for_target",
    "horizon_for_target", "psi_hat", "violation_probability",
    "AbstractionGrid", "FiniteAbstraction", "UniformGrid",
    "build_deterministic", "build_stochastic", "delta_of", "quantize",
    "Controller", "SafetySpec", "safety_fixpoint", "safety_value_iteration",
    "InterfaceState", "SimConfig", "SimulationResult", "TrajectoryRecord",
    "clopper_pearson_upper", "cosimulate", "em_step", "interface_input",
    "generate_rooms", "run_pipeline",
    "__version__",
]
