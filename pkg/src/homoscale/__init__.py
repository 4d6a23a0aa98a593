"""Uniform-in-time diffusion approximation of fast-slow SDE systems.

The package simulates fully coupled two-scale systems

    dX = eps^-2 b(X,Y) dt + eps^-1 c(X,Y) dt + sqrt(2) eps^-1 sigma(X,Y) dW
    dY = F(X,Y) dt + eps^-1 H(X,Y) dt + sqrt(2) G(X,Y) dW,

builds their homogenized limits (corrector equation, frozen equilibria,
effective drift and diffusion), and measures the weak error between the
two sides uniformly in time.  Specialized stacks cover kinetic Langevin
dynamics in the small-mass limit, periodic homogenization by spectral
cell problems, and Zvonkin regularization of rough drifts.

Entry points: build a system with :func:`build_system` or the preset
registry, simulate with :func:`integrate_multiscale`, get effective
coefficients with :func:`effective_evaluators`, and measure rates with
:func:`joint_law_error`.  The ``homoscale`` command line drives the same
pipelines from JSON configs.
"""

from .convergence import (
    BoundaryLayerFit,
    CommutativityCheck,
    ConvergenceReport,
    RateFit,
    StationaryGap,
    boundary_layer_fit,
    commutativity_check,
    fit_rate,
    joint_law_error,
    stationary_gap,
)
from .correctors import (
    Corrector,
    corrector_feynman_kac,
    corrector_for,
    corrector_linear,
    generator_residual,
    zero_corrector,
)
from .effective import (
    EffectiveDynamics,
    GammaTerms,
    assemble_gamma,
    closed_form_evaluators,
    effective_coefficients,
    effective_evaluators,
    effective_sk,
    psd_sqrt,
    sk_coefficient_fields,
    verify_psd_identity,
)
from .engine import (
    TrajectoryEnsemble,
    estimate_expectation,
    export_csv,
    integrate_homogenized,
    integrate_multiscale,
    integrate_multiscale_ladder,
    load_ensemble,
    save_ensemble,
)
from .frozen import (
    FrozenEquilibrium,
    MixingProfile,
    MomentTable,
    centering_residual,
    estimate_mixing,
    frozen_equilibrium,
    moment_scan,
)
from .kramers import (
    LangevinSystem,
    ThermoCurves,
    energy_curve,
    entropy_production_curve,
    kl_correction,
    sk_homogenized,
    sk_simulate,
    trace_identity_check,
)
from .lyapunov import lyapunov_batch, lyapunov_residual, solve_lyapunov
from .rng import RngStream
from .systems import (
    CoefficientField,
    ConfigError,
    MultiscaleSystem,
    PolynomialWeight,
    SystemFlags,
    TestObservable,
    build_system,
    validate_system,
)
from .torus import (
    FourierField,
    TorusHomogData,
    ZvonkinSystem,
    ZvonkinTransform,
    cell_problem_torus,
    effective_torus,
    gaussian_fourier_reference,
    harmonic_field,
    invariant_density_torus,
    synth_divergence_free_drift,
    torus_uniform_error,
    zvonkin_solve,
    zvonkin_transform_system,
)

__version__ = "0.1.0"

__all__ = [
    "BoundaryLayerFit", "CommutativityCheck", "ConvergenceReport", "RateFit",
    "StationaryGap", "boundary_layer_fit", "commutativity_check", "fit_rate",
    "joint_law_error", "stationary_gap",
    "Corrector", "corrector_feynman_kac", "corrector_for", "corrector_linear",
    "generator_residual", "zero_corrector",
    "EffectiveDynamics", "GammaTerms", "assemble_gamma",
    "closed_form_evaluators", "effective_coefficients",
    "effective_evaluators", "effective_sk", "psd_sqrt",
    "sk_coefficient_fields", "verify_psd_identity",
    "TrajectoryEnsemble", "estimate_expectation", "export_csv",
    "integrate_homogenized", "integrate_multiscale",
    "integrate_multiscale_ladder", "load_ensemble",
    "save_ensemble",
    "FrozenEquilibrium", "MixingProfile", "MomentTable", "centering_residual",
    "estimate_mixing", "frozen_equilibrium", "moment_scan",
    "LangevinSystem", "ThermoCurves", "energy_curve",
    "entropy_production_curve", "kl_correction", "sk_homogenized",
    "sk_simulate", "trace_identity_check",
    "lyapunov_batch", "lyapunov_residual", "solve_lyapunov",
    "RngStream",
    "CoefficientField", "ConfigError", "MultiscaleSystem", "PolynomialWeight",
    "SystemFlags", "TestObservable", "build_system", "validate_system",
    "FourierField", "TorusHomogData", "ZvonkinSystem", "ZvonkinTransform",
    "cell_problem_torus", "effective_torus", "gaussian_fourier_reference",
    "harmonic_field", "invariant_density_torus",
    "synth_divergence_free_drift", "torus_uniform_error", "zvonkin_solve",
    "zvonkin_transform_system",
    "__version__",
]
