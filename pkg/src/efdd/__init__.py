"""Exponential fluctuation-dissipation integrators for linear SDEs with
time-varying operators.
"""

from .harness import (
    ConvergenceReport,
    EnsembleConfig,
    MomentState,
    convergence_study,
    fit_slope,
    moment_oracle,
    propagate_scheme_moments,
    relative_errors,
    run_ensemble,
    stability_sweep,
    time_ordered_mean,
)
from .integrators import (
    LinearSdeModel,
    SchemeKind,
    StepScheme,
    apply_step,
    build_step,
    check_cov_condition,
    continuous_fd_q,
    em_fd_q,
    forcing_integral,
    xi_covariance,
)
from .linalg import IndefiniteCovariance, commutator, expm, psd_factor, sym_eig
from .magnus import (
    MagnusTruncation,
    OperatorPath,
    magnus_truncated,
    omega1,
    omega2,
    omega3,
    time_ordered_oracle,
)

__version__ = "0.1.0"
