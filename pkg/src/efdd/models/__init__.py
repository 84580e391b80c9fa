"""Benchmark systems packaged as :class:`~efdd.integrators.LinearSdeModel` factories."""

from .langevin import (
    LangevinRotatingParams,
    em_stability_tau_langevin,
    frame_matrix,
    lab_operators,
    langevin_rotating,
    rotating_operator,
)
from .ltv import LtvOscillatorParams, em_stability_tau_ltv, ltv_oscillator, ltv_operator
from .spde import (
    ShearSpdeParams,
    em_stability_tau_spde,
    grid_to_modes,
    laplacian_symbol,
    mode_rates,
    modes_to_grid,
    sample_conjugate_symmetric_noise,
    self_conjugate_mask,
    shear_spde,
    synthetic_forcing,
)

__all__ = [
    "LangevinRotatingParams",
    "LtvOscillatorParams",
    "ShearSpdeParams",
    "em_stability_tau_langevin",
    "em_stability_tau_ltv",
    "em_stability_tau_spde",
    "frame_matrix",
    "grid_to_modes",
    "lab_operators",
    "langevin_rotating",
    "laplacian_symbol",
    "ltv_operator",
    "ltv_oscillator",
    "mode_rates",
    "modes_to_grid",
    "rotating_operator",
    "sample_conjugate_symmetric_noise",
    "self_conjugate_mask",
    "shear_spde",
    "synthetic_forcing",
]
