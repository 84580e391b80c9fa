"""Two-dimensional oscillating system with a non-commuting ``L(t)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..integrators import LinearSdeModel
from ..magnus import OperatorPath


@dataclass(frozen=True)
class LtvOscillatorParams:
    gamma: float = 2.0
    omega: float = 1.0
    c1: float = 0.04
    c2: float = 0.05
    z0: tuple[float, float] = (1.0, 1.0)
    tf: float = 5.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("target variances must be positive")


def ltv_operator(t: float, gamma: float, omega: float) -> np.ndarray:
    c2 = np.cos(omega * t) ** 2
    s2 = np.sin(omega * t) ** 2
    return -gamma * np.array([[2.0 + c2, 2.0 - s2], [2.0 + s2, 2.0 + c2]])


def ltv_forcing(t: float, omega: float) -> np.ndarray:
    return omega * np.array([np.cos(omega * t), -np.sin(omega * t)])


def ltv_oscillator(params: LtvOscillatorParams = LtvOscillatorParams()) -> LinearSdeModel:
    """The oscillator as a :class:`LinearSdeModel`.

    Noise follows the instantaneous balance ``Q Q^T = -L(t) C - C L(t)^T``
    so that ``C = diag(c1, c2)`` is the target covariance at every time.
    """
    g, w = params.gamma, params.omega
    # cos^2 and sin^2 oscillate at 2*omega
    path = OperatorPath(2, lambda t: ltv_operator(t, g, w), timescale=0.5 / w if w > 0 else None)
    return LinearSdeModel(
        L=path,
        f=lambda t: ltv_forcing(t, w),
        C=np.diag([params.c1, params.c2]),
        z0=np.array(params.z0, dtype=float),
        tf=params.tf,
        name="ltv",
    )


def em_stability_tau_ltv(params: LtvOscillatorParams = LtvOscillatorParams(), samples: int = 1000) -> float:
    """``min_t 2 / |lambda_max(L(t))|`` sampled on ``[0, tf]``."""
    ts = np.linspace(0.0, params.tf, samples)
    rho = max(np.abs(np.linalg.eigvals(ltv_operator(t, params.gamma, params.omega))).max() for t in ts)
    return 2.0 / rho
