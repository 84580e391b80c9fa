"""Inertial Langevin dynamics of a particle in a harmonic trap, observed
from a frame rotating by ``theta(t)``.

Lab-frame state is ``(x, v_x, y, v_y)``. The rotating-frame state is
``R(t) z`` where ``R`` rotates positions and applies the product rule to
velocities, so the transformed drift is ``(dR/dt + R L) R^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..integrators import LinearSdeModel
from ..magnus import OperatorPath

ThetaFn = Callable[[float], tuple[float, float, float]]


def oscillating_theta(omega: float) -> ThetaFn:
    """``theta(t) = 2 + cos(omega t)`` with its first two derivatives."""

    def theta(t):
        return (
            2.0 + np.cos(omega * t),
            -omega * np.sin(omega * t),
            -omega * omega * np.cos(omega * t),
        )

    return theta


def fixed_theta(t: float) -> tuple[float, float, float]:
    return 0.0, 0.0, 0.0


@dataclass(frozen=True)
class LangevinRotatingParams:
    """Physical parameters and frame motion.

    ``theta`` returns ``(theta, theta_dot, theta_ddot)``; ``None`` means
    ``2 + cos(omega t)``. ``rotating=False`` selects the fixed lab frame.
    """

    K: float = 2.0
    m: float = 1.0
    gamma: float = 2.5
    kBT: float = 0.01
    omega: float = 1.0
    tf: float = 4.0
    z0_lab: tuple[float, ...] = (1.0, -0.1, 1.0, -0.1)
    rotating: bool = True
    theta: ThetaFn | None = None

    def __post_init__(self):
        for name in ("K", "m", "gamma", "kBT"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def theta_fn(self) -> ThetaFn:
        if not self.rotating:
            return fixed_theta
        return self.theta or oscillating_theta(self.omega)


def lab_operators(p: LangevinRotatingParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lab-frame drift ``L``, noise ``Q`` and Gibbs covariance ``C``."""
    k, m, g = p.K / p.m, p.m, p.gamma / p.m
    block = np.array([[0.0, 1.0], [-k, -g]])
    L = np.zeros((4, 4))
    L[:2, :2] = block
    L[2:, 2:] = block
    q = np.sqrt(2.0 * p.kBT * p.gamma) / m
    Q = np.diag([0.0, q, 0.0, q])
    C = np.diag([p.kBT / p.K, p.kBT / p.m, p.kBT / p.K, p.kBT / p.m])
    return L, Q, C


def rotation(th: float, thd: float) -> np.ndarray:
    c, s = np.cos(th), np.sin(th)
    return np.array(
        [
            [c, 0.0, s, 0.0],
            [-s * thd, c, c * thd, s],
            [-s, 0.0, c, 0.0],
            [-c * thd, -s, -s * thd, c],
        ]
    )


def rotation_dot(th: float, thd: float, thdd: float) -> np.ndarray:
    c, s = np.cos(th), np.sin(th)
    return np.array(
        [
            [-s * thd, 0.0, c * thd, 0.0],
            [-c * thd**2 - s * thdd, -s * thd, -s * thd**2 + c * thdd, c * thd],
            [-c * thd, 0.0, -s * thd, 0.0],
            [s * thd**2 - c * thdd, -c * thd, -c * thd**2 - s * thdd, -s * thd],
        ]
    )


def frame_matrix(p: LangevinRotatingParams, t: float) -> np.ndarray:
    """``R(t)`` mapping lab coordinates to the rotating frame."""
    th, thd, _ = p.theta_fn()(t)
    return rotation(th, thd)


def rotating_operator(p: LangevinRotatingParams, t: float, L: np.ndarray | None = None) -> np.ndarray:
    if L is None:
        L = lab_operators(p)[0]
    th, thd, thdd = p.theta_fn()(t)
    R = rotation(th, thd)
    if abs(np.linalg.det(R)) < 1e-12:
        raise ValueError(f"frame matrix is singular at t={t}")
    # (dR/dt + R L) R^{-1}
    return np.linalg.solve(R.T, (rotation_dot(th, thd, thdd) + R @ L).T).T


def langevin_rotating(params: LangevinRotatingParams = LangevinRotatingParams()) -> LinearSdeModel:
    """Rotating-frame model with ``C(t) = R C R^T`` and ``Q(t) = R Q``."""
    L, Q, C = lab_operators(params)
    z0 = frame_matrix(params, 0.0) @ np.asarray(params.z0_lab, dtype=float)
    if not params.rotating:
        return LinearSdeModel(
            L=OperatorPath(4, lambda t: L),
            Q=lambda t: Q,
            C=C,
            stationary_L=True,
            commuting_L=True,
            z0=z0,
            tf=params.tf,
            name="langevin-lab",
        )

    def frame(t):
        return frame_matrix(params, t)

    return LinearSdeModel(
        L=OperatorPath(4, lambda t: rotating_operator(params, t, L), timescale=0.5 / params.omega),
        Q=lambda t: frame(t) @ Q,
        C=lambda t: frame(t) @ C @ frame(t).T,
        z0=z0,
        tf=params.tf,
        name="langevin",
    )


def em_stability_tau_langevin(
    params: LangevinRotatingParams = LangevinRotatingParams(), samples: int = 1000
) -> float:
    """``min_{t, lambda} -2 Re(lambda) / |lambda|^2`` over the rotating-frame spectrum."""
    L = lab_operators(params)[0]
    tau = np.inf
    for t in np.linspace(0.0, params.tf, samples):
        lam = np.linalg.eigvals(rotating_operator(params, t, L))
        tau = min(tau, float(np.min(-2.0 * lam.real / np.abs(lam) ** 2)))
    return tau
