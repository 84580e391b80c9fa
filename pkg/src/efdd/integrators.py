"""One-step integrators for ``dz = L(t) z dt + f(t) dt + Q(t) dW``.

Every scheme produces an affine-Gaussian update::

    z_{n+1} = S z_n + F + B xi,   xi ~ N(0, I)

Euler-Maruyama uses ``S = I + dt L(t_n)``. The exponential schemes use
``S = exp(Omega)`` and pick the noise covariance so that a prescribed
covariance sequence is reproduced exactly by the discrete chain::

    B B^T = C(t_{n+1}) - S C(t_n) S^T
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .linalg import (
    assert_psd,
    commutator,
    expm,
    mT,
    psd_factor,
    symmetrize,
)
from .magnus import MagnusTruncation, OperatorPath, gauss_nodes, magnus_truncated, omega1, resolved_nodes

__all__ = [
    "LinearSdeModel",
    "SchemeKind",
    "StepScheme",
    "NoiseSpec",
    "StepOperator",
    "CovConditionReport",
    "NotApplicable",
    "continuous_fd_q",
    "em_fd_q",
    "xi_covariance",
    "check_cov_condition",
    "build_step",
    "forcing_integral",
    "apply_step",
    "matvec",
]


class NotApplicable(ValueError):
    """Raised when a diagnostic's preconditions do not hold."""


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (a @ x[..., None])[..., 0]


@dataclass(frozen=True)
class LinearSdeModel:
    """A linear SDE with additive noise.

    The noise is described by an explicit ``Q(t)``, by a target covariance
    ``C`` (constant array or callable of time), or both. Euler-Maruyama
    needs ``Q Q^T``; when only ``C`` is given it uses the instantaneous
    balance ``Q Q^T = -L C - C L^T``. The exponential schemes need ``C``.

    ``noise_sampler(rng, shape)`` overrides the default standard-normal
    draws; ``shape`` is the leading shape, the sampler appends
    ``batch_shape + (dim,)``.
    """

    L: OperatorPath
    f: Callable[[float], np.ndarray] | None = None
    Q: Callable[[float], np.ndarray] | None = None
    C: np.ndarray | Callable[[float], np.ndarray] | None = None
    stationary_L: bool = False
    commuting_L: bool = False
    z0: np.ndarray | None = None
    cov0: np.ndarray | None = None
    tf: float | None = None
    name: str = "model"
    noise_sampler: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.Q is None and self.C is None:
            raise ValueError("model needs an explicit Q or a target covariance C")
        if self.C is not None and not callable(self.C):
            c = np.asarray(self.C, dtype=float)
            if c.shape != self.mat_shape:
                raise ValueError(f"C has shape {c.shape}, expected {self.mat_shape}")
            assert_psd(c)
            object.__setattr__(self, "C", c)

    @property
    def dim(self) -> int:
        return self.L.dim

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.L.batch_shape

    @property
    def vec_shape(self) -> tuple[int, ...]:
        return self.batch_shape + (self.dim,)

    @property
    def mat_shape(self) -> tuple[int, ...]:
        return self.batch_shape + (self.dim, self.dim)

    @property
    def has_target(self) -> bool:
        return self.C is not None

    @property
    def constant_target(self) -> bool:
        return self.C is not None and not callable(self.C)

    def forcing(self, t: float) -> np.ndarray:
        if self.f is None:
            return np.zeros(self.vec_shape)
        return np.broadcast_to(np.asarray(self.f(t), dtype=float), self.vec_shape)

    def target_cov(self, t: float) -> np.ndarray:
        if self.C is None:
            raise ValueError(f"{self.name}: no target covariance")
        if callable(self.C):
            return np.asarray(self.C(t), dtype=float)
        return self.C

    def diffusion(self, t: float) -> np.ndarray:
        """``Q(t) Q(t)^T``."""
        if self.Q is not None:
            q = np.asarray(self.Q(t), dtype=float)
            return q @ mT(q)
        return continuous_fd_q(self.L(t), self.target_cov(t), check=False)

    def initial_mean(self) -> np.ndarray:
        if self.z0 is None:
            return np.zeros(self.vec_shape)
        return np.broadcast_to(np.asarray(self.z0, dtype=float), self.vec_shape).copy()

    def initial_cov(self) -> np.ndarray:
        if self.cov0 is None:
            return np.zeros(self.mat_shape)
        return np.broadcast_to(np.asarray(self.cov0, dtype=float), self.mat_shape).copy()

    def draw_noise(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        if self.noise_sampler is not None:
            return self.noise_sampler(rng, shape)
        return rng.standard_normal(tuple(shape) + self.vec_shape)


class SchemeKind(str, Enum):
    EULER_MARUYAMA = "em"
    EULER_MARUYAMA_FD = "emfd"
    EXP_STATIONARY = "exp"
    EXP_COMMUTING = "expc"
    MAGNUS = "magnus"


@dataclass(frozen=True)
class StepScheme:
    """Which discretization to use and how to evaluate its integrals.

    ``forcing_mode`` is ``"nodes"`` (rebuild the exponential at every
    quadrature node) or ``"midpoint"`` (one exponential from the midpoint
    times the integral of ``f``).
    """

    kind: SchemeKind
    magnus_order: int = 2
    forcing_quadrature: int = 2
    forcing_mode: str = "nodes"
    magnus_quadrature: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        if self.kind is SchemeKind.MAGNUS and self.magnus_order not in (1, 2):
            raise ValueError("magnus_order must be 1 or 2")
        if self.forcing_mode not in ("nodes", "midpoint"):
            raise ValueError(f"unknown forcing mode {self.forcing_mode!r}")
        if self.forcing_quadrature < 1:
            raise ValueError("forcing_quadrature must be >= 1")

    @property
    def label(self) -> str:
        if self.kind is SchemeKind.MAGNUS:
            return f"magnus{self.magnus_order}"
        return self.kind.value

    @property
    def exponential(self) -> bool:
        return self.kind in (SchemeKind.EXP_STATIONARY, SchemeKind.EXP_COMMUTING, SchemeKind.MAGNUS)

    @classmethod
    def parse(cls, label: str, **kw) -> "StepScheme":
        """Build a scheme from a short label: em, emfd, exp, expc, magnus1, magnus2."""
        label = label.strip().lower()
        if label.startswith("magnus"):
            try:
                order = int(label[len("magnus"):] or 2)
            except ValueError:
                raise ValueError(f"unknown scheme {label!r}") from None
            return cls(SchemeKind.MAGNUS, magnus_order=order, **kw)
        try:
            return cls(SchemeKind(label), **kw)
        except ValueError:
            raise ValueError(f"unknown scheme {label!r}") from None


@dataclass(frozen=True)
class NoiseSpec:
    """Step noise covariance ``cov`` and a factor with ``factor @ factor.T ~= cov``."""

    cov: np.ndarray
    factor: np.ndarray


@dataclass(frozen=True)
class StepOperator:
    S: np.ndarray
    F: np.ndarray
    noise: NoiseSpec
    t1: float = 0.0
    t2: float = 0.0


def continuous_fd_q(L: np.ndarray, C: np.ndarray, check: bool = True) -> np.ndarray:
    """Noise covariance rate ``-L C - C L^T`` that keeps ``C`` stationary."""
    L = np.asarray(L, dtype=float)
    C = np.asarray(C, dtype=float)
    sigma = symmetrize(-L @ C - C @ mT(L))
    if check:
        assert_psd(sigma)
    return sigma


def em_fd_q(L: np.ndarray, C: np.ndarray, dt: float, check: bool = True) -> np.ndarray:
    """``-L C - C L^T - dt L C L^T``: Euler-Maruyama keeps ``C`` stationary
    with this ``Q Q^T``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    L = np.asarray(L, dtype=float)
    C = np.asarray(C, dtype=float)
    sigma = symmetrize(-L @ C - C @ mT(L) - dt * (L @ C @ mT(L)))
    if check:
        assert_psd(sigma)
    return sigma


def xi_covariance(S: np.ndarray, C_now: np.ndarray, C_next: np.ndarray) -> np.ndarray:
    """``C_next - S C_now S^T``, symmetrized."""
    S = np.asarray(S, dtype=float)
    return symmetrize(np.asarray(C_next, dtype=float) - S @ np.asarray(C_now, dtype=float) @ mT(S))


@dataclass(frozen=True)
class CovConditionReport:
    """Per-eigenvalue margins ``log(c_next / c_now) - 2 omega``.

    Indices follow the eigenvalues of ``C_next`` from largest to smallest.
    """

    margins: np.ndarray
    passed: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.passed))


def _shared_diagonal(mats, tol):
    # a generic combination of commuting diagonalizable matrices has simple
    # eigenvalues, so its eigenvectors diagonalize every term
    combo = mats[2] + 0.7548776662466927 * mats[1] + 0.5698402909980532 * mats[0]
    w, v = np.linalg.eig(combo)
    if np.abs(w.imag).max(initial=0.0) > tol * max(1.0, np.abs(w).max()):
        raise NotApplicable("shared eigenbasis is not real")
    v = np.real(v)
    diags = []
    for m in mats:
        d = np.linalg.solve(v, m @ v)
        off = d - np.diag(np.diag(d))
        if np.linalg.norm(off) > tol * max(1.0, np.linalg.norm(m)):
            raise NotApplicable("inputs are not diagonal in a shared basis")
        diags.append(np.diag(d))
    order = np.argsort(-diags[2], kind="stable")
    return [d[order] for d in diags]


def check_cov_condition(
    omega: np.ndarray, C_now: np.ndarray, C_next: np.ndarray, tol: float = 1e-8
) -> CovConditionReport:
    """Feasibility of the exponential-scheme noise when everything shares an
    eigenbasis: ``log(lam_i(C_next) / lam_i(C_now)) >= 2 lam_i(omega)``.

    Stacked inputs are checked block by block and the margins stacked.
    Raises :class:`NotApplicable` if the matrices do not commute.
    """
    omega = np.asarray(omega, dtype=float)
    C_now = np.asarray(C_now, dtype=float)
    C_next = np.asarray(C_next, dtype=float)
    batch = np.broadcast_shapes(omega.shape[:-2], C_now.shape[:-2], C_next.shape[:-2])
    if batch:
        n = omega.shape[-1]
        parts = [
            check_cov_condition(
                np.broadcast_to(omega, batch + (n, n))[idx],
                np.broadcast_to(C_now, batch + (n, n))[idx],
                np.broadcast_to(C_next, batch + (n, n))[idx],
                tol,
            )
            for idx in np.ndindex(*batch)
        ]
        margins = np.stack([p.margins for p in parts]).reshape(batch + (n,))
        return CovConditionReport(margins, margins >= -tol)
    mats = (omega, C_now, C_next)
    for a in range(3):
        for b in range(a + 1, 3):
            scale = max(1.0, np.linalg.norm(mats[a]) * np.linalg.norm(mats[b]))
            if np.linalg.norm(commutator(mats[a], mats[b])) > tol * scale:
                raise NotApplicable("omega, C_now and C_next must commute pairwise")
    lam_om, lam_now, lam_next = _shared_diagonal(mats, tol)
    if np.any(lam_now <= 0) or np.any(lam_next <= 0):
        raise ValueError("covariance eigenvalues must be positive")
    margins = np.log(lam_next / lam_now) - 2.0 * lam_om
    return CovConditionReport(margins, margins >= -tol)


def _check_compatible(model: LinearSdeModel, scheme: StepScheme) -> None:
    if scheme.kind is SchemeKind.EXP_STATIONARY and not model.stationary_L:
        raise ValueError(f"{scheme.label} needs a stationary L, {model.name} is time-varying")
    if scheme.kind is SchemeKind.EXP_COMMUTING and not (model.commuting_L or model.stationary_L):
        raise ValueError(f"{scheme.label} needs a commuting L(t)")
    if (scheme.exponential or scheme.kind is SchemeKind.EULER_MARUYAMA_FD) and not model.has_target:
        raise ValueError(f"{scheme.label} needs a target covariance")


def step_exponent(model: LinearSdeModel, scheme: StepScheme, a: float, b: float) -> np.ndarray:
    """Approximate ``log S(b, a)`` for an exponential scheme."""
    path = model.L
    if scheme.kind is SchemeKind.EXP_STATIONARY:
        path.check_times(a, b)
        return (b - a) * path(a)
    if scheme.kind is SchemeKind.EXP_COMMUTING:
        trunc = MagnusTruncation(1, scheme.magnus_quadrature)
        return omega1(path, a, b, trunc.nodes(b - a, path.timescale))
    if scheme.kind is SchemeKind.MAGNUS:
        return magnus_truncated(path, a, b, MagnusTruncation(scheme.magnus_order, scheme.magnus_quadrature))
    raise ValueError(f"{scheme.label} is not an exponential scheme")


def forcing_integral(model: LinearSdeModel, scheme: StepScheme, t1: float, t2: float) -> np.ndarray:
    """Deterministic forcing contribution ``int_{t1}^{t2} S(t2, s) f(s) ds``."""
    if model.f is None:
        return np.zeros(model.vec_shape)
    h = t2 - t1
    if not scheme.exponential:
        return h * model.forcing(t1)
    q = resolved_nodes(scheme.forcing_quadrature, h, model.L.timescale)
    s, w = gauss_nodes(t1, t2, q)
    if scheme.forcing_mode == "midpoint":
        f_int = sum(wj * model.forcing(sj) for sj, wj in zip(s, w))
        mid = 0.5 * (t1 + t2)
        return matvec(expm(step_exponent(model, scheme, mid, t2)), f_int)
    out = np.zeros(model.vec_shape)
    for sj, wj in zip(s, w):
        out = out + wj * matvec(expm(step_exponent(model, scheme, sj, t2)), model.forcing(sj))
    return out


def build_step(model: LinearSdeModel, scheme: StepScheme, t1: float, t2: float) -> StepOperator:
    """Assemble ``S``, ``F`` and the noise of one step from ``t1`` to ``t2``."""
    _check_compatible(model, scheme)
    dt = t2 - t1
    if dt <= 0:
        raise ValueError("t2 must exceed t1")
    if scheme.exponential:
        S = expm(step_exponent(model, scheme, t1, t2))
        sigma = xi_covariance(S, model.target_cov(t1), model.target_cov(t2))
    else:
        model.L.check_times(t1, t2)
        L1 = model.L(t1)
        S = np.eye(model.dim) + dt * L1
        if scheme.kind is SchemeKind.EULER_MARUYAMA:
            sigma = dt * model.diffusion(t1)
        else:
            sigma = dt * em_fd_q(L1, model.target_cov(t1), dt, check=False)
    S = np.broadcast_to(S, model.mat_shape)
    F = forcing_integral(model, scheme, t1, t2)
    factor = psd_factor(sigma)
    return StepOperator(S, F, NoiseSpec(sigma, factor), t1, t2)


def apply_step(step: StepOperator, z: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``S z + F + B xi``. Leading axes of ``z`` (e.g. trajectories) broadcast."""
    z = np.asarray(z)
    xi = np.asarray(xi)
    if z.shape[-1] != step.S.shape[-1] or xi.shape != z.shape:
        raise ValueError(f"shape mismatch: z {z.shape}, xi {xi.shape}, S {step.S.shape}")
    return matvec(step.S, z) + step.F + matvec(step.noise.factor, xi)
