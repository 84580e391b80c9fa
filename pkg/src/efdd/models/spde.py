"""Stochastic diffusion of a scalar field on a periodically sheared square.

In co-deforming coordinates the field lives on a fixed periodic ``N x N``
grid and the Laplacian becomes ``d1^2 + (d2 + a(t) d1)^2`` with shear
factor ``a(t) = X(t) / L``. Both the spectral and the centred
finite-difference discretizations of that operator are diagonal in the
discrete Fourier basis, so every mode ``k = (k1, k2)`` is an independent
scalar SDE and the collection is represented as a model with
``batch_shape = (N, N)`` and ``dim = 1``.

Mode amplitudes follow the transform pair::

    w_hat[k] = 1/N^2 sum_m w[m] exp(-2 pi i k.m / N)
    w[m]     =       sum_k w_hat[k] exp(+2 pi i k.m / N)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..integrators import LinearSdeModel
from ..magnus import OperatorPath

SYMBOLS = ("fd", "spectral")


@dataclass(frozen=True)
class ShearSpdeParams:
    """Parameters of the sheared diffusion problem.

    ``X`` is the boundary displacement (default ``Ldom sin(omega t)``).
    ``f_hat(t)`` returns an ``(N, N)`` real, conjugate-symmetric array of
    mode forcings; ``None`` means no forcing. ``symbol`` selects the
    discrete Laplacian: ``"fd"`` (second-order centred differences,
    ``dx = Ldom / N``) or ``"spectral"`` (exact Fourier symbol).
    """

    D: float = 100.0
    Ldom: float = 100.0
    N: int = 15
    omega: float = 1.0
    c: float = 0.02
    tf: float = 4.0
    w0_hat: float = 1.0
    X: Callable[[float], float] | None = None
    f_hat: Callable[[float], np.ndarray] | None = None
    symbol: str = "fd"

    def __post_init__(self):
        if self.D <= 0 or self.c <= 0:
            raise ValueError("D and c must be positive")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.symbol not in SYMBOLS:
            raise ValueError(f"symbol must be one of {SYMBOLS}")

    def shear(self, t: float) -> float:
        if self.X is None:
            return float(np.sin(self.omega * t))
        return float(self.X(t)) / self.Ldom


def signed_wavenumbers(N: int) -> np.ndarray:
    k = np.arange(N)
    return np.where(k <= N // 2, k, k - N)


def laplacian_symbol(p: ShearSpdeParams, a: float) -> np.ndarray:
    """Non-negative ``(N, N)`` array ``s`` with ``Laplacian_k = -s_k`` under shear ``a``."""
    kk = signed_wavenumbers(p.N)
    if p.symbol == "spectral":
        kap = 2.0 * np.pi * kk / p.Ldom
        k1, k2 = np.meshgrid(kap, kap, indexing="ij")
        return k1**2 + (k2 + a * k1) ** 2
    dx = p.Ldom / p.N
    th = 2.0 * np.pi * kk / p.N
    t1, t2 = np.meshgrid(th, th, indexing="ij")
    # (1 + a^2) d11 + 2 a d12 + d22 with centred differences
    s = (
        4.0 * (1.0 + a * a) * np.sin(t1 / 2) ** 2
        + 4.0 * np.sin(t2 / 2) ** 2
        + 2.0 * a * np.sin(t1) * np.sin(t2)
    )
    return s / dx**2


def mode_rates(p: ShearSpdeParams, t: float) -> np.ndarray:
    """Per-mode drift ``L_k(t)``, shape ``(N, N)``."""
    return -p.D * laplacian_symbol(p, p.shear(t))


def self_conjugate_mask(N: int) -> np.ndarray:
    """Modes with ``k == -k (mod N)`` in both components."""
    k = np.arange(N)
    s = (-k) % N == k
    return s[:, None] & s[None, :]


def _partner(a: np.ndarray, N: int) -> np.ndarray:
    idx = (-np.arange(N)) % N
    return a[..., idx, :][..., :, idx]


def sample_conjugate_symmetric_noise(
    N: int, rng: np.random.Generator, shape: tuple[int, ...] = ()
) -> np.ndarray:
    """Complex Gaussian mode field with ``xi[k] == conj(xi[-k])``.

    Starts from i.i.d. complex normals with real and imaginary variance 1/2
    each, then combines ``(xi'[k] + conj(xi'[-k])) / sqrt(2)``; modes that
    are their own partner use ``1/2`` instead of ``1/sqrt(2)`` and come out
    real. ``shape`` prepends independent draws.
    """
    size = tuple(shape) + (N, N)
    raw = (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)
    mixed = raw + np.conj(_partner(raw, N))
    return np.where(self_conjugate_mask(N), 0.5, 1.0 / np.sqrt(2.0)) * mixed


def unit_mode_noise(N: int) -> Callable[[np.random.Generator, tuple[int, ...]], np.ndarray]:
    """Sampler returning conjugate-symmetric noise with ``E|xi_k|^2 = 1`` for
    every mode, shaped ``shape + (N, N, 1)``.

    The self-conjugate modes of :func:`sample_conjugate_symmetric_noise`
    have variance 1/2 and are rescaled here.
    """
    boost = np.where(self_conjugate_mask(N), np.sqrt(2.0), 1.0)

    def draw(rng, shape):
        return (boost * sample_conjugate_symmetric_noise(N, rng, shape))[..., None]

    return draw


def grid_to_modes(w: np.ndarray) -> np.ndarray:
    """Forward transform with the ``1/N^2`` normalization."""
    w = np.asarray(w)
    n = w.shape[-1]
    return np.fft.fft2(w) / (n * n)


def modes_to_grid(w_hat: np.ndarray, real: bool = True, rtol: float = 1e-12) -> np.ndarray:
    """Inverse transform. With ``real=True`` the imaginary part must be below
    ``rtol * max|w|`` and is dropped.
    """
    w_hat = np.asarray(w_hat)
    n = w_hat.shape[-1]
    w = np.fft.ifft2(w_hat) * (n * n)
    if not real:
        return w
    scale = max(np.abs(w).max(initial=0.0), np.finfo(float).tiny)
    leak = np.abs(w.imag).max(initial=0.0)
    if leak > rtol * scale:
        raise ValueError(f"grid field not real: |imag| {leak:.3e} vs scale {scale:.3e}")
    return w.real.copy()


def synthetic_forcing(amplitude: float = 1.0, omega: float = 1.0) -> Callable[[float], float]:
    """Same real forcing ``amplitude * cos(omega t)`` on every mode."""

    def f_hat(t):
        return amplitude * np.cos(omega * t)

    return f_hat


def shear_spde(params: ShearSpdeParams = ShearSpdeParams()) -> LinearSdeModel:
    """Per-mode scalar models for every Fourier mode, batched as ``(N, N)``.

    Target covariance is ``c`` on every mode; the zero mode has
    ``L = 0`` and so receives no noise.
    """
    N = params.N

    def L(t):
        return mode_rates(params, t)[..., None, None]

    f = None
    if params.f_hat is not None:

        def f(t):
            return np.broadcast_to(np.asarray(params.f_hat(t), dtype=float), (N, N))[..., None]

    return LinearSdeModel(
        L=OperatorPath(1, L, timescale=0.5 / params.omega, batch_shape=(N, N)),
        f=f,
        C=np.full((N, N, 1, 1), params.c),
        commuting_L=True,
        z0=np.full((N, N, 1), params.w0_hat),
        tf=params.tf,
        name="spde",
        noise_sampler=unit_mode_noise(N),
    )


def em_stability_tau_spde(params: ShearSpdeParams = ShearSpdeParams(), samples: int = 1000) -> float:
    """``2 / max_{t, k} |L_k(t)|`` on ``[0, tf]``."""
    rho = max(np.abs(mode_rates(params, t)).max() for t in np.linspace(0.0, params.tf, samples))
    return 2.0 / rho
