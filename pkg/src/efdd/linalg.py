"""Dense real linear algebra used by the integrators.

All routines accept stacks of matrices with shape ``(..., n, n)`` so that
collections of independent systems (e.g. the Fourier modes of an SPDE) can
be handled in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class IndefiniteCovariance(ValueError):
    """A covariance that should be positive semi-definite has a negative
    eigenvalue beyond the round-off tolerance.

    ``step`` is filled in by callers that know which time step produced it.
    """

    def __init__(self, message: str, min_eigenvalue: float = float("nan"), step: int | None = None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.step = step

    def __str__(self) -> str:
        msg = super().__str__()
        if self.step is not None:
            msg = f"{msg} (step {self.step})"
        return msg


def mT(a: np.ndarray) -> np.ndarray:
    """Transpose of the trailing two axes."""
    return np.swapaxes(a, -1, -2)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + mT(a))


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")


def _check_square(a: np.ndarray, name: str) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``a @ b - b @ a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b - b @ a


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of a square matrix or a stack of them.

    Scaling and squaring with a degree-13 Pade kernel (scipy's
    implementation); 1x1 blocks are exponentiated elementwise.
    """
    a = np.asarray(a, dtype=float)
    _check_square(a, "A")
    _check_finite(a, "A")
    if a.shape[-1] == 1:
        return np.exp(a)
    return scipy.linalg.expm(a)


@dataclass(frozen=True)
class SymEig:
    """Eigenvalues (ascending) and orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues[..., None, :]) @ mT(v)


def sym_eig(s: np.ndarray) -> SymEig:
    """Eigendecomposition of the symmetric part of ``s``."""
    s = np.asarray(s, dtype=float)
    _check_square(s, "S")
    _check_finite(s, "S")
    w, v = np.linalg.eigh(symmetrize(s))
    return SymEig(w, v)


def default_tol(s: np.ndarray) -> float:
    return 1e-10 * max(1.0, float(np.linalg.norm(s)))


def psd_factor(s: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Return ``B`` with ``B @ B.T`` equal to ``s`` after clipping round-off.

    Eigenvalues in ``[-tol, 0)`` are set to zero. Anything more negative
    means the covariance is genuinely infeasible and raises
    :class:`IndefiniteCovariance`. The default tolerance is
    ``1e-10 * max(1, ||s||)``.
    """
    s = np.asarray(s, dtype=float)
    if tol is None:
        tol = default_tol(s)
    if tol < 0:
        raise ValueError("tol must be non-negative")
    eig = sym_eig(s)
    lam = eig.eigenvalues
    lo = float(lam.min()) if lam.size else 0.0
    if lo < -tol:
        raise IndefiniteCovariance(
            f"covariance has eigenvalue {lo:.3e} below -{tol:.1e}", min_eigenvalue=lo
        )
    root = np.sqrt(np.clip(lam, 0.0, None))
    return eig.eigenvectors * root[..., None, :]


def assert_psd(s: np.ndarray, tol: float | None = None) -> None:
    """Raise :class:`IndefiniteCovariance` if ``s`` is not PSD within ``tol``."""
    s = np.asarray(s, dtype=float)
    if tol is None:
        tol = default_tol(s)
    lo = float(np.linalg.eigvalsh(symmetrize(s)).min())
    if lo < -tol:
        raise IndefiniteCovariance(
            f"covariance has eigenvalue {lo:.3e} below -{tol:.1e}", min_eigenvalue=lo
        )
