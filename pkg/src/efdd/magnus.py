"""Truncated Magnus expansions for a time-dependent operator ``L(t)``.

For ``dw/dt = L(t) w`` the solution map over ``[t1, t2]`` is written as
``exp(Omega(t2, t1))`` with ``Omega = Omega_1 + Omega_2 + ...``::

    Omega_1 = int L(s1) ds1
    Omega_2 = 1/2  int int_{s2<s1} [L(s1), L(s2)]
    Omega_3 = 1/6  int int int_{s3<s2<s1} [L1,[L2,L3]] + [L3,[L2,L1]]

The integrals are evaluated with nested Gauss-Legendre rules. The
order-2 truncation on two nodes collapses to the classical fourth-order
scheme ``h/2 (L1 + L2) + sqrt(3) h^2 / 12 [L2, L1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .linalg import commutator, expm

__all__ = [
    "OperatorPath",
    "MagnusTruncation",
    "gauss_nodes",
    "omega1",
    "omega2",
    "omega3",
    "magnus_truncated",
    "time_ordered_oracle",
]


@dataclass(frozen=True)
class OperatorPath:
    """A time-dependent linear operator ``t -> L(t)``.

    ``eval`` must return an array of shape ``batch_shape + (dim, dim)``.
    ``timescale`` is the shortest time over which ``L`` varies appreciably;
    when set, default quadratures add nodes for steps longer than it.
    """

    dim: int
    eval: Callable[[float], np.ndarray]
    domain: tuple[float, float] = (-math.inf, math.inf)
    timescale: float | None = None
    batch_shape: tuple[int, ...] = ()

    def __call__(self, t: float) -> np.ndarray:
        return np.asarray(self.eval(t), dtype=float)

    def check_times(self, *ts: float) -> None:
        lo, hi = self.domain
        for t in ts:
            if not (lo <= t <= hi):
                raise ValueError(f"time {t} outside operator domain [{lo}, {hi}]")


@lru_cache(maxsize=None)
def _legendre(q: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(q)
    return x, w


def gauss_nodes(t1: float, t2: float, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights for ``int_{t1}^{t2}``.

    A reversed interval (``t2 < t1``) gives negative weights.
    """
    if q < 1:
        raise ValueError("need at least one quadrature node")
    x, w = _legendre(q)
    h = t2 - t1
    return t1 + 0.5 * h * (x + 1.0), 0.5 * h * w


def resolved_nodes(q_min: int, h: float, timescale: float | None) -> int:
    """Node count for a step of length ``h``: ``q_min`` per ``timescale``."""
    if timescale is None or timescale <= 0:
        return q_min
    return max(q_min, math.ceil(q_min * abs(h) / timescale))


def _stack(path: OperatorPath, ts) -> np.ndarray:
    return np.stack([path(t) for t in ts])


def omega1(path: OperatorPath, t1: float, t2: float, q: int = 2) -> np.ndarray:
    """``int_{t1}^{t2} L(s) ds`` by ``q``-node Gauss-Legendre."""
    path.check_times(t1, t2)
    s, w = gauss_nodes(t1, t2, q)
    return np.tensordot(w, _stack(path, s), axes=1)


def omega2(path: OperatorPath, t1: float, t2: float, q: int = 2) -> np.ndarray:
    """Second Magnus term by nested ``q``-node Gauss-Legendre."""
    path.check_times(t1, t2)
    s, w = gauss_nodes(t1, t2, q)
    out = np.zeros(path.batch_shape + (path.dim, path.dim))
    for si, wi in zip(s, w):
        inner_s, inner_w = gauss_nodes(t1, si, q)
        li = path(si)
        inner = _stack(path, inner_s)
        out = out + wi * np.tensordot(inner_w, commutator(li, inner), axes=1)
    return 0.5 * out


def omega3(path: OperatorPath, t1: float, t2: float, q: int = 3) -> np.ndarray:
    """Third Magnus term by nested ``q``-node Gauss-Legendre (``q**3`` terms)."""
    path.check_times(t1, t2)
    s, w = gauss_nodes(t1, t2, q)
    out = np.zeros(path.batch_shape + (path.dim, path.dim))
    for s1, w1 in zip(s, w):
        l1 = path(s1)
        s2s, w2s = gauss_nodes(t1, s1, q)
        for s2, w2 in zip(s2s, w2s):
            l2 = path(s2)
            s3s, w3s = gauss_nodes(t1, s2, q)
            l3 = _stack(path, s3s)
            terms = commutator(l1, commutator(l2, l3)) + commutator(l3, commutator(l2, l1))
            out = out + w1 * w2 * np.tensordot(w3s, terms, axes=1)
    return out / 6.0


@dataclass(frozen=True)
class MagnusTruncation:
    """Truncation order and quadrature for :func:`magnus_truncated`.

    ``quadrature=None`` picks 2 nodes per dimension (3 for order 3) and
    scales that up with the path's ``timescale`` for long steps.
    """

    order: int = 2
    quadrature: int | None = None

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError(f"unsupported Magnus order {self.order}")
        if self.quadrature is not None and self.quadrature < 1:
            raise ValueError("quadrature must be >= 1")

    def nodes(self, h: float, timescale: float | None) -> int:
        if self.quadrature is not None:
            return self.quadrature
        return resolved_nodes(3 if self.order == 3 else 2, h, timescale)


def magnus_truncated(
    path: OperatorPath, t1: float, t2: float, trunc: MagnusTruncation = MagnusTruncation()
) -> np.ndarray:
    """Truncated Magnus exponent ``Omega_1 + ... + Omega_order`` over ``[t1, t2]``."""
    q = trunc.nodes(t2 - t1, path.timescale)
    if trunc.order == 1:
        return omega1(path, t1, t2, q)
    if trunc.order == 2 and q == 2:
        path.check_times(t1, t2)
        s, _ = gauss_nodes(t1, t2, 2)
        l1, l2 = path(s[0]), path(s[1])
        h = t2 - t1
        return 0.5 * h * (l1 + l2) + (math.sqrt(3.0) * h * h / 12.0) * commutator(l2, l1)
    out = omega1(path, t1, t2, q) + omega2(path, t1, t2, q)
    if trunc.order == 3:
        out = out + omega3(path, t1, t2, q)
    return out


def _ordered_product(mats: np.ndarray) -> np.ndarray:
    """``mats[-1] @ ... @ mats[0]`` by pairwise reduction along axis 0."""
    while mats.shape[0] > 1:
        if mats.shape[0] % 2:
            eye = np.broadcast_to(np.eye(mats.shape[-1]), mats.shape[1:])
            mats = np.concatenate([mats, eye[None]], axis=0)
        mats = mats[1::2] @ mats[0::2]
    return mats[0]


def time_ordered_oracle(path: OperatorPath, t1: float, t2: float, substeps: int) -> np.ndarray:
    """Reference solution map: product of frozen-midpoint exponentials.

    Later times multiply from the left. Converges at second order in the
    substep length and shares no code with the Magnus quadratures.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    path.check_times(t1, t2)
    delta = (t2 - t1) / substeps
    mids = t1 + delta * (np.arange(substeps) + 0.5)
    return _ordered_product(expm(delta * _stack(path, mids)))
