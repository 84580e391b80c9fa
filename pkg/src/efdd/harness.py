"""Moment propagation, reference solutions, ensembles and convergence studies.

Every scheme step is affine-Gaussian, so the exact moments of the discrete
chain follow ``m <- S m + F`` and ``C <- S C S^T + Sigma``. Weak errors are
measured on those deterministic moments; :func:`run_ensemble` samples
trajectories to check the noise path against them.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .integrators import LinearSdeModel, StepOperator, StepScheme, apply_step, build_step, matvec
from .linalg import IndefiniteCovariance, expm, mT, psd_factor, symmetrize

logger = logging.getLogger(__name__)

__all__ = [
    "MomentState",
    "EnsembleConfig",
    "EnsembleResult",
    "ConvergenceRow",
    "ConvergenceReport",
    "StabilityResult",
    "OracleError",
    "FitError",
    "step_count",
    "moment_oracle",
    "time_ordered_mean",
    "propagate_scheme_moments",
    "run_ensemble",
    "trajectory_rng",
    "relative_errors",
    "fit_slope",
    "convergence_study",
    "stability_sweep",
    "worker_count",
]

BLOWUP = 1e3
CHUNK = 512


class OracleError(RuntimeError):
    """The reference solution failed its self-convergence check."""


class FitError(ValueError):
    """Too few usable rows to fit a convergence slope."""


@dataclass
class MomentState:
    mean: np.ndarray
    cov: np.ndarray
    t: float = 0.0


def step_count(t0: float, tf: float, dt: float) -> int:
    """Number of steps of size ``dt`` covering ``[t0, tf]``; must be whole."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    span = tf - t0
    n = round(span / dt)
    if n < 1 or abs(n * dt - span) > 1e-9 * max(1.0, abs(span)):
        raise ValueError(f"tf - t0 = {span} is not a whole number of steps of {dt}")
    return n


def _spectral_radius(model: LinearSdeModel, t0: float, tf: float, samples: int = 64) -> float:
    return max(
        float(np.abs(np.linalg.eigvals(model.L(t))).max()) for t in np.linspace(t0, tf, samples)
    )


def _rk4_moments(model: LinearSdeModel, t0: float, tf: float, n: int):
    h = (tf - t0) / n
    m = model.initial_mean()
    C = model.initial_cov()

    def coeffs(t):
        return model.L(t), model.forcing(t), model.diffusion(t)

    def rhs(L, f, D, m, C):
        LC = L @ C
        return matvec(L, m) + f, LC + mT(LC) + D

    a = coeffs(t0)
    for i in range(n):
        t = t0 + i * h
        mid = coeffs(t + 0.5 * h)
        end = coeffs(t0 + (i + 1) * h)
        k1m, k1c = rhs(*a, m, C)
        k2m, k2c = rhs(*mid, m + 0.5 * h * k1m, C + 0.5 * h * k1c)
        k3m, k3c = rhs(*mid, m + 0.5 * h * k2m, C + 0.5 * h * k2c)
        k4m, k4c = rhs(*end, m + h * k3m, C + h * k3c)
        m = m + (h / 6.0) * (k1m + 2 * k2m + 2 * k3m + k4m)
        C = C + (h / 6.0) * (k1c + 2 * k2c + 2 * k3c + k4c)
        a = end
    return m, symmetrize(C)


def _rel(a, b):
    scale = max(np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / scale)


def moment_oracle(
    model: LinearSdeModel,
    tf: float,
    fine_dt: float | None = None,
    rtol: float = 1e-9,
    t0: float = 0.0,
) -> MomentState:
    """Reference mean and covariance at ``tf`` from the exact moment ODEs.

    Integrates ``m' = L m + f`` and ``C' = L C + C L^T + Q Q^T`` with
    classical RK4 at ``fine_dt`` and ``fine_dt / 2``. If the two differ by
    more than ``rtol`` (relative) an :class:`OracleError` is raised;
    otherwise the Richardson combination of the pair is returned.
    """
    if fine_dt is None:
        rho = _spectral_radius(model, t0, tf)
        fine_dt = min(1e-3, 2.0 / (50.0 * rho)) if rho > 0 else 1e-3
    n = max(1, math.ceil((tf - t0) / fine_dt))
    m1, c1 = _rk4_moments(model, t0, tf, n)
    m2, c2 = _rk4_moments(model, t0, tf, 2 * n)
    dm, dc = _rel(m1, m2), _rel(c1, c2)
    if dm > rtol or dc > rtol:
        raise OracleError(f"oracle not converged at fine_dt={fine_dt}: mean {dm:.2e}, cov {dc:.2e}")
    return MomentState((16.0 * m2 - m1) / 15.0, (16.0 * c2 - c1) / 15.0, tf)


def _affine_product(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Compose affine maps ``x -> A[j] x + b[j]`` applied in order j = 0, 1, ..."""
    while A.shape[0] > 1:
        if A.shape[0] % 2:
            A = np.concatenate([A, np.broadcast_to(np.eye(A.shape[-1]), A.shape[1:])[None]])
            b = np.concatenate([b, np.zeros_like(b[:1])])
        A2, b2 = A[1::2], b[1::2]
        A, b = A2 @ A[0::2], matvec(A2, b[0::2]) + b2
    return A[0], b[0]


def _midpoint_mean(model: LinearSdeModel, t0: float, tf: float, substeps: int) -> np.ndarray:
    delta = (tf - t0) / substeps
    mids = t0 + delta * (np.arange(substeps) + 0.5)
    Ls = np.stack([model.L(t) for t in mids])
    fs = np.stack([model.forcing(t) for t in mids])
    E = expm(delta * Ls)
    g = delta * matvec(expm(0.5 * delta * Ls), fs)
    A, b = _affine_product(E, g)
    return matvec(A, model.initial_mean()) + b


def time_ordered_mean(model: LinearSdeModel, tf: float, substeps: int = 2**14, t0: float = 0.0) -> np.ndarray:
    """Mean at ``tf`` from frozen-midpoint exponentials, Richardson-extrapolated.

    Shares nothing with :func:`moment_oracle` except model evaluation.
    """
    coarse = _midpoint_mean(model, t0, tf, substeps)
    fine = _midpoint_mean(model, t0, tf, 2 * substeps)
    return (4.0 * fine - coarse) / 3.0


def _steps(model: LinearSdeModel, scheme: StepScheme, dt: float, tf: float, t0: float = 0.0) -> Iterator[StepOperator]:
    n = step_count(t0, tf, dt)
    h = (tf - t0) / n
    reuse = model.stationary_L and model.constant_target and model.f is None
    cached = None
    for i in range(n):
        t1, t2 = t0 + i * h, t0 + (i + 1) * h
        if cached is not None:
            yield StepOperator(cached.S, cached.F, cached.noise, t1, t2)
            continue
        try:
            step = build_step(model, scheme, t1, t2)
        except IndefiniteCovariance as exc:
            exc.step = i
            raise
        if reuse:
            cached = step
        yield step


def _propagate(model, scheme, dt, tf, t0=0.0):
    m = model.initial_mean()
    C = model.initial_cov()
    peak = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for step in _steps(model, scheme, dt, tf, t0):
            m = matvec(step.S, m) + step.F
            C = step.S @ C @ mT(step.S) + step.noise.cov
            nc = float(np.linalg.norm(C))
            peak = max(peak, nc) if math.isfinite(nc) else math.inf
    return MomentState(m, symmetrize(C), tf), peak


def propagate_scheme_moments(
    model: LinearSdeModel, scheme: StepScheme, dt: float, tf: float, t0: float = 0.0
) -> MomentState:
    """Exact moments of the discrete chain at ``tf`` (no sampling)."""
    return _propagate(model, scheme, dt, tf, t0)[0]


@dataclass(frozen=True)
class EnsembleConfig:
    n_traj: int
    master_seed: int
    dt: float
    tf: float
    scheme: StepScheme

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.dt <= 0 or self.tf < self.dt:
            raise ValueError("need 0 < dt <= tf")


@dataclass
class EnsembleResult:
    state: MomentState
    n_traj: int
    diverged: int = 0
    final: np.ndarray | None = field(default=None, repr=False)

    @property
    def diverged_fraction(self) -> float:
        return self.diverged / self.n_traj


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for trajectory ``index``; depends only on
    ``(master_seed, index)``.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(seq))


def worker_count() -> int:
    env = os.environ.get("EFDD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _initial_draw(model, rng):
    m0 = model.initial_mean()
    c0 = model.initial_cov()
    if not np.any(c0):
        return m0
    return m0 + matvec(psd_factor(c0), model.draw_noise(rng, ()))


def _run_chunk(model, steps, master_seed, start, stop, record=None):
    n = len(steps)
    rngs = [trajectory_rng(master_seed, i) for i in range(start, stop)]
    z = np.stack([_initial_draw(model, r) for r in rngs])
    noise = np.stack([model.draw_noise(r, (n,)) for r in rngs], axis=1)
    frames = [z.copy()] if record is not None else None
    with np.errstate(over="ignore", invalid="ignore"):
        for k, step in enumerate(steps):
            z = apply_step(step, z, noise[k])
            if frames is not None:
                frames.append(z.copy())
    return z, (np.stack(frames) if frames is not None else None)


def _sample_moments(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = z.mean(axis=0)
    d = z - mean
    cov = np.einsum("t...i,t...j->...ij", d, np.conj(d)) / max(1, z.shape[0] - 1)
    if np.iscomplexobj(cov):
        cov = cov.real
    return mean, symmetrize(cov)


def run_ensemble(
    model: LinearSdeModel,
    config: EnsembleConfig,
    workers: int | None = None,
    keep_paths: bool = False,
) -> EnsembleResult:
    """Sample ``n_traj`` trajectories and return sample moments at ``tf``.

    Trajectories are processed in fixed-size chunks; each uses its own RNG
    stream, so the output is identical for any number of workers. With
    ``keep_paths`` the full paths are kept in ``result.final`` with shape
    ``(n_steps + 1, n_traj, ...)``.
    """
    steps = list(_steps(model, config.scheme, config.dt, config.tf))
    workers = workers or worker_count()
    bounds = [(s, min(s + CHUNK, config.n_traj)) for s in range(0, config.n_traj, CHUNK)]

    def job(b):
        return _run_chunk(model, steps, config.master_seed, b[0], b[1], record=keep_paths or None)

    if workers == 1 or len(bounds) == 1:
        parts = [job(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    z = np.concatenate([p[0] for p in parts])
    flat = z.reshape(z.shape[0], -1)
    ok = np.all(np.isfinite(flat), axis=1) & (np.abs(flat).max(axis=1, initial=0.0) < 1e150)
    diverged = int(np.count_nonzero(~ok))
    if diverged:
        logger.warning("%d of %d trajectories diverged", diverged, config.n_traj)
    mean, cov = _sample_moments(z[ok]) if ok.any() else (np.full_like(z[0], np.nan), None)
    paths = np.concatenate([p[1] for p in parts], axis=1) if keep_paths else None
    return EnsembleResult(MomentState(mean, cov, config.tf), config.n_traj, diverged, paths)


def relative_errors(test: MomentState, ref: MomentState) -> tuple[float, float]:
    """``(|m - m_ref| / |m_ref|, |C - C_ref|_F / |C_ref|_F)``."""
    nm = np.linalg.norm(ref.mean)
    nc = np.linalg.norm(ref.cov)
    if nm == 0 or nc == 0:
        raise ValueError("reference mean or covariance has zero norm")
    return float(np.linalg.norm(test.mean - ref.mean) / nm), float(np.linalg.norm(test.cov - ref.cov) / nc)


def _fit(dts, errs, floor):
    dts = np.asarray(dts, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if dts.size < 3:
        raise FitError(f"need at least 3 rows, have {dts.size}")
    keep = np.isfinite(errs) & (errs > floor) & (dts > 0)
    n = int(np.count_nonzero(keep))
    if n < 2 or np.unique(dts[keep]).size < 2:
        raise FitError(f"need at least 2 distinct rows above {floor}, have {n}")
    return float(np.polyfit(np.log(dts[keep]), np.log(errs[keep]), 1)[0]), n


def fit_slope(dts: Sequence[float], errs: Sequence[float], floor: float = 1e-12) -> float:
    """Least-squares slope of ``log(err)`` against ``log(dt)``.

    At least three rows are required. Rows with non-finite error or error
    at or below ``floor`` are then dropped from the fit, which needs two
    distinct step sizes to remain.
    """
    return _fit(dts, errs, floor)[0]


@dataclass
class ConvergenceRow:
    dt: float
    rel_err_mean: float
    rel_err_cov: float
    stable: bool


@dataclass
class ConvergenceReport:
    label: str
    rows: list[ConvergenceRow]
    slope_mean: float | None = None
    slope_cov: float | None = None
    fit_range: tuple[float, float] | None = None
    fit_points: dict[str, int] = field(default_factory=dict)


def _reference_norm(model: LinearSdeModel, tf: float) -> float:
    if model.has_target:
        return float(np.linalg.norm(model.target_cov(tf)))
    return float(np.linalg.norm(model.diffusion(tf)))


def convergence_study(
    model: LinearSdeModel,
    scheme: StepScheme,
    dts: Sequence[float],
    tf: float,
    ref: MomentState,
    floor: float = 1e-12,
) -> ConvergenceReport:
    """Errors against ``ref`` for each ``dt``; slopes over the stable rows."""
    c_ref = _reference_norm(model, tf)
    rows = []
    for dt in sorted(dts, reverse=True):
        state, peak = _propagate(model, scheme, dt, tf)
        stable = bool(np.all(np.isfinite(state.cov))) and peak < BLOWUP * c_ref
        if stable:
            em, ec = relative_errors(state, ref)
        else:
            em = ec = math.inf
        rows.append(ConvergenceRow(float(dt), em, ec, stable))
    report = ConvergenceReport(scheme.label, rows)
    good = [r for r in rows if r.stable]
    if good:
        report.fit_range = (min(r.dt for r in good), max(r.dt for r in good))
    for attr, col in (("slope_mean", "rel_err_mean"), ("slope_cov", "rel_err_cov")):
        try:
            slope, n = _fit([r.dt for r in good], [getattr(r, col) for r in good], floor)
        except FitError:
            continue
        setattr(report, attr, slope)
        report.fit_points[col] = n
    return report


@dataclass
class StabilityResult:
    """Largest grid ``dt`` up to which every step size ran stably.

    ``bracket`` is ``(threshold, next larger grid dt)``; the upper end is
    ``None`` when the whole grid is stable. ``status`` maps each ``dt`` to
    ``"stable"``, ``"unstable"`` (covariance blow-up) or ``"infeasible"``
    (step noise covariance not PSD).
    """

    label: str
    threshold: float | None
    bracket: tuple[float | None, float | None]
    status: dict[float, str]

    @property
    def stable_through_grid(self) -> bool:
        return self.bracket[1] is None


def stability_sweep(
    model: LinearSdeModel,
    scheme: StepScheme,
    dt_grid: Sequence[float],
    tf: float,
    blowup: float = BLOWUP,
) -> StabilityResult:
    """Classify each ``dt`` by whether the propagated covariance stays below
    ``blowup * |C_ref|`` on ``[0, tf]``.
    """
    grid = sorted(float(d) for d in dt_grid)
    c_ref = _reference_norm(model, tf)
    status = {}
    for dt in grid:
        try:
            state, peak = _propagate(model, scheme, dt, tf)
        except IndefiniteCovariance:
            status[dt] = "infeasible"
            continue
        ok = bool(np.all(np.isfinite(state.cov))) and peak < blowup * c_ref
        status[dt] = "stable" if ok else "unstable"
    threshold = None
    upper = None
    for dt in grid:
        if status[dt] != "stable":
            upper = dt
            break
        threshold = dt
    return StabilityResult(scheme.label, threshold, (threshold, upper), status)
