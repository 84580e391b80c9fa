"""Command-line harness: convergence tables, stability brackets, balance
residuals and trajectory dumps for the three benchmark models.

All outputs are CSV or JSON written to ``--out``. Exit codes are 0 on
success, 2 for configuration errors and 3 when a step's noise covariance
is not positive semidefinite (or another numerical failure occurs).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .harness import (
    BLOWUP,
    EnsembleConfig,
    OracleError,
    convergence_study,
    moment_oracle,
    run_ensemble,
    stability_sweep,
    step_count,
)
from .integrators import LinearSdeModel, SchemeKind, StepScheme, build_step, em_fd_q
from .integrators import _check_compatible
from .linalg import IndefiniteCovariance, default_tol, mT
from .magnus import OperatorPath
from .models import (
    LangevinRotatingParams,
    LtvOscillatorParams,
    ShearSpdeParams,
    em_stability_tau_langevin,
    em_stability_tau_ltv,
    em_stability_tau_spde,
    langevin_rotating,
    ltv_oscillator,
    modes_to_grid,
    shear_spde,
    synthetic_forcing,
)

logger = logging.getLogger("efdd")

MODELS = ("ltv", "langevin", "spde")
COMMANDS = ("converge", "stability", "fdbalance", "simulate")
DEFAULT_SCHEMES = ("em", "magnus1", "magnus2")
FDBALANCE_SCHEMES = ("em", "emfd", "exp", "expc", "magnus1", "magnus2")
MAX_DUMP_TRAJ = 100


class ConfigError(ValueError):
    """Invalid command-line or file configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class ExperimentConfig:
    command: str
    model: str
    params: dict
    schemes: list[str] | None
    dts: list[float] | None
    tf: float | None
    seed: int
    n_traj: int | None
    out: Path
    extra: dict

    @property
    def model_tf(self) -> float:
        return float(self.tf if self.tf is not None else _param_class(self.model)().tf)


def _param_class(model_id):
    return {"ltv": LtvOscillatorParams, "langevin": LangevinRotatingParams, "spde": ShearSpdeParams}[model_id]


def _parse_list(text, conv, what):
    if text is None:
        return None
    try:
        items = [conv(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError:
        raise ConfigError(f"cannot parse {what} list {text!r}") from None
    if not items:
        raise ConfigError(f"empty {what} list")
    return items


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge the optional JSON file with command-line flags (flags win)."""
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    model = args.model or data.get("model")
    if model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {model!r}")
    params = data.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("'params' must be an object")

    schemes = _parse_list(args.schemes, str, "scheme")
    if schemes is None and "schemes" in data:
        schemes = [str(s) for s in data["schemes"]]
    dts = _parse_list(args.dt, float, "dt")
    if dts is None and "dt" in data:
        dts = [float(d) for d in data["dt"]]
    if dts is not None and any(not (d > 0 and math.isfinite(d)) for d in dts):
        raise ConfigError("dt values must be positive and finite")

    seed = args.seed if args.seed is not None else data.get("seed", 0)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {seed!r}") from None
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")

    n_traj = args.n_traj if args.n_traj is not None else data.get("n_traj")
    if n_traj is not None and int(n_traj) < 1:
        raise ConfigError("n_traj must be at least 1")

    tf = data.get("tf", params.get("tf"))
    if tf is not None:
        tf = float(tf)
        if not tf > 0:
            raise ConfigError("tf must be positive")

    reserved = {"model", "params", "schemes", "dt", "seed", "n_traj", "tf"}
    extra = {k: v for k, v in data.items() if k not in reserved}
    return ExperimentConfig(
        command=args.command,
        model=model,
        params=dict(params),
        schemes=schemes,
        dts=dts,
        tf=tf,
        seed=seed,
        n_traj=None if n_traj is None else int(n_traj),
        out=Path(args.out),
        extra=extra,
    )


def build_model(model_id: str, params: dict, tf: float | None = None, forcing: bool = False) -> LinearSdeModel:
    """Model factory from a flat parameter dictionary.

    The SPDE accepts ``forcing_amplitude`` and ``forcing_omega`` for the
    synthetic mode forcing; ``forcing=True`` switches it on with
    amplitude 1 when no amplitude is given.
    """
    params = dict(params)
    if tf is not None:
        params["tf"] = tf
    try:
        if model_id == "ltv":
            if "z0" in params:
                params["z0"] = tuple(float(x) for x in params["z0"])
            return ltv_oscillator(LtvOscillatorParams(**params))
        if model_id == "langevin":
            if "z0_lab" in params:
                params["z0_lab"] = tuple(float(x) for x in params["z0_lab"])
            return langevin_rotating(LangevinRotatingParams(**params))
        amp = params.pop("forcing_amplitude", 1.0 if forcing else None)
        fomega = params.pop("forcing_omega", 1.0)
        if amp is not None and float(amp) != 0.0:
            params["f_hat"] = synthetic_forcing(float(amp), float(fomega))
        return shear_spde(ShearSpdeParams(**params))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {model_id} parameters: {exc}") from None


def _scheme(label: str, model_id: str, model: LinearSdeModel) -> StepScheme:
    kw = {}
    if model_id == "spde" and label.strip().lower().startswith(("magnus", "exp")):
        kw["forcing_mode"] = "midpoint"
    try:
        scheme = StepScheme.parse(label, **kw)
        _check_compatible(model, scheme)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return scheme


def _check_grid(dts, tf):
    for dt in dts:
        try:
            step_count(0.0, tf, dt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# output helpers


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------------------
# commands


def cmd_converge(cfg: ExperimentConfig) -> dict:
    tf = cfg.model_tf
    model = build_model(cfg.model, cfg.params, tf, forcing=cfg.model == "spde")
    dts = cfg.dts or [tf / 2**j for j in range(7, 14)]
    _check_grid(dts, tf)
    schemes = [_scheme(s, cfg.model, model) for s in (cfg.schemes or DEFAULT_SCHEMES)]
    ref = moment_oracle(model, tf)
    summary = {"model": cfg.model, "tf": tf, "schemes": {}}
    for scheme in schemes:
        rep = convergence_study(model, scheme, dts, tf, ref)
        write_csv(
            cfg.out / f"converge_{scheme.label}.csv",
            ["dt", "rel_err_mean", "rel_err_cov", "stable"],
            [(r.dt, r.rel_err_mean, r.rel_err_cov, r.stable) for r in rep.rows],
        )
        summary["schemes"][scheme.label] = {
            "slope_mean": rep.slope_mean,
            "slope_cov": rep.slope_cov,
            "fit_range": list(rep.fit_range) if rep.fit_range else None,
            "fit_points": rep.fit_points,
        }
    write_json(cfg.out / "converge_summary.json", summary)
    return summary


def em_tau(model_id: str, params: dict) -> float:
    p = {k: v for k, v in params.items() if k not in ("forcing_amplitude", "forcing_omega")}
    if "z0" in p:
        p["z0"] = tuple(p["z0"])
    if "z0_lab" in p:
        p["z0_lab"] = tuple(p["z0_lab"])
    fn = {"ltv": em_stability_tau_ltv, "langevin": em_stability_tau_langevin, "spde": em_stability_tau_spde}
    try:
        return fn[model_id](_param_class(model_id)(**p))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {model_id} parameters: {exc}") from None


def cmd_stability(cfg: ExperimentConfig) -> dict:
    tf = cfg.model_tf
    model = build_model(cfg.model, cfg.params, tf)
    grid = sorted(cfg.dts or [tf / 2**j for j in range(0, 11)], reverse=True)
    horizon = float(cfg.extra.get("horizon", 10.0 * tf))
    _check_grid(grid, horizon)
    schemes = [_scheme(s, cfg.model, model) for s in (cfg.schemes or DEFAULT_SCHEMES)]
    report = {
        "model": cfg.model,
        "tf": tf,
        "horizon": horizon,
        "blowup": BLOWUP,
        "em_tau": em_tau(cfg.model, cfg.params),
        "grid": grid,
        "schemes": {},
    }
    for scheme in schemes:
        res = stability_sweep(model, scheme, grid, horizon)
        report["schemes"][scheme.label] = {
            "threshold": res.threshold,
            "bracket": list(res.bracket),
            "status": "stable-through-grid" if res.stable_through_grid else "bracketed",
            "per_dt": {fmt(dt): s for dt, s in sorted(res.status.items(), reverse=True)},
        }
    write_json(cfg.out / "stability.json", report)
    return report


def frozen_model(model_id: str, params: dict) -> LinearSdeModel:
    """Stationary version of a model: the LTV operator frozen at ``t = 0``,
    the Langevin system in the lab frame, the SPDE modes without shear.
    """
    p = dict(params)
    if model_id == "langevin":
        p["rotating"] = False
        return build_model(model_id, p)
    base = build_model(model_id, p)
    L0 = np.array(base.L(0.0))
    return LinearSdeModel(
        L=OperatorPath(base.dim, lambda t: L0, batch_shape=base.batch_shape),
        C=base.target_cov(0.0),
        stationary_L=True,
        commuting_L=True,
        z0=base.z0,
        name=f"{base.name}-frozen",
        noise_sampler=base.noise_sampler,
    )


def _rel_fro(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _stationary_cov(S, sigma):
    """Fixed point of ``X = S X S^T + sigma`` per batch element, or ``None``
    when some ``S`` has spectral radius >= 1.
    """
    S2 = S.reshape((-1,) + S.shape[-2:])
    sig2 = np.broadcast_to(sigma, S.shape).reshape(S2.shape)
    out = np.empty_like(sig2)
    for i in range(S2.shape[0]):
        if np.max(np.abs(np.linalg.eigvals(S2[i]))) >= 1.0:
            # the conserved k = 0 SPDE mode has S = 1 and no noise
            if np.allclose(S2[i], np.eye(S2.shape[-1])) and not np.any(sig2[i]):
                out[i] = np.nan
                continue
            return None
        out[i] = solve_discrete_lyapunov(S2[i], sig2[i])
    return out.reshape(S.shape)


def balance_entry(model: LinearSdeModel, scheme: StepScheme, dt: float) -> dict:
    """One-step and stationary balance residuals of ``scheme`` at ``dt``."""
    C = model.target_cov(0.0)
    if scheme.kind is SchemeKind.EULER_MARUYAMA_FD:
        L = model.L(0.0)
        S = np.eye(model.dim) + dt * L
        sigma = dt * em_fd_q(L, C, dt, check=False)
        feasible = bool(np.linalg.eigvalsh(sigma).min() >= -default_tol(sigma))
    else:
        try:
            step = build_step(model, scheme, 0.0, dt)
        except IndefiniteCovariance as exc:
            return {"dt": dt, "feasible": False, "residual": None, "stationary_residual": None,
                    "min_eigenvalue": exc.min_eigenvalue}
        S, sigma, feasible = np.asarray(step.S), step.noise.cov, True
    S = np.broadcast_to(S, model.mat_shape)
    residual = _rel_fro(S @ C @ mT(S) + sigma, C)
    stat = _stationary_cov(S, sigma)
    if stat is not None:
        mask = np.isfinite(stat)
        stat = float(np.linalg.norm(np.where(mask, stat - C, 0.0)) / np.linalg.norm(C))
    return {"dt": dt, "feasible": feasible, "residual": residual, "stationary_residual": stat}


def cmd_fdbalance(cfg: ExperimentConfig) -> dict:
    model = frozen_model(cfg.model, cfg.params)
    lam = float(np.max(np.abs(np.linalg.eigvals(model.L(0.0)))))
    dts = cfg.dts or [0.01, 1.0, 100.0 / lam]
    schemes = [_scheme(s, cfg.model, model) for s in (cfg.schemes or FDBALANCE_SCHEMES)]
    report = {"model": cfg.model, "frozen": model.name, "lambda_max": lam, "schemes": {}}
    for scheme in schemes:
        report["schemes"][scheme.label] = [balance_entry(model, scheme, dt) for dt in dts]
    write_json(cfg.out / "fdbalance.json", report)
    return report


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    tf = cfg.model_tf
    model = build_model(cfg.model, cfg.params, tf)
    n_traj = cfg.n_traj or 4
    if n_traj > MAX_DUMP_TRAJ:
        raise ConfigError(f"simulate dumps at most {MAX_DUMP_TRAJ} trajectories")
    dts = cfg.dts or [tf / 2**8]
    if len(dts) != 1:
        raise ConfigError("simulate takes a single dt")
    dt = dts[0]
    _check_grid(dts, tf)
    labels = cfg.schemes or ["magnus2"]
    if len(labels) != 1:
        raise ConfigError("simulate takes a single scheme")
    scheme = _scheme(labels[0], cfg.model, model)
    scale = float(cfg.extra.get("noise_scale", 1.0))
    if scale < 0:
        raise ConfigError("noise_scale must be non-negative")
    if scale != 1.0:
        base = model

        def scaled(rng, shape):
            return scale * base.draw_noise(rng, shape)

        model = dataclasses.replace(model, noise_sampler=scaled)

    res = run_ensemble(model, EnsembleConfig(n_traj, cfg.seed, dt, tf, scheme), keep_paths=True)
    paths = res.final
    n = paths.shape[0] - 1
    times = np.arange(n + 1) * (tf / n)
    files = []
    if cfg.model == "spde":
        snaps = [float(t) for t in cfg.extra.get("snapshot_times", [0.0, tf / 2, tf])]
        idx = []
        for t in snaps:
            k = t / (tf / n)
            if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)) or not 0 <= round(k) <= n:
                raise ConfigError(f"snapshot time {t} is not on the step grid")
            idx.append(int(round(k)))
        for i in range(n_traj):
            for j, k in enumerate(idx):
                grid = modes_to_grid(paths[k, i, ..., 0])
                name = f"field_traj{i:03d}_snap{j:02d}.csv"
                with (cfg.out / name).open("w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    for row in grid:
                        w.writerow([fmt(v) for v in row])
                files.append(name)
        meta_times = [times[k] for k in idx]
    else:
        header = ["t"] + [f"z{j + 1}" for j in range(model.dim)]
        for i in range(n_traj):
            name = f"traj_{i:03d}.csv"
            z = np.real(paths[:, i, :])
            write_csv(cfg.out / name, header, ([t, *row] for t, row in zip(times, z)))
            files.append(name)
        meta_times = None
    meta = {
        "model": cfg.model,
        "scheme": scheme.label,
        "dt": dt,
        "tf": tf,
        "seed": cfg.seed,
        "n_traj": n_traj,
        "diverged": res.diverged,
        "noise_scale": scale,
        "snapshot_times": meta_times,
        "files": files,
    }
    write_json(cfg.out / "simulate.json", meta)
    return meta


HANDLERS = {
    "converge": cmd_converge,
    "stability": cmd_stability,
    "fdbalance": cmd_fdbalance,
    "simulate": cmd_simulate,
}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="efdd", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--model", choices=MODELS)
    ap.add_argument("--config", help="JSON file with a flat 'params' object and optional run settings")
    ap.add_argument("--out", default=".", help="output directory (created if missing)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--dt", help="comma-separated step sizes")
    ap.add_argument("--schemes", help="comma-separated schemes: em, emfd, exp, expc, magnus1, magnus2")
    ap.add_argument("--n-traj", type=int, dest="n_traj")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"efdd: config error: {exc}", file=sys.stderr)
        return 2
    except IndefiniteCovariance as exc:
        print(f"efdd: infeasible noise covariance: {exc}", file=sys.stderr)
        return 3
    except (OracleError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"efdd: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
