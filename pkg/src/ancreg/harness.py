"""Reproducible end-to-end experiments: recovery trials, phase-transition
sweeps over the equation count, and noise-robustness curves.

Every trial is a pure function of (config, cell, trial index): the trial's
random stream is derived from the base seed and the cell/trial identifiers,
so serial and parallel sweeps produce identical tables. Sweep output is one
CSV row per trial with the fixed column set

    n,m,s,noise_level,trial,seed,delta_hat,status,rel_error,cert_residual,wall_ms

plus a JSON summary per cell. The wall_ms column is written as 0 by default
so that reruns of the same config are byte-identical; pass
``record_timing=true`` to store measured times instead (documented as
breaking byte-level reproducibility). Measured times always appear in the
summary's ``timing`` block.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .anchor import (
    AnchorResult,
    PowerIterationError,
    anchor_from_gradient,
    anchor_from_hessian,
    anchor_sparse_threshold,
    oracle_anchor,
)
from .core import DegenerateDataError, ProblemInstance, RngStream, one_sided_risk
from .models import ModelKind, NoiseSpec, UnsupportedModelError, sample_instance
from .solver import Regularizer, SolverConfig, certify, solve

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TrialRecord",
    "Cell",
    "run_trial",
    "run_sweep",
    "noise_curve",
    "CSV_HEADER",
]

CSV_HEADER = "n,m,s,noise_level,trial,seed,delta_hat,status,rel_error,cert_residual,wall_ms"

_ANCHOR_METHODS = ("gradient", "hessian", "oracle", "sparse_threshold")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment family."""

    model: ModelKind
    n: int
    m_list: tuple
    trials: int
    base_seed: int
    anchor_method: str = "gradient"
    oracle_zeta: float = 0.0
    sparsity: Optional[int] = None  # s; None = dense ground truth
    lam: Optional[float] = None  # l1 weight; None = unregularized
    noise: NoiseSpec = field(default_factory=NoiseSpec.none)
    noise_levels: Optional[tuple] = None  # grid for noise curves
    budget_rule: str = "noise_mean"  # noise_mean | fixed
    budget_epsilon: float = 0.0
    budget_fixed: float = 0.0
    success_threshold: float = 1e-3
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(schedule="polyak_geom"))
    certify_tol: float = 1e-3
    record_timing: bool = False

    def __post_init__(self):
        if self.n < 1 or self.trials < 1:
            raise ConfigError("n and trials must be >= 1")
        if not self.m_list:
            raise ConfigError("m_list must not be empty")
        if any(int(m) < 1 for m in self.m_list):
            raise ConfigError("every m in m_list must be >= 1")
        object.__setattr__(self, "m_list", tuple(int(m) for m in self.m_list))
        if self.anchor_method not in _ANCHOR_METHODS:
            raise ConfigError(f"anchor_method must be one of {_ANCHOR_METHODS}")
        if self.sparsity is not None and not 1 <= self.sparsity <= self.n:
            raise ConfigError("sparsity must lie in [1, n]")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if not 0.0 < self.success_threshold < 1.0:
            raise ConfigError("success_threshold must lie in (0, 1)")
        if self.budget_rule not in ("noise_mean", "fixed"):
            raise ConfigError("budget_rule must be 'noise_mean' or 'fixed'")
        if self.noise_levels is not None:
            object.__setattr__(
                self, "noise_levels", tuple(float(v) for v in self.noise_levels)
            )

    # -- serialization ------------------------------------------------------
    def to_json_dict(self) -> dict:
        doc = {
            "model": self.model.to_json_dict(),
            "n": self.n,
            "m_list": list(self.m_list),
            "trials": self.trials,
            "base_seed": self.base_seed,
            "anchor_method": self.anchor_method,
            "oracle_zeta": self.oracle_zeta,
            "sparsity": self.sparsity,
            "lam": self.lam,
            "noise": self.noise.to_json_dict(),
            "noise_levels": None if self.noise_levels is None else list(self.noise_levels),
            "budget_rule": self.budget_rule,
            "budget_epsilon": self.budget_epsilon,
            "budget_fixed": self.budget_fixed,
            "success_threshold": self.success_threshold,
            "solver": {
                "schedule": self.solver.schedule,
                "max_inner_iters": self.solver.max_inner_iters,
                "feasibility_tol": self.solver.feasibility_tol,
                "geom_halve_every": self.solver.geom_halve_every,
                "stall_window": self.solver.stall_window,
                "polyak_relax": self.solver.polyak_relax,
            },
            "certify_tol": self.certify_tol,
            "record_timing": self.record_timing,
        }
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "ExperimentConfig":
        try:
            solver_doc = doc.get("solver") or {}
            solver_cfg = SolverConfig(
                schedule=solver_doc.get("schedule", "polyak_geom"),
                max_inner_iters=int(solver_doc.get("max_inner_iters", 20000)),
                feasibility_tol=float(solver_doc.get("feasibility_tol", 1e-6)),
                geom_halve_every=int(solver_doc.get("geom_halve_every", 20)),
                stall_window=int(solver_doc.get("stall_window", 50)),
                polyak_relax=float(solver_doc.get("polyak_relax", 1.5)),
            )
            return ExperimentConfig(
                model=ModelKind.from_json_dict(doc["model"]),
                n=int(doc["n"]),
                m_list=tuple(doc["m_list"]),
                trials=int(doc["trials"]),
                base_seed=int(doc["base_seed"]),
                anchor_method=doc.get("anchor_method", "gradient"),
                oracle_zeta=float(doc.get("oracle_zeta", 0.0)),
                sparsity=doc.get("sparsity"),
                lam=doc.get("lam"),
                noise=NoiseSpec.from_json_dict(doc.get("noise") or {"kind": "none"}),
                noise_levels=tuple(doc["noise_levels"]) if doc.get("noise_levels") else None,
                budget_rule=doc.get("budget_rule", "noise_mean"),
                budget_epsilon=float(doc.get("budget_epsilon", 0.0)),
                budget_fixed=float(doc.get("budget_fixed", 0.0)),
                success_threshold=float(doc.get("success_threshold", 1e-3)),
                solver=solver_cfg,
                certify_tol=float(doc.get("certify_tol", 1e-3)),
                record_timing=bool(doc.get("record_timing", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @staticmethod
    def load(path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return ExperimentConfig.from_json_dict(doc)


@dataclass(frozen=True)
class Cell:
    """One sweep cell: equation count and noise level."""

    m: int
    noise_level: float


@dataclass(frozen=True)
class TrialRecord:
    """One trial outcome; reproducible from (config, cell, trial index)."""

    n: int
    m: int
    s: int
    noise_level: float
    trial: int
    seed: int
    delta_hat: float
    status: str
    rel_error: float
    cert_residual: float
    wall_ms: float
    mean_abs_noise: float = 0.0  # realized (1/M) sum |xi_m|, not in the CSV
    budget_gap: float = 0.0  # realized |c - R+_M(x*)|, not in the CSV

    def csv_row(self, record_timing: bool) -> str:
        wall = self.wall_ms if record_timing else 0.0
        cells = [
            str(self.n),
            str(self.m),
            str(self.s),
            _fmt(self.noise_level),
            str(self.trial),
            str(self.seed),
            _fmt(self.delta_hat),
            self.status,
            _fmt(self.rel_error),
            _fmt(self.cert_residual),
            _fmt(wall),
        ]
        return ",".join(cells)


def _fmt(v: float) -> str:
    """Deterministic float formatting (shortest round-trip repr)."""
    if v != v:
        return "nan"
    if v in (math.inf, -math.inf):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _sample_ground_truth(config: ExperimentConfig, stream: RngStream) -> np.ndarray:
    gen = stream.generator()
    if config.sparsity is None:
        x = gen.standard_normal(config.n)
        return x / np.linalg.norm(x)
    idx = gen.choice(config.n, size=config.sparsity, replace=False)
    signs = gen.choice([-1.0, 1.0], size=config.sparsity)
    x = np.zeros(config.n)
    x[idx] = signs / math.sqrt(config.sparsity)
    return x


def _build_anchor(config, instance, x_star, stream) -> AnchorResult:
    method = config.anchor_method
    if method == "gradient":
        return anchor_from_gradient(instance)
    if method == "hessian":
        return anchor_from_hessian(instance)
    if method == "sparse_threshold":
        k = config.sparsity if config.sparsity is not None else config.n
        return anchor_sparse_threshold(instance, k)
    return oracle_anchor(x_star, config.oracle_zeta, stream)


def _budget(config: ExperimentConfig, noise: NoiseSpec) -> float:
    if config.budget_rule == "fixed":
        return config.budget_fixed
    return noise.mean_neg_part + config.budget_epsilon


def run_trial(config: ExperimentConfig, cell: Cell, trial_index: int) -> TrialRecord:
    """Sample, anchor, solve, certify, and score one trial."""
    t0 = time.perf_counter()
    noise = NoiseSpec(config.noise.kind, cell.noise_level)
    stream = RngStream(config.base_seed).derive(
        "trial", cell.m, repr(float(cell.noise_level)), trial_index
    )
    x_star = _sample_ground_truth(config, stream.derive("xstar"))
    instance = sample_instance(
        config.model, x_star, cell.m, noise, stream.derive("data")
    )
    reg = Regularizer.l1(config.lam) if config.lam else Regularizer.none()
    budget = _budget(config, noise)
    delta_hat = math.nan
    status = "ok"
    rel_error = math.nan
    cert_residual = math.nan
    mean_abs_noise = float(np.mean(np.abs(instance.noise)))
    try:
        anchor_result = _build_anchor(config, instance, x_star, stream.derive("anchor"))
        delta_hat = anchor_result.delta_hat if anchor_result.delta_hat is not None else math.nan
        solver_cfg = replace(config.solver, budget=budget)
        result = solve(instance, anchor_result.a0, reg, solver_cfg)
        status = result.status
        diff = result.x_hat - x_star
        err = float(np.linalg.norm(diff))
        if config.model.kind == "square":
            err = min(err, float(np.linalg.norm(result.x_hat + x_star)))
        rel_error = err / float(np.linalg.norm(x_star))
        # the cone certificate is a noiseless-program notion (per-equation
        # active sets); noisy trials leave the column as nan
        if result.converged and (noise.kind == "none" or noise.level == 0.0):
            try:
                cert = certify(
                    instance, result.x_hat, anchor_result.a0, reg, tol=config.certify_tol
                )
                cert_residual = cert.residual
            except ValueError:
                cert_residual = math.nan
    except (DegenerateDataError, UnsupportedModelError):
        status = "anchor_degenerate"
    except PowerIterationError:
        status = "anchor_not_converged"
    budget_gap = abs(budget - one_sided_risk(x_star, instance))
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return TrialRecord(
        n=config.n,
        m=cell.m,
        s=config.sparsity or 0,
        noise_level=cell.noise_level,
        trial=trial_index,
        seed=stream.stream_index,
        delta_hat=delta_hat,
        status=status,
        rel_error=rel_error,
        cert_residual=cert_residual,
        wall_ms=wall_ms,
        mean_abs_noise=mean_abs_noise,
        budget_gap=budget_gap,
    )


def _trial_task(args):
    config, cell, trial_index = args
    return run_trial(config, cell, trial_index)


def _run_cells(config: ExperimentConfig, cells, threads: int):
    tasks = [(config, cell, t) for cell in cells for t in range(config.trials)]
    if threads == 0:
        threads = os.cpu_count() or 1
    if threads == 1 or len(tasks) == 1:
        records = [_trial_task(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_trial_task, tasks, chunksize=1))
    # group records per cell in task order (already deterministic)
    per_cell = {cell: [] for cell in cells}
    for record, task in zip(records, tasks):
        per_cell[task[1]].append(record)
    return per_cell


def _cell_summary(config: ExperimentConfig, records) -> dict:
    errors = np.array([r.rel_error for r in records])
    finite = errors[np.isfinite(errors)]
    successes = np.sum(finite <= config.success_threshold)
    residuals = np.array([r.cert_residual for r in records])
    residuals = residuals[np.isfinite(residuals)]
    return {
        "trials": len(records),
        "success_rate": float(successes / len(records)),
        "median_rel_error": float(np.median(finite)) if finite.size else None,
        "max_rel_error": float(np.max(finite)) if finite.size else None,
        "median_cert_residual": float(np.median(residuals)) if residuals.size else None,
        "n_converged": int(sum(1 for r in records if r.status == "converged")),
        "statuses": _status_counts(records),
    }


def _status_counts(records) -> dict:
    counts: dict = {}
    for r in records:
        counts[r.status] = counts.get(r.status, 0) + 1
    return dict(sorted(counts.items()))


@dataclass(frozen=True)
class SweepResult:
    records: list
    summary: dict
    csv_text: str

    @property
    def systematic_failure(self) -> bool:
        """True when some cell produced no converged trial at all."""
        return any(c["n_converged"] == 0 for c in self.summary["cells"].values())


def run_sweep(
    config: ExperimentConfig, threads: int = 1, out_dir: Optional[str] = None
) -> SweepResult:
    """Run trials for every (m, noise level) cell and assemble the tables."""
    t0 = time.perf_counter()
    levels = config.noise_levels if config.noise_levels is not None else (config.noise.level,)
    cells = [Cell(m, level) for m in config.m_list for level in levels]
    per_cell = _run_cells(config, cells, threads)
    lines = [CSV_HEADER]
    records = []
    for cell in cells:
        for record in per_cell[cell]:
            records.append(record)
            lines.append(record.csv_row(config.record_timing))
    csv_text = "\n".join(lines) + "\n"
    summary = {
        "config": config.to_json_dict(),
        "cells": {
            f"m={cell.m},noise={_fmt(cell.noise_level)}": _cell_summary(config, per_cell[cell])
            for cell in cells
        },
        "timing": {"total_seconds": time.perf_counter() - t0},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(csv_text)
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
    return SweepResult(records=records, summary=summary, csv_text=csv_text)


def noise_curve(
    config: ExperimentConfig,
    threads: int = 1,
    out_dir: Optional[str] = None,
    error_coefficient: Optional[float] = None,
) -> dict:
    """Median recovery error against the mean absolute noise level.

    For each level the table reports the realized mean |noise|, the realized
    budget slack |c - R+_M(x*)| (the effective epsilon of the program), the
    median relative error, and the bound error_coefficient * (mean |noise| +
    slack + feasibility tol). The coefficient defaults to the one measured by
    the complexity estimators for the configured model; pass one explicitly
    to use calculator output. A least-squares fit checks that the error grows
    at most linearly: the quadratic term's contribution at the largest level
    must stay below half of the linear term's.
    """
    if config.noise_levels is None or len(config.noise_levels) < 2:
        raise ConfigError("noise_curve needs a noise_levels grid with >= 2 levels")
    if config.noise.kind == "none":
        raise ConfigError("noise_curve needs a noise kind ('uniform' or 'gaussian')")
    m = config.m_list[0]
    cells = [Cell(m, level) for level in config.noise_levels]
    per_cell = _run_cells(config, cells, threads)

    if error_coefficient is None:
        error_coefficient = _measured_error_coefficient(config, per_cell[cells[0]])

    rows = []
    for cell in cells:
        records = per_cell[cell]
        noise = NoiseSpec(config.noise.kind, cell.noise_level)
        errors = np.array([r.rel_error for r in records])
        finite = errors[np.isfinite(errors)]
        med_err = float(np.median(finite)) if finite.size else math.nan
        mean_abs = float(np.median([r.mean_abs_noise for r in records]))
        slack = float(np.median([r.budget_gap for r in records]))
        bound = error_coefficient * (mean_abs + slack + config.solver.feasibility_tol)
        rows.append(
            {
                "noise_level": cell.noise_level,
                "mean_abs_noise": mean_abs,
                "mean_abs_noise_closed_form": noise.mean_abs,
                "epsilon_realized": slack,
                "median_rel_error": med_err,
                "bound": bound,
                "within_bound": bool(med_err <= bound) if med_err == med_err else False,
            }
        )

    xs = np.array([row["mean_abs_noise"] for row in rows])
    ys = np.array([row["median_rel_error"] for row in rows])
    fit = np.polyfit(xs, ys, 2) if np.all(np.isfinite(ys)) and len(xs) >= 3 else [math.nan] * 3
    quad, slope, intercept = fit[0], fit[1], fit[2]
    x_max = float(xs.max())
    linear_rise = abs(slope) * x_max
    quad_rise = abs(quad) * x_max**2
    table = {
        "m": m,
        "error_coefficient": error_coefficient,
        "rows": rows,
        "fit": {
            "intercept": float(intercept),
            "slope": float(slope),
            "quadratic": float(quad),
            "quadratic_fraction": float(quad_rise / linear_rise) if linear_rise > 0 else math.nan,
            "at_most_linear": bool(quad_rise <= 0.5 * linear_rise + 1e-12),
        },
        "all_within_bound": all(row["within_bound"] for row in rows),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "noise_curve.json", "w") as fh:
            json.dump(table, fh, indent=2)
        lines = [CSV_HEADER]
        for cell in cells:
            for record in per_cell[cell]:
                lines.append(record.csv_row(config.record_timing))
        (out / "noise_trials.csv").write_text("\n".join(lines) + "\n")
    return table


def _measured_error_coefficient(config: ExperimentConfig, sample_records) -> float:
    """2 / (tau * p_tau) with tau from the closed form at the anchor quality
    actually measured, and p_tau a sampled lower bound (min - 3 stderr)."""
    from .analysis import AscentConeSpec, p_tau_estimate, tau_cone_lower

    deltas = np.array([r.delta_hat for r in sample_records])
    deltas = deltas[np.isfinite(deltas)]
    delta = float(np.median(np.abs(deltas))) if deltas.size else 0.5
    delta = min(max(delta, 0.05), 1.0)
    stream = RngStream(config.base_seed).derive("coeff")
    x_ref = _sample_ground_truth(config, stream.derive("xref"))
    spec = AscentConeSpec(delta, x_ref, lam=config.lam)
    tau = tau_cone_lower(config.model, x_ref, spec, probes=32, stream=stream).value
    if tau <= 0:
        raise ConfigError(
            f"closed-form cone alignment is nonpositive at delta={delta:.3f}; "
            "the error bound is vacuous for this configuration"
        )
    pt = p_tau_estimate(
        config.model, x_ref, spec, tau, probes=32, samples=100_000, stream=stream
    )
    p_lower = max(pt.value - 3.0 * pt.stderr, 1e-6)
    return 2.0 / (tau * p_lower)
