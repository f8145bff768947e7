"""Anchored-regression solver and KKT cone certificate.

The estimator maximizes <a0, x> - Omega(x) subject to the one-sided risk
budget R+_M(x) <= c. Projection onto that feasible set has no closed form,
so the solver minimizes the exact-penalty objective

    F_rho(x) = -<a0, x> + Omega(x) + rho (R+_M(x) - c)_+

by proximal subgradient steps, escalating rho geometrically whenever an inner
loop settles at an infeasible point. Exact penalties are finitely exact for
convex programs once rho exceeds the optimal multiplier norm, so the
escalation terminates on well-posed instances.

Step schedules:

* ``sqrt``         eta_k = eta0 / sqrt(k), the robust nonsmooth default;
* ``polyak``       alternating scheme usable when the budget c is exact: a
                   Polyak-length feasibility step (R+ - c)/||g||^2 whenever the
                   iterate is infeasible, otherwise an objective step with
                   eta0 / sqrt(j);
* ``polyak_geom``  same alternation with geometrically decaying objective
                   steps, which converges linearly on sharp instances (the
                   noiseless case, where the solution is a corner of the
                   feasible set).

The returned iterate is the best feasible one under the true objective, or
the least infeasible one when feasibility was never reached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ProblemInstance, as_vector, one_sided_risk, one_sided_risk_subgradient

__all__ = [
    "Regularizer",
    "SolverConfig",
    "SolveResult",
    "CertificateResult",
    "prox",
    "solve",
    "certify",
]


@dataclass(frozen=True)
class Regularizer:
    """Convex regularizer: none, or lam * ||x||_1."""

    kind: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "l1"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")

    @staticmethod
    def none() -> "Regularizer":
        return Regularizer("none", 0.0)

    @staticmethod
    def l1(lam: float) -> "Regularizer":
        return Regularizer("l1", float(lam))

    @staticmethod
    def parse(text: str) -> "Regularizer":
        """Parse 'none' or 'l1:<lam>'."""
        if text in ("none", ""):
            return Regularizer.none()
        kind, _, lam = text.partition(":")
        if kind != "l1" or not lam:
            raise ValueError(f"cannot parse regularizer {text!r}; expected 'none' or 'l1:0.1'")
        return Regularizer.l1(float(lam))

    def value(self, x: np.ndarray) -> float:
        if self.kind == "none" or self.lam == 0.0:
            return 0.0
        return self.lam * float(np.sum(np.abs(x)))

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "lam": self.lam}

    @staticmethod
    def from_json_dict(doc: dict) -> "Regularizer":
        return Regularizer(doc["kind"], float(doc.get("lam", 0.0)))


def prox(reg: Regularizer, v: np.ndarray, t: float) -> np.ndarray:
    """Proximal map of t * Omega: identity for none, soft threshold for l1."""
    if t < 0:
        raise ValueError("prox step must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    if reg.kind == "none" or t == 0.0 or reg.lam == 0.0:
        return v.copy()
    shift = t * reg.lam
    return np.sign(v) * np.maximum(np.abs(v) - shift, 0.0)


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs. ``budget`` is the risk level c of the constraint."""

    budget: float = 0.0
    rho0: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    eta0: Optional[float] = None  # None: 1 / (1 + mean ||grad f_m(x0)||)
    schedule: str = "sqrt"  # sqrt | polyak | polyak_geom
    max_inner_iters: int = 100_000
    feasibility_tol: float = 1e-6
    norm_cap_factor: float = 10.0
    stall_window: int = 50
    stall_rel_tol: float = 1e-9
    geom_halve_every: int = 20
    polyak_relax: float = 1.5  # feasibility-step relaxation, must stay in (0, 2)
    init_grid: tuple = (1e-3, 1e3, 121)
    track_trace: bool = False

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if min(self.rho0, self.rho_growth, self.rho_max) <= 0:
            raise ValueError("penalty parameters must be positive")
        if self.rho_growth <= 1:
            raise ValueError("penalty growth factor must exceed 1")
        if self.feasibility_tol <= 0:
            raise ValueError("feasibility tolerance must be positive")
        if self.schedule not in ("sqrt", "polyak", "polyak_geom"):
            raise ValueError(f"unknown step schedule {self.schedule!r}")
        if not 0.0 < self.polyak_relax < 2.0:
            raise ValueError("polyak_relax must lie in (0, 2) to keep the steps contractive")
        if self.max_inner_iters < 1 or self.stall_window < 1:
            raise ValueError("iteration limits must be positive")


@dataclass(frozen=True)
class SolveResult:
    """Solver outcome; ``feasibility_gap`` is (R+_M(x_hat) - c)_+ recomputed
    from the returned iterate."""

    x_hat: np.ndarray
    status: str  # converged | penalty_exhausted | norm_cap_hit
    objective: float  # -<a0, x_hat> + Omega(x_hat)
    feasibility_gap: float
    penalty: float
    iterations: int
    trace: Optional[dict] = field(default=None, compare=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_json_dict(self, include_trace: bool = False) -> dict:
        doc = {
            "x_hat": self.x_hat.tolist(),
            "status": self.status,
            "objective": self.objective,
            "feasibility_gap": self.feasibility_gap,
            "penalty": self.penalty,
            "iterations": self.iterations,
        }
        if include_trace and self.trace is not None:
            doc["trace"] = {k: list(map(float, v)) for k, v in self.trace.items()}
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "SolveResult":
        return SolveResult(
            x_hat=np.asarray(doc["x_hat"], dtype=np.float64),
            status=doc["status"],
            objective=float(doc["objective"]),
            feasibility_gap=float(doc["feasibility_gap"]),
            penalty=float(doc["penalty"]),
            iterations=int(doc["iterations"]),
            trace=doc.get("trace"),
        )

    def save(self, path, include_trace: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(include_trace), fh)


def _golden_section(fun, lo: float, hi: float, rel_tol: float = 1e-9, max_iter: int = 120):
    """Minimize a unimodal function on [lo, hi]; returns the midpoint."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= rel_tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def _initial_point(instance: ProblemInstance, a0: np.ndarray, config: SolverConfig) -> np.ndarray:
    """x0 = beta a0 with beta minimizing the risk along the anchor ray.

    The ray risk beta -> R+_M(beta a0) is convex; a logarithmic grid brackets
    its minimizer and golden-section refines the bracket.
    """
    ray = instance.model.ray_values(instance.data, a0)
    y = instance.y

    def risk_at(beta: float) -> float:
        return float(np.mean(np.maximum(ray(beta) - y, 0.0)))

    lo, hi, points = config.init_grid
    grid = np.geomspace(lo, hi, int(points))
    vals = np.array([risk_at(b) for b in grid])
    vmin = float(vals.min())
    # on a flat minimum (zero risk along a feasible segment) prefer the
    # largest beta: it starts nearest the constraint boundary and keeps the
    # norm cap meaningful
    near = np.flatnonzero(vals <= vmin + 1e-12 * (1.0 + abs(vmin)))
    i = int(near[-1])
    lo_b = grid[max(i - 1, 0)]
    hi_b = grid[min(i + 1, len(grid) - 1)]
    beta = _golden_section(risk_at, lo_b, hi_b)
    return beta * a0


class _BestTracker:
    """Best feasible iterate under the true objective, else least infeasible."""

    def __init__(self, feas_tol: float, rel_tol: float):
        self.feas_tol = feas_tol
        self.rel_tol = rel_tol
        self.best_obj = math.inf
        self.best_x = None
        self.best_norm = 0.0
        self.least_gap = math.inf
        self.least_x = None

    def update(self, x: np.ndarray, gap: float, true_obj: float) -> bool:
        """Record iterate; returns True on a material feasible improvement."""
        if gap <= self.feas_tol:
            if true_obj < self.best_obj - self.rel_tol * max(1.0, abs(self.best_obj)):
                self.best_obj = true_obj
                self.best_x = x.copy()
                self.best_norm = float(np.linalg.norm(x))
                return True
            if true_obj < self.best_obj:
                self.best_obj = true_obj
                self.best_x = x.copy()
                self.best_norm = float(np.linalg.norm(x))
            return False
        if self.best_x is None and gap < self.least_gap:
            self.least_gap = gap
            self.least_x = x.copy()
        return False

    @property
    def has_feasible(self) -> bool:
        return self.best_x is not None

    def result_x(self, fallback: np.ndarray) -> np.ndarray:
        if self.best_x is not None:
            return self.best_x
        if self.least_x is not None:
            return self.least_x
        return fallback


def solve(
    instance: ProblemInstance,
    a0: np.ndarray,
    reg: Regularizer,
    config: SolverConfig,
) -> SolveResult:
    """Approximately solve max <a0,x> - Omega(x) s.t. R+_M(x) <= budget."""
    a0 = instance.check_dim(a0)
    if abs(np.linalg.norm(a0) - 1.0) > 1e-6:
        raise ValueError("anchor must be a unit vector")
    c = config.budget
    x = _initial_point(instance, a0, config)
    if config.eta0 is None:
        mean_grad = float(np.mean(instance.model.grad_norms(instance.data, x)))
        eta0 = 1.0 / (1.0 + mean_grad)
    else:
        eta0 = config.eta0

    # total displacement the step schedule can produce; anything beyond it is
    # runaway (an unbounded feasible direction), so the norm cap keys on it
    # rather than on a possibly tiny ||x0||
    if config.schedule == "polyak_geom":
        step_budget = 2.0 * eta0 * config.geom_halve_every
    else:
        step_budget = 2.0 * eta0 * math.sqrt(config.max_inner_iters)
    norm_cap = config.norm_cap_factor * max(float(np.linalg.norm(x)), step_budget)

    tracker = _BestTracker(config.feasibility_tol, config.stall_rel_tol)
    trace = {"objective": [], "true_objective": [], "gap": []} if config.track_trace else None

    if config.schedule == "sqrt":
        status, rho, iterations = _run_penalty_loops(
            instance, a0, reg, config, x, eta0, norm_cap, tracker, trace
        )
    else:
        status, rho, iterations = _run_polyak(
            instance, a0, reg, config, x, eta0, norm_cap, tracker, trace
        )

    x_hat = tracker.result_x(x)
    gap = max(one_sided_risk(x_hat, instance) - c, 0.0)
    return SolveResult(
        x_hat=x_hat,
        status=status,
        objective=float(-(a0 @ x_hat) + reg.value(x_hat)),
        feasibility_gap=gap,
        penalty=rho,
        iterations=iterations,
        trace=trace,
    )


def _run_penalty_loops(instance, a0, reg, config, x, eta0, norm_cap, tracker, trace):
    """Exact-penalty outer loop around the sqrt-schedule inner loop.

    A norm-cap hit below rho_max means the penalized objective is still
    unbounded (penalty weaker than the optimal multiplier), so the penalty is
    escalated and the loop restarts from the initial point; a cap hit at
    rho_max flags a genuinely unbounded/ill-posed instance.
    """
    c = config.budget
    rho = config.rho0
    k_global = 0
    x_init = x.copy()
    while True:
        window = []
        best_F = math.inf
        capped = False
        # the subgradient magnitude grows linearly in rho, so the step is
        # scaled by 1/rho to keep eta * ||g|| at the eta0 scale after
        # escalations; k restarts with each penalty loop
        eta_scale = eta0 / max(1.0, rho)
        for k in range(1, config.max_inner_iters + 1):
            k_global += 1
            risk = one_sided_risk(x, instance)
            gap = risk - c
            true_obj = -float(a0 @ x) + reg.value(x)
            tracker.update(x, gap, true_obj)
            F = true_obj + rho * max(gap, 0.0)
            best_F = min(best_F, F)
            if trace is not None:
                trace["objective"].append(F)
                trace["true_objective"].append(true_obj)
                trace["gap"].append(max(gap, 0.0))
            window.append(best_F)
            if len(window) > config.stall_window:
                old = window.pop(0)
                if old - best_F <= config.stall_rel_tol * max(1.0, abs(best_F)):
                    break
            g = -a0
            if gap > 0.0:
                g = g + rho * one_sided_risk_subgradient(x, instance)
            eta = eta_scale / math.sqrt(k)
            x = prox(reg, x - eta * g, eta)
            if np.linalg.norm(x) > norm_cap:
                capped = True
                break
        if not capped:
            final_gap = one_sided_risk(x, instance) - c
            if final_gap <= config.feasibility_tol and tracker.has_feasible:
                return "converged", rho, k_global
        if rho >= config.rho_max:
            if capped:
                return "norm_cap_hit", rho, k_global
            return "converged" if tracker.has_feasible else "penalty_exhausted", rho, k_global
        rho *= config.rho_growth
        if capped:
            x = x_init.copy()


def _run_polyak(instance, a0, reg, config, x, eta0, norm_cap, tracker, trace):
    """Alternating feasibility-Polyak / objective steps (budget known exactly).

    Stalls are counted in objective steps: pullback stretches that restore
    feasibility do not advance the counter, so boundary cycling is not
    mistaken for convergence.
    """
    c = config.budget
    j_obj = 0
    j_last_improve = 0
    j_half_mark = 0
    halvings = 0
    least_gap_mark = math.inf
    k_mark = 0
    k = 0
    for k in range(1, config.max_inner_iters + 1):
        risk = one_sided_risk(x, instance)
        gap = risk - c
        true_obj = -float(a0 @ x) + reg.value(x)
        if tracker.update(x, gap, true_obj):
            j_last_improve = j_obj
        if trace is not None:
            trace["objective"].append(true_obj + max(gap, 0.0))
            trace["true_objective"].append(true_obj)
            trace["gap"].append(max(gap, 0.0))
        if tracker.has_feasible and j_obj - j_last_improve >= config.stall_window:
            break
        if not tracker.has_feasible and k - k_mark >= 100 * config.stall_window:
            # no feasible point yet and the gap has stopped shrinking
            if gap >= least_gap_mark - config.stall_rel_tol * max(1.0, abs(least_gap_mark)):
                return "penalty_exhausted", 0.0, k
            least_gap_mark = gap
            k_mark = k
        if gap > config.feasibility_tol:
            # (relaxed) Polyak step toward the level set {R+ <= c}; the
            # regularizer belongs to the objective and is applied on
            # objective steps only
            g = one_sided_risk_subgradient(x, instance)
            gsq = float(g @ g)
            if gsq == 0.0:
                # risk cannot be reduced from here: budget unreachable
                return "penalty_exhausted", 0.0, k
            x = x - config.polyak_relax * (gap / gsq) * g
        else:
            j_obj += 1
            if config.schedule == "polyak_geom":
                # halve the step whenever the feasible best has stopped
                # improving at the current scale; on sharp instances the
                # resulting decay converges linearly
                if j_obj - max(j_last_improve, j_half_mark) >= config.geom_halve_every:
                    halvings += 1
                    j_half_mark = j_obj
                eta = eta0 * 0.5**halvings
                if eta <= 1e-14 * eta0:
                    break
            else:
                eta = eta0 / math.sqrt(j_obj)
            x = prox(reg, x + eta * a0, eta)
        if np.linalg.norm(x) > norm_cap:
            return "norm_cap_hit", 0.0, k
    if tracker.has_feasible:
        return "converged", 0.0, k
    return "penalty_exhausted", 0.0, k


@dataclass(frozen=True)
class CertificateResult:
    """Distance from the anchor to the cone of active-constraint gradients
    plus the regularizer subdifferential at x_hat.

    A small residual certifies that x_hat satisfies the first-order optimality
    condition of the anchored program: no feasible ascent direction remains.
    """

    residual: float
    multipliers: np.ndarray
    active_indices: np.ndarray
    reg_subgradient: np.ndarray
    iterations: int
    converged: bool

    def to_json_dict(self) -> dict:
        return {
            "residual": self.residual,
            "multipliers": self.multipliers.tolist(),
            "active_indices": self.active_indices.tolist(),
            "reg_subgradient": self.reg_subgradient.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def certify(
    instance: ProblemInstance,
    x_hat: np.ndarray,
    a0: np.ndarray,
    reg: Regularizer,
    tol: float = 1e-6,
    max_iters: int = 20000,
    support_tol: float = 1e-9,
) -> CertificateResult:
    """Solve min_{lam >= 0, g} || a0 - sum_active lam_m grad f_m(x_hat) - g ||_2.

    The active set is {m : |f_m(x_hat) - y_m| <= tol (1 + |y_m|)}; g ranges
    over the regularizer subdifferential at x_hat (zero for none; for l1,
    fixed lam_reg * sign on the support of x_hat and the box [-lam_reg,
    lam_reg] elsewhere). Solved by accelerated projected gradient with
    adaptive restart. Requires x_hat feasible within tol.
    """
    x_hat = instance.check_dim(x_hat)
    a0 = instance.check_dim(a0)
    values = instance.model.values(instance.data, x_hat)
    resid = values - instance.y
    scale = 1.0 + np.abs(instance.y)
    if np.any(resid > tol * scale):
        worst = float(np.max(resid / scale))
        raise ValueError(
            f"x_hat violates the constraints (worst scaled residual {worst:.3e} > tol {tol:.1e})"
        )
    active = np.flatnonzero(np.abs(resid) <= tol * scale)
    G = instance.model.gradients(instance.data[active], x_hat).T if active.size else np.zeros(
        (instance.n, 0)
    )

    n = instance.n
    if reg.kind == "l1" and reg.lam > 0:
        on_support = np.abs(x_hat) > support_tol * max(1.0, float(np.max(np.abs(x_hat))))
        g_fixed = np.where(on_support, reg.lam * np.sign(x_hat), 0.0)
        free = np.flatnonzero(~on_support)
        box = reg.lam
    else:
        g_fixed = np.zeros(n)
        free = np.zeros(0, dtype=int)
        box = 0.0
    target = a0 - g_fixed

    # Lipschitz bound for the joint quadratic: ||[G E]||^2 <= ||G||^2 + 1
    gnorm2 = float(np.linalg.norm(G, 2)) ** 2 if G.size else 0.0
    L = gnorm2 + (1.0 if free.size else 0.0)
    L = max(L, 1e-12)

    lam = np.zeros(G.shape[1])
    b = np.zeros(free.size)
    lam_prev, b_prev = lam.copy(), b.copy()
    t_acc = 1.0

    def residual_vec(lam_v, b_v):
        r = target - (G @ lam_v if lam_v.size else 0.0)
        if b_v.size:
            r = r.copy()
            r[free] -= b_v
        return r

    def objective(lam_v, b_v):
        r = residual_vec(lam_v, b_v)
        return 0.5 * float(r @ r)

    f_prev = objective(lam, b)
    iterations = 0
    converged = False
    for iterations in range(1, max_iters + 1):
        # momentum extrapolation
        beta = (t_acc - 1.0) / (0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc)))
        ylam = lam + beta * (lam - lam_prev)
        yb = b + beta * (b - b_prev)
        r = residual_vec(ylam, yb)
        lam_prev, b_prev = lam, b
        lam = np.maximum(ylam + (G.T @ r) / L, 0.0) if lam.size else ylam
        if b.size:
            b = np.clip(yb + r[free] / L, -box, box)
        t_acc = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
        f_now = objective(lam, b)
        if f_now > f_prev:  # adaptive restart
            lam_prev, b_prev = lam.copy(), b.copy()
            t_acc = 1.0
        # gradient-mapping stationarity check every few iterations
        if iterations % 10 == 0 or iterations == max_iters:
            r = residual_vec(lam, b)
            glam = -(G.T @ r) if lam.size else np.zeros(0)
            step_lam = lam - np.maximum(lam - glam, 0.0)
            gb = -r[free] if b.size else np.zeros(0)
            step_b = b - np.clip(b - gb, -box, box)
            if max(
                float(np.max(np.abs(step_lam))) if step_lam.size else 0.0,
                float(np.max(np.abs(step_b))) if step_b.size else 0.0,
            ) <= 1e-12 * (1.0 + math.sqrt(2.0 * f_now)):
                converged = True
                break
        f_prev = f_now

    r = residual_vec(lam, b)
    g_full = g_fixed.copy()
    if b.size:
        g_full[free] += b
    return CertificateResult(
        residual=float(np.linalg.norm(r)),
        multipliers=lam,
        active_indices=active,
        reg_subgradient=g_full,
        iterations=iterations,
        converged=converged,
    )
