"""Data-driven anchor vectors.

An anchor is a unit vector meant to correlate with the unknown solution.
Two recipes build one from the observations alone, both reading off the
derivatives of the empirical squared-loss risk R_M(x) = (1/2M) sum (f_m(x)-y_m)^2
at the origin:

* gradient anchor:  a0 = -grad R_M(0) / ||grad R_M(0)||, valid whenever the
  link has a nonzero derivative at 0 (linear, relu, softplus);
* curvature anchor: a0 = leading eigenvector of -hess R_M(0), for links that
  are twice differentiable at 0 (square, softplus, linear), computed
  matrix-free by shifted power iteration;
* sparse variant: diagonal thresholding picks a candidate support before the
  eigenvector step, for square-link observations of sparse targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DegenerateDataError, ProblemInstance, RngStream, as_vector
from .models import UnsupportedModelError

__all__ = [
    "AnchorResult",
    "PowerIterationError",
    "anchor_from_gradient",
    "anchor_from_hessian",
    "anchor_sparse_threshold",
    "oracle_anchor",
    "anchor_quality",
    "davis_kahan_quality_bound",
    "power_iteration",
]

# fixed stream for the shift-estimation probes: keeps anchors a pure function
# of their inputs
_PROBE_STREAM = RngStream(0x414E4348, 20)

_UNIT_TOL = 1e-12


class PowerIterationError(RuntimeError):
    """Power iteration did not reach the requested residual.

    Carries the best iterate so callers can inspect or accept it anyway.
    """

    def __init__(self, message, iterate, eigenvalue, residual, iterations):
        super().__init__(message)
        self.iterate = iterate
        self.eigenvalue = eigenvalue
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class AnchorResult:
    """Unit anchor vector plus provenance and quality diagnostics."""

    a0: np.ndarray
    method: str
    delta_hat: Optional[float] = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a0 = as_vector(self.a0, "a0")
        nrm = np.linalg.norm(a0)
        if abs(nrm - 1.0) > 1e-9:
            raise ValueError(f"anchor must be unit norm, got ||a0|| = {nrm}")
        object.__setattr__(self, "a0", a0)

    def to_json_dict(self) -> dict:
        return {
            "a0": self.a0.tolist(),
            "method": self.method,
            "delta_hat": self.delta_hat,
            "diagnostics": self.diagnostics,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "AnchorResult":
        return AnchorResult(
            a0=np.asarray(doc["a0"], dtype=np.float64),
            method=doc["method"],
            delta_hat=doc.get("delta_hat"),
            diagnostics=doc.get("diagnostics") or {},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load(path) -> "AnchorResult":
        with open(path) as fh:
            return AnchorResult.from_json_dict(json.load(fh))


def anchor_quality(a0: np.ndarray, x_star: np.ndarray) -> float:
    """Realized correlation <a0, x*> / ||x*|| of a unit anchor with the truth."""
    a0 = as_vector(a0, "a0")
    x_star = as_vector(x_star, "x_star")
    nrm = np.linalg.norm(x_star)
    if nrm == 0.0:
        raise ValueError("anchor quality undefined for x_star = 0")
    return float(a0 @ x_star) / float(nrm)


def davis_kahan_quality_bound(h_emp_dev: float, gamma_star: float) -> float:
    """Upper bound 2 * dev / gap on the projector distance between the leading
    eigenvector of a perturbed symmetric matrix and the unperturbed one.

    ``h_emp_dev`` is the operator-norm perturbation, ``gamma_star`` the
    spectral gap of the unperturbed matrix.
    """
    if gamma_star <= 0:
        raise ValueError(f"spectral gap must be positive, got {gamma_star}")
    if h_emp_dev < 0:
        raise ValueError("deviation must be nonnegative")
    return 2.0 * h_emp_dev / gamma_star


def _fix_sign(v: np.ndarray) -> np.ndarray:
    """Deterministic sign: first coordinate of largest magnitude made positive."""
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _delta_hat(instance: ProblemInstance, a0: np.ndarray) -> Optional[float]:
    if instance.x_star is None or not np.any(instance.x_star):
        return None
    return anchor_quality(a0, instance.x_star)


def anchor_from_gradient(instance: ProblemInstance) -> AnchorResult:
    """Normalized negative gradient of the empirical squared-loss risk at 0.

    grad R_M(0) = (1/M) sum (f_m(0) - y_m) grad f_m(0); for single-link
    families this is phi'(0)/M sum (phi(0) - y_m) a_m, so the anchor points
    along sum y_m a_m up to the sign of phi'(0).
    """
    model = instance.model
    link = model.inner if model.kind == "one_hidden_layer" else model.kind
    if link == "square":
        raise UnsupportedModelError(
            "spiked gradient unavailable for the squared link (grad R(0) = 0); "
            "use anchor_from_hessian"
        )
    A = instance.data
    x0 = np.zeros(instance.n)
    residual0 = model.values(A, x0) - instance.y
    g = model.grad_weighted_sum(A, x0, residual0) / instance.m
    nrm = np.linalg.norm(g)
    if nrm == 0.0:
        raise DegenerateDataError("empirical risk gradient at the origin is zero")
    a0 = -g / nrm
    return AnchorResult(
        a0=a0,
        method="gradient",
        delta_hat=_delta_hat(instance, a0),
        diagnostics={"gradient_norm": float(nrm)},
    )


def _estimate_shift(op: Callable[[np.ndarray], np.ndarray], n: int, probes: int = 20) -> float:
    """Frobenius-norm upper bound for a symmetric operator, matrix-free.

    E||H z||^2 over standard Gaussian z equals ||H||_F^2; the probe average is
    inflated by 50% so the shifted operator sigma I + H is positive definite
    with margin. Probes come from a fixed stream, so the result is a pure
    function of the operator.
    """
    gen = _PROBE_STREAM.generator()
    Z = gen.standard_normal((probes, n))
    total = 0.0
    for z in Z:
        w = op(z)
        total += float(w @ w)
    return 1.5 * math.sqrt(total / probes)


def power_iteration(
    op: Callable[[np.ndarray], np.ndarray],
    n: int,
    max_iters: int = 1000,
    tol: float = 1e-8,
    shift: Optional[float] = None,
):
    """Leading eigenpair of a symmetric operator via shifted power iteration.

    Iterates v <- (shift I + H) v / ||.||; the shift (a Frobenius upper bound
    by default) makes the iterated operator positive definite so the leading
    eigenvalue of H wins regardless of its sign pattern. Starts from the
    normalized all-ones vector, falling back to e_1 if that start is already
    an eigenvector to within 1e-12.

    Returns (v, eigenvalue, residual, iterations); raises PowerIterationError
    with the best iterate if the residual ||Hv - lambda v|| never reaches tol,
    and DegenerateDataError on the zero operator.
    """
    if n < 1:
        raise ValueError("operator dimension must be >= 1")
    sigma = _estimate_shift(op, n) if shift is None else float(shift)
    v = np.ones(n) / math.sqrt(n)

    def step_stats(vec):
        Hv = op(vec)
        lam = float(vec @ Hv)
        resid = float(np.linalg.norm(Hv - lam * vec))
        return Hv, lam, resid

    Hv, lam, resid = step_stats(v)
    if resid <= _UNIT_TOL and n > 1:
        v = np.zeros(n)
        v[0] = 1.0
        Hv, lam, resid = step_stats(v)

    best = (v, lam, resid)
    iterations = 0
    while resid > tol and iterations < max_iters:
        w = sigma * v + Hv
        nw = np.linalg.norm(w)
        if nw <= 1e-300:
            raise DegenerateDataError("power iteration hit the zero operator")
        v = w / nw
        Hv, lam, resid = step_stats(v)
        iterations += 1
        if resid < best[2]:
            best = (v, lam, resid)
    if resid > tol:
        v, lam, resid = best
        raise PowerIterationError(
            f"power iteration residual {resid:.3e} above tol {tol:.1e} "
            f"after {iterations} iterations",
            iterate=v,
            eigenvalue=lam,
            residual=resid,
            iterations=iterations,
        )
    return v, lam, resid, iterations


def anchor_from_hessian(
    instance: ProblemInstance, max_iters: int = 1000, tol: float = 1e-8
) -> AnchorResult:
    """Leading eigenvector of the negated empirical squared-loss curvature at 0.

    The operator v -> -(1/M) sum c_m (a_m'v) a_m is applied matrix-free; see
    ``models.curvature_coeffs_at_zero`` for the per-sample coefficients. The
    returned sign is fixed deterministically (largest-magnitude coordinate
    positive).
    """
    c = instance.model.curvature_coeffs_at_zero(instance.y)
    A = instance.data
    m = instance.m

    def neg_hessian(v):
        return -(A.T @ (c * (A @ v))) / m

    v, lam, resid, iters = power_iteration(neg_hessian, instance.n, max_iters, tol)
    v = _fix_sign(v / np.linalg.norm(v))
    return AnchorResult(
        a0=v,
        method="hessian",
        delta_hat=_delta_hat(instance, v),
        diagnostics={"eigenvalue": lam, "residual": resid, "iterations": iters},
    )


def anchor_sparse_threshold(instance: ProblemInstance, k: int) -> AnchorResult:
    """Sparse curvature anchor by diagonal thresholding (squared link only).

    Ranks coordinates by the diagonal of the negated curvature,
    d_i = (2/M) sum y_m a_{m,i}^2, keeps the top k, runs the eigenvector step
    on the k x k principal block, and embeds the result back into R^N.
    With k = N this reduces to ``anchor_from_hessian``.
    """
    if instance.model.kind != "square":
        raise UnsupportedModelError("diagonal thresholding is defined for the squared link")
    n = instance.n
    if not 1 <= k <= n:
        raise ValueError(f"support size k must be in [1, {n}], got {k}")
    A = instance.data
    y = instance.y
    m = instance.m
    diag = 2.0 * (y @ (A * A)) / m
    if np.all(diag == 0.0):
        raise DegenerateDataError("curvature diagonal is identically zero")
    order = np.lexsort((np.arange(n), -diag))  # by value desc, ties by index
    support = np.sort(order[:k])
    As = A[:, support]

    def neg_hessian_sub(v):
        return 2.0 * (As.T @ (y * (As @ v))) / m

    v, lam, resid, iters = power_iteration(neg_hessian_sub, k)
    a0 = np.zeros(n)
    a0[support] = v / np.linalg.norm(v)
    a0 = _fix_sign(a0)
    return AnchorResult(
        a0=a0,
        method="sparse_threshold",
        delta_hat=_delta_hat(instance, a0),
        diagnostics={
            "eigenvalue": lam,
            "residual": resid,
            "iterations": iters,
            "support": support.tolist(),
        },
    )


def oracle_anchor(x_star: np.ndarray, zeta: float, stream: RngStream) -> AnchorResult:
    """Ground-truth anchor perturbed by a random unit direction.

    a0 = normalize(x*/||x*|| + zeta u) with u uniform on the sphere; zeta
    controls the anchor quality independently of how the estimator behaves
    (zeta = 0 gives the exact direction).
    """
    x_star = as_vector(x_star, "x_star")
    nrm = np.linalg.norm(x_star)
    if nrm == 0.0:
        raise ValueError("oracle anchor undefined for x_star = 0")
    gen = stream.generator()
    u = gen.standard_normal(x_star.shape[0])
    u /= np.linalg.norm(u)
    a0 = x_star / nrm + zeta * u
    a0 /= np.linalg.norm(a0)
    return AnchorResult(
        a0=a0,
        method="oracle",
        delta_hat=float(a0 @ x_star / nrm),
        diagnostics={"zeta": float(zeta)},
    )
