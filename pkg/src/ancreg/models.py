"""Observation-function families and their statistical constants.

Each family observes y = f(x) through a known convex link applied to inner
products with Gaussian sample vectors:

    linear    f(x) = a'x
    square    f(x) = (a'x)^2
    relu      f(x) = max(a'x, 0)        with the convention phi'(t) = 1(t >= 0)
    softplus  f(x) = log2(1 + e^(a'x))  (natural-log base available as alias)
    one_hidden_layer
              f(x) = sum_k w_k phi(a'x_k),  w_k >= 0, x = [x_1; ...; x_K]

All links are convex, so every f is convex. Closed-form constants below
(gradient alignment, second moments) assume standard Gaussian sample vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ProblemInstance, RngStream, as_vector

__all__ = [
    "ModelKind",
    "NoiseSpec",
    "SigmaStar",
    "UnsupportedModelError",
    "NoClosedFormError",
    "f_value",
    "f_gradient",
    "loss_hessian_vp_at_zero",
    "loss_hessian_at_zero_dense",
    "sigma_star_closed_form",
    "sigma_star_monte_carlo",
    "tau_closed_form",
    "sample_instance",
]

_LN2 = math.log(2.0)


class UnsupportedModelError(ValueError):
    """Operation not defined for this model family."""


class NoClosedFormError(ValueError):
    """No closed-form constant for this family; fall back to Monte Carlo."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# scalar link tables: value, derivative, (phi(0), phi'(0), phi''(0))
def _link_value(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "square":
        return z * z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softplus":
        return np.logaddexp(0.0, z) / _LN2
    if kind == "softplus_e":
        return np.logaddexp(0.0, z)
    raise UnsupportedModelError(f"unknown link {kind!r}")


def _link_deriv(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return np.ones_like(z)
    if kind == "square":
        return 2.0 * z
    if kind == "relu":
        return (z >= 0.0).astype(np.float64)
    if kind == "softplus":
        return _sigmoid(z) / _LN2
    if kind == "softplus_e":
        return _sigmoid(z)
    raise UnsupportedModelError(f"unknown link {kind!r}")


_LINK_AT_ZERO = {
    # phi(0), phi'(0), phi''(0); None marks an undefined second derivative
    "linear": (0.0, 1.0, 0.0),
    "square": (0.0, 0.0, 2.0),
    "relu": (0.0, 1.0, None),
    "softplus": (1.0, 0.5 / _LN2, 0.25 / _LN2),
    "softplus_e": (_LN2, 0.5, 0.25),
}


@dataclass(frozen=True)
class ModelKind:
    """Tagged observation family; for one_hidden_layer carries block weights."""

    kind: str
    weights: Optional[tuple] = None
    inner: Optional[str] = None

    def __post_init__(self):
        if self.kind == "one_hidden_layer":
            if not self.weights:
                raise ValueError("one_hidden_layer needs at least one weight")
            w = tuple(float(v) for v in self.weights)
            if any(v < 0 for v in w):
                raise ValueError("hidden-layer weights must be nonnegative (convexity)")
            if self.inner not in ("relu", "softplus", "softplus_e"):
                raise ValueError(f"unsupported inner activation {self.inner!r}")
            object.__setattr__(self, "weights", w)
        elif self.kind in _LINK_AT_ZERO:
            if self.weights is not None or self.inner is not None:
                raise ValueError(f"{self.kind} takes no weights/inner activation")
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")

    # -- constructors ------------------------------------------------------
    @staticmethod
    def linear() -> "ModelKind":
        return ModelKind("linear")

    @staticmethod
    def square() -> "ModelKind":
        return ModelKind("square")

    @staticmethod
    def relu() -> "ModelKind":
        return ModelKind("relu")

    @staticmethod
    def softplus(base: str = "2") -> "ModelKind":
        if base not in ("2", "e"):
            raise ValueError("softplus base must be '2' or 'e'")
        return ModelKind("softplus" if base == "2" else "softplus_e")

    @staticmethod
    def one_hidden_layer(weights, inner: str = "relu") -> "ModelKind":
        return ModelKind("one_hidden_layer", weights=tuple(weights), inner=inner)

    # -- shape bookkeeping ---------------------------------------------------
    @property
    def k(self) -> int:
        return len(self.weights) if self.kind == "one_hidden_layer" else 1

    def x_dim(self, a_dim: int) -> int:
        return self.k * a_dim

    def a_dim(self, x_dim: int) -> int:
        if x_dim % self.k:
            raise ValueError(f"x dimension {x_dim} not divisible into {self.k} blocks")
        return x_dim // self.k

    def _blocks(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.k, -1)

    # -- oracles (vectorized over the M samples in rows of A) ---------------
    def values(self, A: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.kind == "one_hidden_layer":
            Z = A @ self._blocks(x).T  # (M, K)
            return _link_value(self.inner, Z) @ np.asarray(self.weights)
        return _link_value(self.kind, A @ x)

    def grad_weighted_sum(self, A: np.ndarray, x: np.ndarray, wts: np.ndarray) -> np.ndarray:
        """sum_m wts_m grad f_m(x), computed without materializing gradients."""
        if self.kind == "one_hidden_layer":
            Z = A @ self._blocks(x).T
            D = _link_deriv(self.inner, Z)  # (M, K)
            parts = [A.T @ (wts * wk * D[:, j]) for j, wk in enumerate(self.weights)]
            return np.concatenate(parts)
        return A.T @ (wts * _link_deriv(self.kind, A @ x))

    def gradients(self, A: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Full (M, n) gradient matrix; use only for modest M."""
        if self.kind == "one_hidden_layer":
            Z = A @ self._blocks(x).T
            D = _link_deriv(self.inner, Z)
            return np.hstack([(wk * D[:, j])[:, None] * A for j, wk in enumerate(self.weights)])
        return _link_deriv(self.kind, A @ x)[:, None] * A

    def grad_dots(self, A: np.ndarray, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Inner products <grad f_m(x), h> for all m, without forming gradients."""
        if self.kind == "one_hidden_layer":
            Z = A @ self._blocks(x).T
            D = _link_deriv(self.inner, Z)
            Hp = A @ self._blocks(h).T  # (M, K) of a_m' h_k
            return (D * Hp) @ np.asarray(self.weights)
        return _link_deriv(self.kind, A @ x) * (A @ h)

    def grad_norms(self, A: np.ndarray, x: np.ndarray) -> np.ndarray:
        row_norms = np.linalg.norm(A, axis=1)
        if self.kind == "one_hidden_layer":
            Z = A @ self._blocks(x).T
            D = _link_deriv(self.inner, Z) * np.asarray(self.weights)
            return row_norms * np.linalg.norm(D, axis=1)
        return row_norms * np.abs(_link_deriv(self.kind, A @ x))

    def ray_values(self, A: np.ndarray, direction: np.ndarray) -> Callable[[float], np.ndarray]:
        """Cheap evaluator beta -> f_m(beta * direction), reusing one projection."""
        if self.kind == "one_hidden_layer":
            Z0 = A @ self._blocks(direction).T
            w = np.asarray(self.weights)
            return lambda beta: _link_value(self.inner, beta * Z0) @ w
        z0 = A @ direction
        return lambda beta: _link_value(self.kind, beta * z0)

    def curvature_coeffs_at_zero(self, y: np.ndarray) -> np.ndarray:
        """Per-sample coefficients c_m of the squared-loss curvature at the origin.

        The empirical risk (1/2M) sum (f_m(x) - y_m)^2 has Hessian
        (1/M) sum c_m a_m a_m' at x = 0 with
        c_m = phi'(0)^2 + (phi(0) - y_m) phi''(0).
        """
        if self.kind == "one_hidden_layer":
            raise UnsupportedModelError("curvature at zero is defined for single-link models only")
        phi0, dphi0, ddphi0 = _LINK_AT_ZERO[self.kind]
        if ddphi0 is None:
            raise UnsupportedModelError("relu has no second derivative at the origin kink")
        return dphi0 * dphi0 + (phi0 - y) * ddphi0

    # -- serialization -------------------------------------------------------
    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind}
        if self.kind == "one_hidden_layer":
            doc["weights"] = list(self.weights)
            doc["inner"] = self.inner
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "ModelKind":
        kind = doc["kind"]
        if kind == "one_hidden_layer":
            return ModelKind(kind, weights=tuple(doc["weights"]), inner=doc["inner"])
        return ModelKind(kind)

    def describe(self) -> str:
        if self.kind == "one_hidden_layer":
            return f"one_hidden_layer(K={self.k}, inner={self.inner})"
        return self.kind


def f_value(kind: ModelKind, a: np.ndarray, x: np.ndarray) -> float:
    """Single-observation value f(x) for data vector a."""
    a = as_vector(a, "a")
    x = as_vector(x, "x")
    if x.shape[0] != kind.x_dim(a.shape[0]):
        raise ValueError(f"x has length {x.shape[0]}, expected {kind.x_dim(a.shape[0])}")
    return float(kind.values(a[None, :], x)[0])


def f_gradient(kind: ModelKind, a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Single-observation gradient; relu uses the subgradient 1(a'x >= 0) a."""
    a = as_vector(a, "a")
    x = as_vector(x, "x")
    if x.shape[0] != kind.x_dim(a.shape[0]):
        raise ValueError(f"x has length {x.shape[0]}, expected {kind.x_dim(a.shape[0])}")
    return kind.gradients(a[None, :], x)[0]


def loss_hessian_vp_at_zero(instance: ProblemInstance, v: np.ndarray) -> np.ndarray:
    """Matrix-free product of the empirical squared-loss Hessian at 0 with v.

    Returns (1/M) sum_m c_m (a_m'v) a_m with the coefficients of
    ``curvature_coeffs_at_zero``; the N x N matrix is never formed.
    Rejects families whose link lacks a second derivative at the origin.
    """
    v = instance.check_dim(v)
    c = instance.model.curvature_coeffs_at_zero(instance.y)
    A = instance.data
    return A.T @ (c * (A @ v)) / instance.m


def loss_hessian_at_zero_dense(instance: ProblemInstance) -> np.ndarray:
    """Dense empirical squared-loss Hessian at the origin (diagnostic use, small N)."""
    c = instance.model.curvature_coeffs_at_zero(instance.y)
    A = instance.data
    return A.T @ (c[:, None] * A) / instance.m


@dataclass(frozen=True)
class SigmaStar:
    """Second-moment descriptor of the gradient law at the ground truth.

    Either the closed form iso * I + spike * u u' (u a unit vector) or an
    empirical dense matrix. Always symmetric positive semidefinite.
    """

    iso: float = 0.0
    spike: float = 0.0
    direction: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.matrix is None:
            if self.iso < 0 or self.spike < 0:
                raise ValueError("closed-form descriptor must be PSD (iso, spike >= 0)")
            if self.spike > 0 and self.direction is None:
                raise ValueError("spike requires a direction")
            if self.direction is not None:
                d = as_vector(self.direction, "direction")
                nrm = np.linalg.norm(d)
                if nrm == 0:
                    raise ValueError("direction must be nonzero")
                object.__setattr__(self, "direction", d / nrm)
        else:
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("matrix descriptor must be square")
            object.__setattr__(self, "matrix", m)

    @property
    def operator_norm(self) -> float:
        if self.matrix is not None:
            return float(np.linalg.eigvalsh(self.matrix)[-1])
        return self.iso + self.spike

    def trace(self, n: int) -> float:
        if self.matrix is not None:
            return float(np.trace(self.matrix))
        return self.iso * n + self.spike

    def quad_form(self, h: np.ndarray) -> float:
        """h' Sigma h for a raw (not necessarily unit) h."""
        if self.matrix is not None:
            return float(h @ (self.matrix @ h))
        val = self.iso * float(h @ h)
        if self.spike > 0:
            val += self.spike * float(self.direction @ h) ** 2
        return val

    def top_direction(self) -> Optional[np.ndarray]:
        if self.matrix is not None:
            w, v = np.linalg.eigh(self.matrix)
            return v[:, -1]
        return self.direction


def sigma_star_closed_form(kind: ModelKind, x_star: np.ndarray) -> SigmaStar:
    """Closed-form second-moment descriptor under standard Gaussian data.

    linear: identity. relu: I/2. square: 4 x* x*' + 2||x*||^2 I, the negated
    population curvature of the squared-loss risk at the origin; this is the
    convention every calculator in the package uses for the squared link (the
    raw gradient outer product is twice it, see ``sigma_star_monte_carlo``).
    """
    x_star = as_vector(x_star, "x_star")
    if kind.kind == "linear":
        return SigmaStar(iso=1.0)
    if kind.kind == "relu":
        return SigmaStar(iso=0.5)
    if kind.kind == "square":
        nsq = float(x_star @ x_star)
        if nsq == 0.0:
            return SigmaStar(iso=0.0)
        return SigmaStar(iso=2.0 * nsq, spike=4.0 * nsq, direction=x_star)
    raise NoClosedFormError(f"no closed-form second moment for {kind.describe()}")


def sigma_star_monte_carlo(
    kind: ModelKind, x_star: np.ndarray, samples: int, stream: RngStream
) -> SigmaStar:
    """Monte Carlo estimate of the descriptor ``sigma_star_closed_form`` reports.

    For linear/relu/softplus families this is the average gradient outer
    product at x*. For the squared link it averages the curvature weighting
    2 f(x*) a a' instead, matching the closed-form convention; the plain
    gradient outer product 4 (a'x*)^2 a a' concentrates on twice that matrix.
    """
    x_star = as_vector(x_star, "x_star")
    gen = stream.generator()
    n = x_star.shape[0]
    a_dim = kind.a_dim(n)
    total = np.zeros((n, n))
    done = 0
    while done < samples:
        chunk = min(samples - done, 200_000 // max(a_dim, 1) + 1)
        A = gen.standard_normal((chunk, a_dim))
        if kind.kind == "square":
            w = 2.0 * kind.values(A, x_star)
            total += A.T @ (w[:, None] * A)
        else:
            G = kind.gradients(A, x_star)
            total += G.T @ G
        done += chunk
    return SigmaStar(matrix=total / samples)


def _alignment(x_star: np.ndarray, h: np.ndarray) -> float:
    """Correlation r = <x*, h> / (||x*|| ||h||), clipped into [-1, 1]."""
    nx = np.linalg.norm(x_star)
    nh = np.linalg.norm(h)
    if nh == 0.0:
        raise ValueError("h must be nonzero")
    if nx == 0.0:
        raise ValueError("x_star must be nonzero")
    return float(np.clip((x_star @ h) / (nx * nh), -1.0, 1.0))


def tau_closed_form(kind: ModelKind, x_star: np.ndarray, h: np.ndarray) -> float:
    """E (<grad f(x*), h>)_+ / ||h|| under standard Gaussian data.

    linear:  1/sqrt(2 pi), independent of h.
    relu:    (1 + r) / sqrt(8 pi) with r the correlation of h and x*.
    square:  ||x*|| (r + (2/pi)(sqrt(1 - r^2) + r arcsin r)).

    The squared-link expression is the Monte Carlo-verified constant for the
    full gradient 2 (a'x*) a; see the project notes for the verification at
    r = 1 where it equals 2||x*||^2 directly.
    """
    h = as_vector(h, "h")
    if np.linalg.norm(h) == 0.0:
        raise ValueError("h must be nonzero")
    if kind.kind == "linear":
        return 1.0 / math.sqrt(2.0 * math.pi)
    x_star = as_vector(x_star, "x_star")
    r = _alignment(x_star, h)
    if kind.kind == "relu":
        return (1.0 + r) / math.sqrt(8.0 * math.pi)
    if kind.kind == "square":
        nx = float(np.linalg.norm(x_star))
        return nx * (r + (2.0 / math.pi) * (math.sqrt(max(0.0, 1.0 - r * r)) + r * math.asin(r)))
    raise NoClosedFormError(f"no closed-form alignment constant for {kind.describe()}")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive observation noise law: none, uniform on [-level, level], or
    centered Gaussian with standard deviation level."""

    kind: str = "none"
    level: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and self.level < 0:
            raise ValueError("noise level must be nonnegative")

    @staticmethod
    def none() -> "NoiseSpec":
        return NoiseSpec("none", 0.0)

    @staticmethod
    def parse(text: str) -> "NoiseSpec":
        """Parse 'none', 'uniform:0.1', or 'gaussian:0.05'."""
        if text == "none":
            return NoiseSpec.none()
        kind, _, level = text.partition(":")
        if not level:
            raise ValueError(f"noise spec {text!r} needs a level, e.g. 'uniform:0.1'")
        return NoiseSpec(kind, float(level))

    def sample(self, gen: np.random.Generator, m: int) -> np.ndarray:
        if self.kind == "none" or self.level == 0.0:
            return np.zeros(m)
        if self.kind == "uniform":
            return gen.uniform(-self.level, self.level, m)
        return self.level * gen.standard_normal(m)

    @property
    def mean_abs(self) -> float:
        """E|xi| in closed form."""
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return self.level / 2.0
        return self.level * math.sqrt(2.0 / math.pi)

    @property
    def mean_neg_part(self) -> float:
        """E(-xi)_+ in closed form, the population one-sided risk at x*."""
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return self.level / 4.0
        return self.level / math.sqrt(2.0 * math.pi)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level}

    @staticmethod
    def from_json_dict(doc: dict) -> "NoiseSpec":
        return NoiseSpec(doc["kind"], float(doc.get("level", 0.0)))


def sample_instance(
    kind: ModelKind,
    x_star: np.ndarray,
    m: int,
    noise: NoiseSpec,
    stream: RngStream,
) -> ProblemInstance:
    """Draw m i.i.d. standard Gaussian data vectors and observe y = f(x*) + xi.

    Deterministic per stream: the data are drawn first, then the noise, from
    the stream's generator.
    """
    if m < 1:
        raise ValueError(f"need m >= 1, got {m}")
    x_star = as_vector(x_star, "x_star")
    gen = stream.generator()
    A = gen.standard_normal((m, kind.a_dim(x_star.shape[0])))
    xi = noise.sample(gen, m)
    y = kind.values(A, x_star) + xi
    seed_info = {
        "base_seed": stream.base_seed,
        "stream_index": stream.stream_index,
        "algorithm": RngStream.algorithm,
    }
    return ProblemInstance(
        model=kind, data=A, y=y, x_star=x_star, noise=xi, seed_info=seed_info
    )
