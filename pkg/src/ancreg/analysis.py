"""Statistical-complexity estimators and sample-complexity calculators.

The recovery guarantees are driven by four quantities attached to the cone of
ascent directions of the anchored objective:

* tau(h) = E (<grad f(x*), h>)_+ / ||h||, and its infimum over the cone;
* the tail-alignment probability p_tau = inf_h P(<grad f(x*), h> >= tau ||h||);
* the cone-restricted second moment sup_h h' Sigma* h / ||h||^2;
* the sign-randomized complexity E || M^{-1/2} sum eps_m grad f_m(x*) ||.

Exact extrema over the cone are intractable in general. For the three
closed-form families the monotone dependence on the alignment r = corr(h, x*)
gives the exact infimum; elsewhere sampled extrema are returned with an
explicit bound-direction label (an upper bound on an infimum, a lower bound
on a supremum), so no estimate silently overstates a guarantee.

The ``bound_*`` calculators evaluate the sample-size and error-coefficient
formulas literally from their inputs and echo those inputs back for audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import RngStream, as_vector
from .models import (
    ModelKind,
    NoClosedFormError,
    SigmaStar,
    sigma_star_closed_form,
    tau_closed_form,
)

__all__ = [
    "AscentConeSpec",
    "McEstimate",
    "ConeBound",
    "PTauResult",
    "GradMoments",
    "BoundReport",
    "cone_contains",
    "sample_cone_directions",
    "rademacher_full_space",
    "tau_estimate",
    "tau_cone_lower",
    "sigma_cone_norm",
    "p_tau_estimate",
    "grad_moment_estimates",
    "c_star_sparse",
    "bound_thm1",
    "bound_cor2",
    "bound_cor3",
    "bound_cor4",
]


@dataclass(frozen=True)
class AscentConeSpec:
    """Relaxed cone of ascent directions for an anchor of quality delta.

    Membership of h requires, for every subgradient g of the regularizer at
    the ground truth,

        sqrt(1 - delta^2) ||h|| + <delta x*/||x*|| - g, h> >= 0.

    With no regularizer the only g is zero. With an l1 weight lam the
    worst-case g is computable coordinatewise: fixed lam * sign(x*_i) on the
    support, lam * sign(h_i) elsewhere, which turns membership into a single
    closed-form inequality.
    """

    delta: float
    x_star: np.ndarray
    lam: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        x = as_vector(self.x_star, "x_star")
        if not np.any(x):
            raise ValueError("x_star must be nonzero")
        if self.lam is not None and self.lam < 0:
            raise ValueError("l1 weight must be nonnegative")
        object.__setattr__(self, "x_star", x)

    @property
    def direction(self) -> np.ndarray:
        return self.x_star / np.linalg.norm(self.x_star)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.x_star)

    @property
    def sparsity(self) -> int:
        return int(self.support.size)

    def r_min(self) -> float:
        """Closed-form lower bound on the alignment r(h) over cone members."""
        root = math.sqrt(max(0.0, 1.0 - self.delta**2))
        bound = -root / self.delta
        if self.lam:
            bound -= self.lam * (2.0 * math.sqrt(self.sparsity) - 1.0) / self.delta
        return max(-1.0, bound)


def cone_contains(spec: AscentConeSpec, h: np.ndarray) -> bool:
    """Exact membership test with the worst-case regularizer subgradient."""
    h = as_vector(h, "h")
    nh = float(np.linalg.norm(h))
    if nh == 0.0:
        raise ValueError("membership is undefined for h = 0")
    u = spec.direction
    value = math.sqrt(max(0.0, 1.0 - spec.delta**2)) * nh + spec.delta * float(u @ h)
    if spec.lam:
        on = spec.support
        mask = np.zeros(h.shape[0], dtype=bool)
        mask[on] = True
        value -= spec.lam * float(np.sign(spec.x_star[on]) @ h[on])
        value -= spec.lam * float(np.sum(np.abs(h[~mask])))
    return value >= 0.0


def sample_cone_directions(spec: AscentConeSpec, count: int, stream: RngStream) -> np.ndarray:
    """Unit cone members h = r u + sqrt(1-r^2) w, w a random perpendicular.

    The alignment grid spans [r_min, 1] so the extreme directions where the
    infima occur are covered; non-members (possible under the l1 worst-case
    term) are rejected. The ground-truth direction itself is included when it
    is a member. Returns an array of shape (count', n), count' >= 1.
    """
    if count < 1:
        raise ValueError("need count >= 1")
    gen = stream.generator()
    u = spec.direction
    n = u.shape[0]
    out = []
    if cone_contains(spec, u):
        out.append(u)
    r_grid = np.linspace(spec.r_min(), 1.0, max(count, 2))
    attempts = 0
    while len(out) < count and attempts < 20 * count:
        attempts += 1
        r = r_grid[attempts % len(r_grid)]
        w = gen.standard_normal(n)
        w -= (w @ u) * u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            continue
        h = r * u + math.sqrt(max(0.0, 1.0 - r * r)) * (w / nw)
        if cone_contains(spec, h):
            out.append(h)
    if not out:
        raise ValueError("could not sample any cone member; spec may be degenerate")
    return np.array(out)


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    stderr: float
    samples: int


def _default_data_sampler(gen: np.random.Generator, m: int, a_dim: int) -> np.ndarray:
    return gen.standard_normal((m, a_dim))


def rademacher_full_space(
    model: ModelKind,
    x_star: np.ndarray,
    m: int,
    trials: int,
    stream: RngStream,
    data_sampler: Callable = _default_data_sampler,
) -> McEstimate:
    """E || M^{-1/2} sum_m eps_m grad f_m(x*) || over the whole space.

    Fresh data and fresh signs per trial; the whole-space supremum of the
    sign-randomized process equals this norm, which upper-bounds the
    restriction to any cone and never exceeds sqrt(E ||grad f(x*)||^2).
    """
    if trials < 2:
        raise ValueError("need at least 2 trials for a standard error")
    x_star = as_vector(x_star, "x_star")
    gen = stream.generator()
    a_dim = model.a_dim(x_star.shape[0])
    vals = np.empty(trials)
    for t in range(trials):
        A = data_sampler(gen, m, a_dim)
        eps = gen.choice([-1.0, 1.0], size=m)
        v = model.grad_weighted_sum(A, x_star, eps) / math.sqrt(m)
        vals[t] = np.linalg.norm(v)
    return McEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(trials)), trials)


def tau_estimate(
    model: ModelKind,
    x_star: np.ndarray,
    h: np.ndarray,
    samples: int,
    stream: RngStream,
    data_sampler: Callable = _default_data_sampler,
) -> McEstimate:
    """Plain Monte Carlo of E (<grad f(x*), h>)_+ / ||h||."""
    x_star = as_vector(x_star, "x_star")
    h = as_vector(h, "h")
    nh = float(np.linalg.norm(h))
    if nh == 0.0:
        raise ValueError("h must be nonzero")
    gen = stream.generator()
    a_dim = model.a_dim(x_star.shape[0])
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        chunk = min(samples - done, max(1, 4_000_000 // max(a_dim, 1)))
        A = data_sampler(gen, chunk, a_dim)
        pos = np.maximum(model.grad_dots(A, x_star, h), 0.0) / nh
        total += float(pos.sum())
        total_sq += float((pos * pos).sum())
        done += chunk
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return McEstimate(mean, math.sqrt(var / samples), samples)


@dataclass(frozen=True)
class ConeBound:
    """A cone extremum together with the direction of the bound.

    kind 'closed_form_infimum' marks an exact value; 'sampled_upper_bound'
    marks the minimum over finitely many sampled directions, which can only
    overestimate the true infimum.
    """

    value: float
    kind: str


def tau_cone_lower(
    model: ModelKind,
    x_star: np.ndarray,
    spec: AscentConeSpec,
    probes: int = 64,
    samples: int = 100_000,
    stream: RngStream = RngStream(0),
) -> ConeBound:
    """inf_h tau(h) over the cone.

    For the closed-form families tau(h) depends on h only through the
    alignment r and is nondecreasing in it, so plugging the worst admissible
    r into the closed form gives the exact infimum (linear is r-independent).
    A nonpositive value reports that the cone is too wide for this family at
    the given delta; nothing is clamped or guessed. Other families fall back
    to the sampled minimum, an upper bound on the infimum.
    """
    if probes < 1:
        raise ValueError("need probes >= 1")
    x_star = as_vector(x_star, "x_star")
    if model.kind in ("linear", "square", "relu"):
        if model.kind == "linear":
            return ConeBound(1.0 / math.sqrt(2.0 * math.pi), "closed_form_infimum")
        r = spec.r_min()
        u = spec.direction
        n = u.shape[0]
        # build any direction with alignment exactly r to feed the closed form
        perp_idx = int(np.argmin(np.abs(u)))
        w = np.zeros(n)
        w[perp_idx] = 1.0
        w -= (w @ u) * u
        nw = np.linalg.norm(w)
        if nw < 1e-12:  # n = 1: the cone is {r = +-1}
            h = r * u if r != 0 else u
        else:
            h = r * u + math.sqrt(max(0.0, 1.0 - r * r)) * (w / nw)
        return ConeBound(tau_closed_form(model, x_star, h), "closed_form_infimum")
    directions = sample_cone_directions(spec, probes, stream.derive("tau-dirs"))
    best = math.inf
    for i, h in enumerate(directions):
        est = tau_estimate(model, x_star, h, samples, stream.derive("tau-mc", i))
        best = min(best, est.value)
    return ConeBound(best, "sampled_upper_bound")


def sigma_cone_norm(
    spec: AscentConeSpec,
    sigma: SigmaStar,
    probes: int = 64,
    stream: RngStream = RngStream(0),
) -> float:
    """sup_h h' Sigma h / ||h||^2 over the cone, reported conservatively.

    The sampled maximum (plus a power-iteration path projected back into the
    cone by blending toward the ground-truth direction) lower-bounds the
    supremum; the operator norm upper-bounds it. The reported value is the
    sampled maximum capped at the operator norm, so it never exceeds
    ||Sigma|| and equals it whenever the top eigenvector lies in the cone.
    """
    if probes < 1:
        raise ValueError("need probes >= 1")
    directions = list(sample_cone_directions(spec, probes, stream.derive("sigma-dirs")))
    top = sigma.top_direction()
    if top is not None:
        # blend each eigen-direction toward the interior point u just far
        # enough to enter the cone (bisection on the blend weight)
        u = spec.direction
        for cand in (top, -top):
            if cone_contains(spec, cand):
                directions.append(cand)
                continue
            lo_t, hi_t = 0.0, 1.0
            for _ in range(30):
                mid = 0.5 * (lo_t + hi_t)
                blend = (1.0 - mid) * cand + mid * u
                if np.linalg.norm(blend) == 0.0:
                    break
                if cone_contains(spec, blend):
                    hi_t = mid
                else:
                    lo_t = mid
            blend = (1.0 - hi_t) * cand + hi_t * u
            if np.linalg.norm(blend) > 0 and cone_contains(spec, blend):
                directions.append(blend / np.linalg.norm(blend))
    best = 0.0
    for h in directions:
        best = max(best, sigma.quad_form(h) / float(h @ h))
    return min(best, sigma.operator_norm)


@dataclass(frozen=True)
class PTauResult:
    """Sampled tail-alignment probability plus its second-moment floor.

    ``value`` is the minimum over sampled cone directions of
    P(<grad f(x*), h> >= tau ||h||) — an upper bound on the true infimum.
    ``pz_floor`` is the Paley-Zygmund lower bound tau_cone^2 / (4 sigma^2)
    valid at threshold ``pz_tau`` = tau_cone / 2 (None when the family has no
    closed-form constants).
    """

    value: float
    stderr: float
    tau: float
    pz_floor: Optional[float] = None
    pz_tau: Optional[float] = None


def p_tau_estimate(
    model: ModelKind,
    x_star: np.ndarray,
    spec: AscentConeSpec,
    tau: float,
    probes: int = 64,
    samples: int = 100_000,
    stream: RngStream = RngStream(0),
) -> PTauResult:
    """Monte Carlo upper bound on p_tau over the cone at threshold tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x_star = as_vector(x_star, "x_star")
    directions = sample_cone_directions(spec, probes, stream.derive("p-dirs"))
    gen = stream.derive("p-mc").generator()
    a_dim = model.a_dim(x_star.shape[0])
    best_p = math.inf
    best_stderr = 0.0
    done = 0
    hits = np.zeros(len(directions))
    norms = np.linalg.norm(directions, axis=1)
    while done < samples:
        chunk = min(samples - done, max(1, 2_000_000 // max(a_dim, 1)))
        A = gen.standard_normal((chunk, a_dim))
        for i, h in enumerate(directions):
            dots = model.grad_dots(A, x_star, h)
            hits[i] += float(np.count_nonzero(dots >= tau * norms[i]))
        done += chunk
    for i in range(len(directions)):
        p = hits[i] / samples
        if p < best_p:
            best_p = p
            best_stderr = math.sqrt(max(p * (1.0 - p), 0.0) / samples)
    pz_floor = None
    pz_tau = None
    try:
        tau_cone = tau_cone_lower(model, x_star, spec, probes=probes, stream=stream).value
        sigma2 = sigma_cone_norm(
            spec, sigma_star_closed_form(model, x_star), probes=probes, stream=stream
        )
        if tau_cone > 0 and sigma2 > 0:
            pz_floor = tau_cone**2 / (4.0 * sigma2)
            pz_tau = tau_cone / 2.0
    except NoClosedFormError:
        pass
    return PTauResult(best_p, best_stderr, tau, pz_floor, pz_tau)


@dataclass(frozen=True)
class GradMoments:
    """head_sq = E ||grad f(x*) on S||^2; tail_inf_sq = E max off S of grad^2."""

    head_sq: float
    head_stderr: float
    tail_inf_sq: float
    tail_stderr: float
    samples: int


def grad_moment_estimates(
    model: ModelKind,
    x_star: np.ndarray,
    support: np.ndarray,
    samples: int,
    stream: RngStream,
) -> GradMoments:
    """Monte Carlo of the support / off-support gradient moments."""
    x_star = as_vector(x_star, "x_star")
    support = np.asarray(support, dtype=int)
    if support.size == 0:
        raise ValueError("support must be nonempty")
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    n = x_star.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[support] = True
    gen = stream.generator()
    a_dim = model.a_dim(n)
    sums = np.zeros(2)
    sums_sq = np.zeros(2)
    done = 0
    while done < samples:
        chunk = min(samples - done, max(1, 2_000_000 // max(n, 1)))
        A = gen.standard_normal((chunk, a_dim))
        G = model.gradients(A, x_star)
        head = np.sum(G[:, mask] ** 2, axis=1)
        tail = np.max(G[:, ~mask] ** 2, axis=1) if (~mask).any() else np.zeros(chunk)
        sums += [head.sum(), tail.sum()]
        sums_sq += [(head * head).sum(), (tail * tail).sum()]
        done += chunk
    means = sums / samples
    variances = np.maximum(sums_sq / samples - means**2, 0.0)
    stderrs = np.sqrt(variances / samples)
    return GradMoments(
        head_sq=float(means[0]),
        head_stderr=float(stderrs[0]),
        tail_inf_sq=float(means[1]),
        tail_stderr=float(stderrs[1]),
        samples=samples,
    )


def c_star_sparse(delta: float, lam: float, x_star: np.ndarray) -> float:
    """Geometry constant sqrt(2e) ( sqrt(1-delta^2)/lam
    + || delta x*/||x*|| - lam sign(x*) ||_2 / lam ) of the l1 cone."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    x_star = as_vector(x_star, "x_star")
    nx = np.linalg.norm(x_star)
    if nx == 0.0:
        raise ValueError("x_star must be nonzero")
    mismatch = float(np.linalg.norm(delta * x_star / nx - lam * np.sign(x_star)))
    return math.sqrt(2.0 * math.e) * (math.sqrt(max(0.0, 1.0 - delta**2)) / lam + mismatch / lam)


@dataclass(frozen=True)
class BoundReport:
    """Literal evaluation of a sample-size requirement and error coefficient.

    ``error_coefficient`` multiplies (mean |noise| + budget slack) to bound
    the recovery error; ``inputs`` echoes everything that entered the formula.
    """

    m_required: float
    error_coefficient: float
    inputs: dict = field(default_factory=dict, compare=False)

    def to_json_dict(self) -> dict:
        return {
            "m_required": self.m_required,
            "error_coefficient": self.error_coefficient,
            "inputs": self.inputs,
        }


def _check_positive(**kwargs) -> None:
    for name, val in kwargs.items():
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")


def bound_thm1(c_m: float, tau: float, p_tau: float, t: float) -> BoundReport:
    """M >= 4 ((2 c_m + t tau) / (tau p_tau))^2, error coefficient 2/(tau p_tau)."""
    _check_positive(c_m=c_m, tau=tau, p_tau=p_tau)
    if not 0.0 < p_tau <= 1.0:
        raise ValueError(f"p_tau must lie in (0, 1], got {p_tau}")
    if t < 0:
        raise ValueError("t must be nonnegative")
    m_required = 4.0 * ((2.0 * c_m + t * tau) / (tau * p_tau)) ** 2
    coeff = 2.0 / (tau * p_tau)
    return BoundReport(m_required, coeff, {"c_m": c_m, "tau": tau, "p_tau": p_tau, "t": t})


def bound_cor2(c_m: float, tau_cone: float, sigma2: float, t: float) -> BoundReport:
    """M >= 64 sigma2^2/tau^4 (4 c_m/tau + t)^2, coefficient 16 sigma2/tau^3."""
    _check_positive(c_m=c_m, tau_cone=tau_cone, sigma2=sigma2)
    if t < 0:
        raise ValueError("t must be nonnegative")
    m_required = 64.0 * sigma2**2 / tau_cone**4 * (4.0 * c_m / tau_cone + t) ** 2
    coeff = 16.0 * sigma2 / tau_cone**3
    return BoundReport(
        m_required, coeff, {"c_m": c_m, "tau_cone": tau_cone, "sigma2": sigma2, "t": t}
    )


def bound_cor3(sigma_norm: float, sigma_trace: float, tau_cone: float, t: float) -> BoundReport:
    """M >= 64 ||Sigma||^2/tau^4 (4 sqrt(tr Sigma)/tau + t)^2, coeff 16 ||Sigma||/tau^3."""
    _check_positive(sigma_norm=sigma_norm, sigma_trace=sigma_trace, tau_cone=tau_cone)
    if t < 0:
        raise ValueError("t must be nonnegative")
    m_required = (
        64.0
        * sigma_norm**2
        / tau_cone**4
        * (4.0 * math.sqrt(sigma_trace) / tau_cone + t) ** 2
    )
    coeff = 16.0 * sigma_norm / tau_cone**3
    return BoundReport(
        m_required,
        coeff,
        {"sigma_norm": sigma_norm, "sigma_trace": sigma_trace, "tau_cone": tau_cone, "t": t},
    )


def bound_cor4(
    grad_head_sq: float,
    grad_tail_inf_sq: float,
    c_star: float,
    tau_cone: float,
    sigma2: float,
    n: int,
    t: float,
) -> BoundReport:
    """Sparse-cone sample requirement with the sqrt(log n) tail factor.

    M >= 64 sigma2^2/tau^4 ((4 sqrt(head) + 4 c_star sqrt(log n * tail))/tau + t)^2
    with error coefficient 16 sigma2 / tau^3.
    """
    _check_positive(grad_head_sq=grad_head_sq, tau_cone=tau_cone, sigma2=sigma2)
    if grad_tail_inf_sq < 0 or c_star < 0:
        raise ValueError("tail moment and c_star must be nonnegative")
    if n < 2:
        raise ValueError("need n >= 2")
    if t < 0:
        raise ValueError("t must be nonnegative")
    head_term = 4.0 * math.sqrt(grad_head_sq)
    tail_term = 4.0 * c_star * math.sqrt(math.log(n) * grad_tail_inf_sq)
    m_required = 64.0 * sigma2**2 / tau_cone**4 * ((head_term + tail_term) / tau_cone + t) ** 2
    coeff = 16.0 * sigma2 / tau_cone**3
    return BoundReport(
        m_required,
        coeff,
        {
            "grad_head_sq": grad_head_sq,
            "grad_tail_inf_sq": grad_tail_inf_sq,
            "c_star": c_star,
            "tau_cone": tau_cone,
            "sigma2": sigma2,
            "n": n,
            "t": t,
        },
    )
