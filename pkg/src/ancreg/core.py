"""Core types: observation instances, deterministic random streams, one-sided risk.

Vectors throughout the package are one-dimensional float64 numpy arrays.
All functions here are pure; instances are frozen after construction and safe
to share across worker processes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - import only for annotations
    from .models import ModelKind

__all__ = [
    "RngStream",
    "ProblemInstance",
    "DegenerateDataError",
    "gaussian_vector",
    "one_sided_risk",
    "one_sided_risk_subgradient",
    "as_vector",
]


class DegenerateDataError(RuntimeError):
    """Raised when the observed data carries no usable signal (e.g. all zero)."""


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, raising ValueError otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must have finite entries")
    return arr


@dataclass(frozen=True)
class RngStream:
    """Deterministic, splittable random stream.

    Backed by the counter-based Philox generator keyed on
    (base_seed, stream_index), so the same pair always reproduces the same
    draws and distinct stream indices give statistically independent streams.
    Derived streams (one per trial/cell) are a pure function of the parent
    stream and the derivation tags, which keeps parallel execution
    schedule-independent.
    """

    base_seed: int
    stream_index: int = 0

    algorithm = "philox4x64"

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array(
            [self.base_seed % (1 << 64), self.stream_index % (1 << 64)],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *tags) -> "RngStream":
        """Child stream keyed on (this stream, tags); pure and collision-resistant.

        Tags may be ints or strings; their repr feeds a SHA-256 whose first
        8 bytes become the child's stream index.
        """
        payload = repr((self.base_seed, self.stream_index) + tuple(tags))
        digest = hashlib.sha256(payload.encode("utf-8")).digest()
        return RngStream(self.base_seed, int.from_bytes(digest[:8], "little"))


def gaussian_vector(stream: RngStream, n: int) -> np.ndarray:
    """n independent standard normal draws, deterministic per stream."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return stream.generator().standard_normal(n)


@dataclass(frozen=True)
class ProblemInstance:
    """A system of convex observations y_m = f_m(x*) + noise_m.

    ``data`` holds the sample vectors a_m as rows (shape M x d); ``y`` the
    observed values. ``x_star`` and ``noise`` are present in simulation and
    absent in deploy mode. When both are stored, y reconstructs exactly as
    f(x_star) + noise.
    """

    model: "ModelKind"
    data: np.ndarray
    y: np.ndarray
    x_star: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    seed_info: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        y = as_vector(self.y, "y")
        if data.ndim != 2:
            raise ValueError(f"data must be an M x d array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("data must have finite entries")
        if data.shape[0] != y.shape[0]:
            raise ValueError(
                f"count mismatch: {data.shape[0]} data rows vs {y.shape[0]} observations"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "y", y)
        if self.x_star is not None:
            x_star = as_vector(self.x_star, "x_star")
            if x_star.shape[0] != self.model.x_dim(data.shape[1]):
                raise ValueError(
                    f"x_star has length {x_star.shape[0]}, expected "
                    f"{self.model.x_dim(data.shape[1])}"
                )
            object.__setattr__(self, "x_star", x_star)
        if self.noise is not None:
            noise = as_vector(self.noise, "noise")
            if noise.shape[0] != y.shape[0]:
                raise ValueError("noise must have one entry per observation")
            object.__setattr__(self, "noise", noise)

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        """Dimension of the unknown (block count times data dimension)."""
        return self.model.x_dim(self.data.shape[1])

    def check_dim(self, x: np.ndarray) -> np.ndarray:
        x = as_vector(x, "x")
        if x.shape[0] != self.n:
            raise ValueError(f"x has length {x.shape[0]}, instance expects {self.n}")
        return x

    def to_json_dict(self) -> dict:
        doc = {
            "model": self.model.to_json_dict(),
            "n": self.n,
            "m": self.m,
            "seed": self.seed_info,
            "data": self.data.ravel().tolist(),  # row-major
            "y": self.y.tolist(),
        }
        doc["x_star"] = None if self.x_star is None else self.x_star.tolist()
        doc["noise"] = None if self.noise is None else self.noise.tolist()
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "ProblemInstance":
        from .models import ModelKind

        model = ModelKind.from_json_dict(doc["model"])
        m = int(doc["m"])
        data = np.asarray(doc["data"], dtype=np.float64).reshape(m, -1)
        return ProblemInstance(
            model=model,
            data=data,
            y=np.asarray(doc["y"], dtype=np.float64),
            x_star=None if doc.get("x_star") is None else np.asarray(doc["x_star"], dtype=np.float64),
            noise=None if doc.get("noise") is None else np.asarray(doc["noise"], dtype=np.float64),
            seed_info=doc.get("seed"),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load(path) -> "ProblemInstance":
        with open(path) as fh:
            return ProblemInstance.from_json_dict(json.load(fh))


def one_sided_risk(x: np.ndarray, instance: ProblemInstance) -> float:
    """Average positive part of the residuals, (1/M) sum (f_m(x) - y_m)_+.

    Convex in x and nonnegative; zero exactly on the feasible set
    {x : f_m(x) <= y_m for all m}.
    """
    x = instance.check_dim(x)
    residual = instance.model.values(instance.data, x) - instance.y
    return float(np.mean(np.maximum(residual, 0.0)))


def one_sided_risk_subgradient(x: np.ndarray, instance: ProblemInstance) -> np.ndarray:
    """A subgradient of the one-sided risk: (1/M) sum over strict violations of grad f_m(x).

    Ties f_m(x) == y_m contribute zero, the simplest member of the
    subdifferential there; strictly feasible points map to the zero vector.
    """
    x = instance.check_dim(x)
    residual = instance.model.values(instance.data, x) - instance.y
    active = residual > 0.0
    if not np.any(active):
        return np.zeros(instance.n)
    weights = active.astype(np.float64)
    return instance.model.grad_weighted_sum(instance.data, x, weights) / instance.m
