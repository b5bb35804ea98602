"""Mixed-kernel linear-in-parameters regression of an unknown stage cost.

Each of the S features sums p kernels anchored at a centre ``w_i``. Weights
are trained online by stochastic gradient descent on the squared error.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Kernel:
    """``gaussian``: exp(-|w - c|^2 / (2 sigma^2)).
    ``polynomial``: (scale * <c, w> + offset) ** degree.
    """

    kind: str
    sigma: float = 1.0
    scale: float = 1.0
    offset: float = 0.0
    degree: int = 1

    def __post_init__(self):
        if self.kind not in ("gaussian", "polynomial"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    def __call__(self, center: np.ndarray, w: np.ndarray) -> float:
        if self.kind == "gaussian":
            diff = w - center
            return float(np.exp(-(diff @ diff) / (2.0 * self.sigma**2)))
        return float((self.scale * (center @ w) + self.offset) ** self.degree)

    def gradient(self, center: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            diff = w - center
            return -diff / self.sigma**2 * np.exp(-(diff @ diff) / (2.0 * self.sigma**2))
        base = self.scale * (center @ w) + self.offset
        return self.degree * base ** (self.degree - 1) * self.scale * center


@dataclass(frozen=True)
class KernelBasis:
    centers: np.ndarray  # (S, n + m)
    kernels: tuple  # p kernels shared by every component

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if c.shape[0] < 1 or len(self.kernels) < 1:
            raise ValueError("basis needs at least one component and one kernel")

    @property
    def S(self) -> int:
        return self.centers.shape[0]

    @property
    def p(self) -> int:
        return len(self.kernels)

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "kernels": [k.__dict__.copy() for k in self.kernels],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelBasis":
        return cls(np.asarray(data["centers"], dtype=float), tuple(Kernel(**k) for k in data["kernels"]))


def mixed_kernels(sigma: float = 1.2247, offset: float = 0.05, scale: float = 0.1, degree: int = 2) -> tuple:
    """One Gaussian plus polynomial kernels of degree 1..``degree``."""
    return (Kernel("gaussian", sigma=sigma),) + tuple(
        Kernel("polynomial", scale=scale, offset=offset, degree=j) for j in range(1, degree + 1)
    )


def latin_hypercube_centers(lower, upper, count: int, seed: int) -> np.ndarray:
    sampler = qmc.LatinHypercube(d=len(lower), seed=seed)
    return qmc.scale(sampler.random(count), lower, upper)


def featurize(basis: KernelBasis, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([sum(k(c, w) for k in basis.kernels) for c in basis.centers])


def feature_jacobian(basis: KernelBasis, w) -> np.ndarray:
    """d featurize / d w, shape (S, n + m)."""
    w = np.asarray(w, dtype=float)
    return np.array([sum(k.gradient(c, w) for k in basis.kernels) for c in basis.centers])


def stable_rate(basis: KernelBasis, lower, upper, count: int = 2000, seed: int = 0) -> float:
    """``1 / max |phi(w)|^2`` over a Latin-hypercube sample of the box.

    With this ``gamma0`` no single SGD step overshoots its own sample.
    """
    W = latin_hypercube_centers(lower, upper, count, seed)
    return 1.0 / max(float(featurize(basis, w) @ featurize(basis, w)) for w in W)


def inverse_sqrt_rate(gamma0: float) -> Callable[[int], float]:
    return lambda k: gamma0 / np.sqrt(k)


@dataclass(frozen=True)
class RegressorModel:
    basis: KernelBasis
    theta: np.ndarray
    gamma0: float = 0.05
    frozen: bool = False
    rate: Optional[Callable[[int], float]] = field(default=None, compare=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        if theta.size != self.basis.S:
            raise ValueError("theta length must equal the number of components")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        object.__setattr__(self, "theta", theta)

    def gamma(self, k: int) -> float:
        value = self.rate(k) if self.rate is not None else self.gamma0 / np.sqrt(k)
        if value <= 0:
            raise ValueError("learning rate must be positive")
        return float(value)

    def freeze(self) -> "RegressorModel":
        return replace(self, frozen=True)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "theta": self.theta.tolist(),
            "gamma0": self.gamma0,
            "frozen": self.frozen,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegressorModel":
        return cls(
            KernelBasis.from_dict(data["basis"]),
            np.asarray(data["theta"], dtype=float),
            gamma0=float(data.get("gamma0", 0.05)),
            frozen=bool(data.get("frozen", False)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "RegressorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def new_regressor(basis: KernelBasis, seed: int, gamma0: float = 0.05, init_scale: float = 1.0) -> RegressorModel:
    theta = init_scale * np.random.default_rng(seed).standard_normal(basis.S)
    return RegressorModel(basis, theta, gamma0=gamma0)


def predict(model: RegressorModel, w) -> float:
    return float(model.theta @ featurize(model.basis, w))


def predict_with_gradient(model: RegressorModel, w) -> tuple[float, np.ndarray]:
    """Prediction and its gradient with respect to ``w``."""
    return predict(model, w), model.theta @ feature_jacobian(model.basis, w)


@dataclass(frozen=True)
class Sample:
    w: np.ndarray
    y: float


def update(model: RegressorModel, sample: Sample, k: int) -> RegressorModel:
    """One SGD step on ``0.5 (y_hat - y)^2`` with rate ``gamma_k``."""
    if model.frozen:
        logger.debug("regressor is frozen; update ignored")
        return model
    if k < 1:
        raise ValueError("update index k must be >= 1")
    phi = featurize(model.basis, sample.w)
    residual = float(model.theta @ phi) - float(sample.y)
    if residual == 0.0:
        return model
    return replace(model, theta=model.theta - model.gamma(k) * phi * residual)


def test_error(model: RegressorModel, samples) -> float:
    """Mean squared prediction error over ``samples``."""
    samples = list(samples)
    if not samples:
        raise ValueError("test set is empty")
    return float(np.mean([(predict(model, s.w) - s.y) ** 2 for s in samples]))


test_error.__test__ = False  # keep pytest from collecting it


def fit_least_squares(basis: KernelBasis, samples) -> np.ndarray:
    """Batch least-squares weights; used as an offline reference."""
    Phi = np.array([featurize(basis, s.w) for s in samples])
    y = np.array([s.y for s in samples])
    return np.linalg.lstsq(Phi, y, rcond=None)[0]
