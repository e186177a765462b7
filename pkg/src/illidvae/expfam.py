"""Exponential families ``h(x) exp(T(x).xi - A(xi))`` used as likelihoods.

Two kinds are supported:

* ``gaussian_fixed_var(sigma, dim)``: ``xi`` is the mean, ``T(x) = x / sigma^2``,
  ``A(xi) = |xi|^2 / (2 sigma^2)``, so ``grad A(xi) = xi / sigma^2 = E[T(x)]``.
  With ``sigma = 1`` this is ``T(x) = x``, ``A = |xi|^2 / 2``.
* ``bernoulli(dim)``: ``xi`` are logits, ``T(x) = x``,
  ``A(xi) = sum softplus(xi)``, ``grad A = sigmoid(xi)``.

Array functions accept a single vector or a batch (rows).  ``log_density_t``
is the autodiff version used inside the ELBO.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ExpFamily:
    kind: str
    dim: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian_fixed_var", "bernoulli"):
            raise ValueError(f"unknown exponential family kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.kind == "gaussian_fixed_var" and not self.sigma > 0:
            raise ValueError("gaussian sigma must be positive")

    @classmethod
    def gaussian(cls, dim: int, sigma: float = 1.0) -> "ExpFamily":
        return cls("gaussian_fixed_var", dim, float(sigma))

    @classmethod
    def bernoulli(cls, dim: int) -> "ExpFamily":
        return cls("bernoulli", dim)

    def _check(self, *arrays) -> None:
        for a in arrays:
            if np.shape(a)[-1] != self.dim:
                raise DimensionError(f"expected trailing dimension {self.dim}, got shape {np.shape(a)}")

    def T(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        if self.kind == "gaussian_fixed_var":
            return x / self.sigma ** 2
        return x

    def A(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        self._check(xi)
        if self.kind == "gaussian_fixed_var":
            return np.sum(xi * xi, axis=-1) / (2.0 * self.sigma ** 2)
        return np.sum(ad._softplus(xi), axis=-1)

    def grad_A(self, xi):
        """Mean map ``xi -> E[T(x)]``."""
        xi = np.asarray(xi, dtype=np.float64)
        self._check(xi)
        if self.kind == "gaussian_fixed_var":
            return xi / self.sigma ** 2
        return ad._sigmoid(xi)

    def log_h(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        if self.kind == "gaussian_fixed_var":
            s2 = self.sigma ** 2
            return -np.sum(x * x, axis=-1) / (2.0 * s2) - 0.5 * self.dim * (LOG_2PI + np.log(s2))
        return np.zeros(x.shape[:-1])

    def log_density(self, x, xi):
        """``log h(x) + T(x).xi - A(xi)``, broadcasting over leading axes."""
        x = np.asarray(x, dtype=np.float64)
        xi = np.asarray(xi, dtype=np.float64)
        self._check(x, xi)
        return self.log_h(x) + np.sum(self.T(x) * xi, axis=-1) - self.A(xi)

    def log_density_t(self, x: np.ndarray, xi: Tensor) -> Tensor:
        """Row-wise log density with gradients flowing into ``xi`` (batch, dim)."""
        x = np.asarray(x, dtype=np.float64)
        if xi.shape != x.shape or x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"log_density_t: x {x.shape} vs xi {xi.shape}, dim {self.dim}")
        if self.kind == "gaussian_fixed_var":
            # log h(x) + T.xi - A(xi) == -|x - xi|^2 / 2s^2 - d/2 log(2 pi s^2)
            s2 = self.sigma ** 2
            resid = ad.sub(Tensor(x), xi)
            const = -0.5 * self.dim * (LOG_2PI + np.log(s2))
            return ad.add(ad.mul(-0.5 / s2, ad.sum_axis(ad.square(resid), 1)), const)
        lin = ad.sum_axis(ad.mul(Tensor(x), xi), 1)
        return ad.sub(lin, ad.sum_axis(ad.softplus(xi), 1))

    def sample(self, xi, rng: np.random.Generator):
        xi = np.asarray(xi, dtype=np.float64)
        self._check(xi)
        if self.kind == "gaussian_fixed_var":
            return xi + self.sigma * rng.standard_normal(xi.shape)
        return (rng.random(xi.shape) < ad._sigmoid(xi)).astype(np.float64)


def score_wrt_latent(ef: ExpFamily, x, xi, jac) -> np.ndarray:
    """``grad_z log p(x|z) = J^T (T(x) - grad A(xi))`` with ``J = d xi / d z``.

    ``xi`` has shape ``(..., t)`` and ``jac`` shape ``(..., t, l)``; ``x``
    broadcasts against ``xi``.  Returns shape ``(..., l)``.
    """
    resid = ef.T(x) - ef.grad_A(xi)
    return np.einsum("...tl,...t->...l", np.asarray(jac), resid)
