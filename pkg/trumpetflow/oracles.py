"""
Gaussian Random Field Prior and Exact Posterior

Closed-form reference for linear-Gaussian problems: with x ~ N(mu_x, Sigma_x)
and y = A x + n, n ~ N(0, lambda^2 I), the posterior of x given y is Gaussian
with

    mu_{x|y}    = mu_x + Sigma_x A^T (A Sigma_x A^T + lambda^2 I)^{-1} (y - A mu_x)
    Sigma_{x|y} = Sigma_x - Sigma_x A^T (A Sigma_x A^T + lambda^2 I)^{-1} A Sigma_x

Both are computed from a Cholesky factorization of the m x m system; no
explicit inverse is formed.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

logger = logging.getLogger(__name__)

GRF_JITTER = 1e-6
SYMMETRY_TOL = 1e-12
SINGULAR_CONDITION = 1e12


class CovarianceNotPSDError(ArithmeticError):
    """Raised when a covariance matrix is not symmetric positive (semi-)definite."""
    pass


class SingularSystemError(ArithmeticError):
    """Raised when A Sigma A^T + lambda^2 I cannot be factorized."""
    pass


def squared_exponential_covariance(n: int, length_scale: float, variance: float = 1.0,
                                   jitter: float = GRF_JITTER) -> np.ndarray:
    """k(p, q) = variance * exp(-|p - q|^2 / (2 l^2)) over the pixel grid, plus diagonal jitter."""
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    coords = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1).astype(np.float64)
    sq_dist = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    return variance * np.exp(-sq_dist / (2.0 * length_scale ** 2)) + jitter * np.eye(n * n)


class GRFPrior:
    """
    Gaussian image prior on an n x n grid with cached lower Cholesky factor.

    Args:
        n: grid side (D = n^2)
        length_scale: kernel correlation length in pixels (default n/8)
        mean: constant or per-pixel prior mean
        variance: kernel amplitude
    """

    def __init__(self, n: int, length_scale: Optional[float] = None, mean=0.0, variance: float = 1.0):
        self.n = n
        self.length_scale = float(length_scale) if length_scale is not None else n / 8.0
        covariance = squared_exponential_covariance(n, self.length_scale, variance)
        self._set(np.broadcast_to(np.asarray(mean, dtype=np.float64), (n * n,)).copy(), covariance)

    @classmethod
    def from_covariance(cls, mean, covariance) -> "GRFPrior":
        """Prior with an explicit mean vector and covariance matrix (grid side inferred when square)."""
        covariance = np.asarray(covariance, dtype=np.float64)
        prior = cls.__new__(cls)
        dim = covariance.shape[0]
        side = int(round(np.sqrt(dim)))
        prior.n = side if side * side == dim else dim
        prior.length_scale = float("nan")
        prior._set(np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,)).copy(), covariance)
        return prior

    def _set(self, mean: np.ndarray, covariance: np.ndarray):
        if covariance.ndim != 2 or covariance.shape[0] != covariance.shape[1]:
            raise CovarianceNotPSDError(f"covariance must be square, got shape {covariance.shape}")
        asymmetry = np.max(np.abs(covariance - covariance.T)) if covariance.size else 0.0
        if asymmetry > SYMMETRY_TOL:
            raise CovarianceNotPSDError(f"covariance is not symmetric (max asymmetry {asymmetry:.3e})")
        try:
            self.cholesky = sla.cholesky(covariance, lower=True)
        except np.linalg.LinAlgError as e:
            raise CovarianceNotPSDError(f"Cholesky factorization of the prior covariance failed: {e}")
        self.mean = mean
        self.covariance = covariance

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """x = mu + L xi, xi ~ N(0, I); returns (count, D)."""
        xi = rng.standard_normal((count, self.dim))
        return self.mean + xi @ self.cholesky.T

    def kernel_value(self, lag: float) -> float:
        """Correlation at a pixel lag (kernel without jitter)."""
        return float(np.exp(-lag ** 2 / (2.0 * self.length_scale ** 2)))


def grf_sample(prior: GRFPrior, count: int, rng: np.random.Generator) -> np.ndarray:
    return prior.sample(count, rng)


@dataclass
class GaussianPosterior:
    """
    Exact posterior. `mean` is (D,) for one measurement or (B, D) for a
    batch; the covariance does not depend on y and is shared.
    """
    mean: np.ndarray
    covariance: np.ndarray

    def std(self) -> np.ndarray:
        """Pixel-wise posterior standard deviation."""
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def factor(self) -> np.ndarray:
        """Lower Cholesky factor, adding growing jitter for PSD-but-singular covariances."""
        dim = self.covariance.shape[0]
        scale = max(float(np.trace(self.covariance)) / max(dim, 1), 1e-300)
        jitter = 0.0
        for _ in range(8):
            try:
                return sla.cholesky(self.covariance + jitter * np.eye(dim), lower=True)
            except np.linalg.LinAlgError:
                jitter = scale * 1e-12 if jitter == 0.0 else jitter * 10.0
        raise CovarianceNotPSDError("posterior covariance could not be factorized even with jitter")

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """mu + L xi for one measurement; returns (count, D)."""
        if self.mean.ndim != 1:
            raise ValueError("sample() needs the posterior of a single measurement")
        xi = rng.standard_normal((count, self.covariance.shape[0]))
        return self.mean + xi @ self.factor().T


def analytic_posterior(prior: GRFPrior, forward, y) -> GaussianPosterior:
    """
    Exact posterior of the linear-Gaussian model.

    Args:
        prior: Gaussian prior (mean, covariance)
        forward: object with `matrix` A (m x D) and `noise_std` lambda
        y: measurement, shape (m,) or (B, m)

    Raises:
        SingularSystemError: A Sigma A^T + lambda^2 I is singular (possible when lambda = 0)
    """
    a = np.asarray(forward.matrix, dtype=np.float64)
    lam = float(forward.noise_std)
    y = np.asarray(y, dtype=np.float64)
    if a.shape[1] != prior.dim or y.shape[-1] != a.shape[0]:
        raise ValueError(f"analytic_posterior: A {a.shape}, prior dim {prior.dim}, y {y.shape} do not conform")
    a_sigma = a @ prior.covariance
    system = a_sigma @ a.T + lam ** 2 * np.eye(a.shape[0])
    if lam == 0.0 and np.linalg.cond(system) > SINGULAR_CONDITION:
        raise SingularSystemError("A Sigma A^T is rank deficient and lambda = 0")
    try:
        factor = sla.cho_factor(system, lower=True)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"Cholesky factorization of A Sigma A^T + lambda^2 I failed: {e}")
    # gain = Sigma A^T S^{-1}; S and Sigma are symmetric
    gain = sla.cho_solve(factor, a_sigma).T
    residual = y - prior.mean @ a.T
    mean = prior.mean + residual @ gain.T
    covariance = prior.covariance - gain @ a_sigma
    covariance = 0.5 * (covariance + covariance.T)
    return GaussianPosterior(mean, covariance)
