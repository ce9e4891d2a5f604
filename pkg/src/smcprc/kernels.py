"""Mutation kernels, backward-kernel choice, distances, and ABC weighting.

The mutation kernels are *global* mixtures: a draw does not depend on the
particle being replaced, only on the previous population, which makes the
proposal a weighted kernel density estimate of the previous target. Density
evaluation is the hot loop of the whole sampler, so both families reduce
their component exponents to matrix-vector products against precomputed
coefficient arrays.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import gammaln

__all__ = [
    "AbsoluteDistance",
    "BackwardKernelChoice",
    "EuclideanDistance",
    "GammaMixtureKernel",
    "GaussianMixtureKernel",
    "GlobalMixtureKernel",
    "MahalanobisDistance",
    "WeightingDensity",
]


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise max-shifted logsumexp (all -inf rows stay -inf)."""
    m = a.max(axis=1)
    with np.errstate(invalid="ignore"):
        s = np.exp(a - m[:, None]).sum(axis=1)
        out = m + np.log(s)
    return np.where(np.isneginf(m), -np.inf, out)


class BackwardKernelChoice(enum.Enum):
    """Backward-kernel convention the engine weights are derived under.

    Only the variance-minimising choice for a global mutation kernel is
    implemented; it collapses the incremental weight to target/proposal.
    """

    L_OPT_GLOBAL = "l_opt_global"


# --------------------------------------------------------------------------
# mixture kernels
# --------------------------------------------------------------------------


class GlobalMixtureKernel:
    """Shared state of a component mixture over the previous population."""

    def __init__(self, centers, weights):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        weights = np.asarray(weights, dtype=float)
        if centers.shape[0] != weights.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(weights < 0):
            raise ValueError("component weights must be non-negative")
        total = weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights must sum to 1, got {total!r}")
        self.centers = centers
        self.weights = weights / total
        with np.errstate(divide="ignore"):
            self._log_weights = np.log(self.weights)
        self._cdf = np.cumsum(self.weights)
        self._cdf[-1] = 1.0  # guard the last bin against rounding
        self._cdf_list = self._cdf.tolist()

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def _pick_component(self, rng: np.random.Generator) -> int:
        # inverse-CDF draw; rng.choice rebuilds its lookup table per call,
        # which dominates the mutation loop for populations of thousands
        return bisect.bisect_right(self._cdf_list, rng.random())

    # single-point conveniences over the batch implementation
    def log_density(self, x) -> float:
        return float(self.log_density_batch(np.asarray(x, dtype=float)[None, :])[0])

    def density(self, x) -> float:
        return float(np.exp(self.log_density(x)))


class GaussianMixtureKernel(GlobalMixtureKernel):
    """Gaussian KDE: equal per-dimension variance tau_sq for every component."""

    def __init__(self, centers, weights, tau_sq=1.0):
        super().__init__(centers, weights)
        tau = np.broadcast_to(np.asarray(tau_sq, dtype=float), (self.dim,)).copy()
        if np.any(tau <= 0):
            raise ValueError("tau_sq must be strictly positive")
        self.tau_sq = tau
        self._sd = np.sqrt(tau)
        self._inv_var = 1.0 / tau
        # exponent: -0.5*sum((x-c)^2/tau) = -0.5*xq + x.(c/tau) - 0.5*cq
        self._c_over_var = self.centers * self._inv_var  # (K, d)
        self._c_quad = np.einsum("kd,kd->k", self.centers, self._c_over_var)
        self._log_norm = 0.5 * np.sum(np.log(2.0 * np.pi * tau))
        # everything that does not depend on the evaluation point, folded once
        self._comp_const = self._log_weights - 0.5 * self._c_quad - self._log_norm

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        j = self._pick_component(rng)
        return self.centers[j] + self._sd * rng.standard_normal(self.dim)

    def sample_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = np.searchsorted(self._cdf, rng.random(size), side="right")
        return self.centers[idx] + self._sd * rng.standard_normal((size, self.dim))

    def log_density_batch(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x_quad = np.einsum("bd,d,bd->b", pts, self._inv_var, pts)
        comp = pts @ self._c_over_var.T  # (B, K)
        comp += self._comp_const
        comp -= 0.5 * x_quad[:, None]
        return _logsumexp_rows(comp)


class GammaMixtureKernel(GlobalMixtureKernel):
    """Gamma mixture with component means equal to the centers.

    Each component is a product of independent gammas per dimension with
    shape = center^2 / v and rate = center / v, so mean = center and
    variance = v. By default v = 4 * center^2 per dimension (coefficient of
    variation 2, a deliberately diffuse choice); pass ``variance`` to
    override with a scalar, per-dimension vector, or full (K, d) array.
    """

    def __init__(self, centers, weights, variance=None):
        super().__init__(centers, weights)
        if np.any(self.centers <= 0):
            raise ValueError("gamma mixture centers must be strictly positive")
        if variance is None:
            var = 4.0 * self.centers**2
        else:
            var = np.broadcast_to(np.asarray(variance, dtype=float), self.centers.shape).copy()
        if np.any(var <= 0):
            raise ValueError("gamma variance must be strictly positive")
        self.variance = var
        self._shape = self.centers**2 / var  # (K, d)
        self._rate = self.centers / var
        self._scale = 1.0 / self._rate
        # log pdf = [a log b - lgamma(a)] + (a-1) log x - b x, summed over d
        self._log_norm = np.sum(
            self._shape * np.log(self._rate) - gammaln(self._shape), axis=1
        )  # (K,)
        self._shape_m1 = self._shape - 1.0

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        j = self._pick_component(rng)
        return rng.gamma(self._shape[j], self._scale[j])

    def sample_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = np.searchsorted(self._cdf, rng.random(size), side="right")
        return rng.gamma(self._shape[idx], self._scale[idx])

    def log_density_batch(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.full(pts.shape[0], -np.inf)
        ok = np.all(pts > 0, axis=1)
        if not np.any(ok):
            return out
        good = pts[ok]
        logs = np.log(good)
        comp = (
            self._log_weights[None, :]
            + self._log_norm[None, :]
            + logs @ self._shape_m1.T
            - good @ self._rate.T
        )
        out[ok] = _logsumexp_rows(comp)
        return out


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------


class _Distance:
    kind = "base"

    def _diff(self, a, b) -> np.ndarray:
        # skip the coercion dance when both sides are already aligned arrays,
        # which is every call from inside the sampler loop
        if type(a) is np.ndarray and type(b) is np.ndarray and a.shape == b.shape:
            return a - b
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        return a - b

    def __call__(self, a, b) -> float:
        raise NotImplementedError

    def evaluate(self, a, b) -> float:
        return self(a, b)


class AbsoluteDistance(_Distance):
    """Sum of absolute coordinate differences (plain |a-b| for scalars)."""

    kind = "absolute"

    def __call__(self, a, b) -> float:
        return float(np.abs(self._diff(a, b)).sum())


class EuclideanDistance(_Distance):
    kind = "euclidean"

    def __call__(self, a, b) -> float:
        return float(np.linalg.norm(self._diff(a, b)))


class MahalanobisDistance(_Distance):
    """sqrt((a-b)' Sigma^-1 (a-b)); Sigma factorised once at construction."""

    kind = "mahalanobis"

    def __init__(self, covariance):
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 1:
            cov = np.diag(cov)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        self._diag_inv_sd = None
        diag = np.diag(cov)
        if np.count_nonzero(cov - np.diag(diag)) == 0:
            if np.any(diag <= 0):
                raise ValueError("covariance must be positive definite")
            self._diag_inv_sd = 1.0 / np.sqrt(diag)
            self._chol = None
        else:
            try:
                self._chol = cholesky(cov, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("covariance must be positive definite") from exc
        self.covariance = cov

    def __call__(self, a, b) -> float:
        d = self._diff(a, b)
        if self._diag_inv_sd is not None:
            z = d * self._diag_inv_sd
        else:
            z = solve_triangular(self._chol, d, lower=True)
        return math.sqrt(float(np.dot(z, z)))


# --------------------------------------------------------------------------
# ABC weighting density
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightingDensity:
    """Smoothing kernel on the distance between observed and synthetic summaries.

    ``uniform`` is the 0/1 indicator of distance <= epsilon; ``gaussian`` is
    the unnormalised exp(-rho^2 / (2 epsilon^2)) (normalising constants
    cancel in the importance weights). ``epsilon = inf`` is the explicit
    "accept everything with density 1" sentinel. The tolerance may be fixed
    here or supplied per evaluation (schedules own the per-step epsilon).
    """

    kind: str
    distance: _Distance
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive (or +inf)")

    def evaluate(self, summary_obs, summary_sim, epsilon: float | None = None) -> float:
        eps = self.epsilon if epsilon is None else epsilon
        if eps is None:
            raise ValueError("no tolerance configured or supplied")
        if not eps > 0:
            raise ValueError("epsilon must be positive (or +inf)")
        if eps == np.inf:
            return 1.0
        rho = self.distance(summary_obs, summary_sim)
        if self.kind == "uniform":
            return 1.0 if rho <= eps else 0.0
        return math.exp(-(rho**2) / (2.0 * eps**2))
