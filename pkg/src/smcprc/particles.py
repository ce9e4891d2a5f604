"""Weighted particle populations and the operations every sampler step uses.

Weights live in the log domain throughout: exact zeros are the ``-inf``
sentinel, and normalisation shifts by the max log-weight before
exponentiating, so uniform-kernel ABC weights (which are mostly exact zeros
with a huge dynamic range on the survivors) stay well behaved.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DegeneratePopulationError",
    "ParticleSystem",
    "ResampleConfig",
    "effective_sample_size",
    "resample_multinomial",
    "weighted_quantile",
]


class DegeneratePopulationError(RuntimeError):
    """Raised when every particle carries zero weight."""


def _as_values(values) -> np.ndarray:
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.ndim != 2 or vals.shape[0] < 1:
        raise ValueError(f"values must be (N, d) with N >= 1, got shape {vals.shape}")
    return vals


@dataclass(frozen=True)
class ParticleSystem:
    """A weighted population at one step of a sampler.

    Attributes
    ----------
    values : ndarray, shape (N, d)
        Particle locations.
    log_weights : ndarray, shape (N,)
        Unnormalised log-weights; ``-inf`` marks an exact zero.
    step : int
        Step index t >= 1.
    normalized : bool
        True once weights sum to one (within 1e-12).
    """

    values: np.ndarray
    log_weights: np.ndarray
    step: int = 1
    normalized: bool = False

    def __post_init__(self):
        vals = _as_values(self.values)
        logw = np.asarray(self.log_weights, dtype=float)
        if logw.shape != (vals.shape[0],):
            raise ValueError(
                f"log_weights shape {logw.shape} does not match {vals.shape[0]} particles"
            )
        if np.any(np.isnan(logw)) or np.any(logw == np.inf):
            raise ValueError("log_weights must be finite or -inf")
        if self.step < 1:
            raise ValueError("step index starts at 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "log_weights", logw)

    @classmethod
    def from_weights(cls, values, weights, step: int = 1) -> "ParticleSystem":
        """Build from linear-domain non-negative weights."""
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        sys = cls(values=values, log_weights=logw, step=step)
        if abs(w.sum() - 1.0) <= 1e-12:
            sys = replace(sys, normalized=True)
        return sys

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Linear-domain weights (sum to 1 when ``normalized``)."""
        return np.exp(self.log_weights)

    def normalize(self) -> "ParticleSystem":
        """Return a copy whose weights sum to one."""
        if self.normalized:
            return self
        total = logsumexp(self.log_weights)
        if total == -np.inf:
            raise DegeneratePopulationError("degenerate population: all weights zero")
        return replace(self, log_weights=self.log_weights - total, normalized=True)

    def weighted_mean(self) -> np.ndarray:
        w = self.normalize().weights
        return w @ self.values

    def weighted_var(self) -> np.ndarray:
        """Weighted population variance per dimension."""
        w = self.normalize().weights
        mean = w @ self.values
        return w @ (self.values - mean) ** 2


@dataclass(frozen=True)
class ResampleConfig:
    """Resampling scheme and trigger.

    ``ess_threshold`` is either a real H in [1, N] (resample when ESS < H)
    or the string ``"always"`` (unconditional selection every step).
    """

    scheme: str = "multinomial"
    ess_threshold: float | str = "always"

    def __post_init__(self):
        if self.scheme != "multinomial":
            raise ValueError(f"unsupported resampling scheme {self.scheme!r}")
        if isinstance(self.ess_threshold, str):
            if self.ess_threshold != "always":
                raise ValueError("ess_threshold must be a real or 'always'")
        elif self.ess_threshold < 1:
            raise ValueError("ess_threshold must be >= 1")


def effective_sample_size(sys: ParticleSystem) -> float:
    """ESS = 1 / sum(W_i^2) of the normalised weights; lies in [1, N]."""
    logw = sys.normalize().log_weights
    return float(np.exp(-logsumexp(2.0 * logw)))


def resample_multinomial(sys: ParticleSystem, rng: np.random.Generator) -> ParticleSystem:
    """Draw N particles i.i.d. with replacement; output weights all 1/N."""
    norm = sys.normalize()
    probs = norm.weights
    probs = probs / probs.sum()  # guard fp drift for the multinomial call
    counts = rng.multinomial(norm.n, probs)
    idx = np.repeat(np.arange(norm.n), counts)
    return ParticleSystem(
        values=norm.values[idx],
        log_weights=np.full(norm.n, -np.log(norm.n)),
        step=norm.step,
        normalized=True,
    )


def weighted_quantile(values, q: float) -> float:
    """q-th quantile of the strictly positive entries of ``values``.

    Linear interpolation between order statistics; entries <= 0 are dropped
    first (zero weights never define a threshold).
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must be in [0, 1], got {q}")
    vals = np.asarray(values, dtype=float)
    positive = vals[vals > 0]
    if positive.size == 0:
        raise DegeneratePopulationError("all weights zero")
    return float(np.quantile(positive, q, method="linear"))
