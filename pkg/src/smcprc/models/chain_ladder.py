"""Distribution-free chain-ladder claims reserving.

A run-off triangle of cumulative claims develops by
``C_{i,j+1} = f_j C_{i,j} + sigma_j sqrt(C_{i,j}) eps`` with centred
unit-variance residuals. This module provides the classical factor and
variance estimators, the deterministic completion of the lower triangle,
a conditional bootstrap simulator (invert residuals, resample, re-develop),
the prior family over the 2I-dimensional parameter, and the wiring that
turns all of it into a likelihood-free target.

Triangles are stored in $10,000 units; multiply claims by
``DOLLARS_PER_UNIT`` (and sigmas by ``SIGMA_REPORT_SCALE``) for reporting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from ..abc import (
    AbcTarget,
    InitialSampler,
    SimulatorFailure,
    ToleranceSchedule,
    run_prc_abc,
)
from ..engine import PrcPolicy
from ..kernels import GammaMixtureKernel, MahalanobisDistance, WeightingDensity
from ..particles import ParticleSystem
from ..rng import substream

__all__ = [
    "DOLLARS_PER_UNIT",
    "SIGMA_REPORT_SCALE",
    "TABLE1_ANNUAL",
    "BootstrapDraw",
    "ChainLadderParams",
    "ChainLadderPrediction",
    "ChainLadderPriors",
    "ClaimsRunResult",
    "ClaimsTriangle",
    "bootstrap_simulate",
    "calibrate_final_tolerance",
    "chain_ladder_predict",
    "claims_bindings",
    "claims_kernel_builder",
    "claims_mu_sampler",
    "claims_schedule",
    "claims_summary_and_distance",
    "classical_chain_ladder",
    "conditional_residuals",
    "observed_summary_vector",
    "pilot_covariance",
    "reconstruct_triangle",
    "run_claims",
]

DOLLARS_PER_UNIT = 10_000.0
# sigma carries sqrt-of-claims units, so its dollar scale is sqrt(10_000)
SIGMA_REPORT_SCALE = 100.0

# Annual (incremental) claims, $10,000 units, one ragged row per accident
# year; cumulative rows are their running sums.
TABLE1_ANNUAL: tuple[tuple[float, ...], ...] = (
    (594.6975, 372.1236, 89.5717, 20.7760, 20.6704, 6.2124, 6.5813, 1.4850, 1.1130, 1.5813),
    (634.6756, 324.6406, 72.3222, 15.1797, 6.7824, 3.6603, 5.2752, 1.1186, 1.1646),
    (626.9090, 297.6223, 84.7053, 26.2768, 15.2703, 6.5444, 5.3545, 0.8924),
    (586.3015, 268.3224, 72.2532, 19.0653, 13.2976, 8.8340, 4.3329),
    (577.8885, 274.5229, 65.3894, 27.3395, 23.0288, 10.5224),
    (618.4793, 282.8338, 57.2765, 24.4899, 10.4957),
    (560.0184, 289.3207, 56.3114, 22.5517),
    (528.8066, 244.0103, 52.8043),
    (529.0793, 235.7936),
    (567.5568,),
)


# --------------------------------------------------------------------------
# triangle container
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimsTriangle:
    """Upper-left triangle of positive cumulative claims.

    ``cumulative`` is square with NaN below the anti-diagonal; cell (i, j)
    is observed iff i + j <= I. The number of accident years equals the
    number of development periods.
    """

    cumulative: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cumulative, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("cumulative must be a square matrix")
        out = np.full_like(c, np.nan)
        n = c.shape[0]
        for i in range(n):
            row = c[i, : n - i]
            if not np.all(np.isfinite(row)) or np.any(row <= 0):
                raise ValueError(f"accident year {i}: observed claims must be positive")
            out[i, : n - i] = row
        object.__setattr__(self, "cumulative", out)

    @property
    def final_index(self) -> int:
        """I — the last accident-year (and development) index."""
        return self.cumulative.shape[0] - 1

    @property
    def n_years(self) -> int:
        return self.cumulative.shape[0]

    def observed_values(self) -> np.ndarray:
        """Observed cells flattened row by row (the canonical summary order)."""
        n = self.n_years
        return np.concatenate([self.cumulative[i, : n - i] for i in range(n)])

    def latest_diagonal(self) -> np.ndarray:
        """C_{i, I-i} per accident year — the newest observed cell of each row."""
        idx = self.final_index
        return np.array([self.cumulative[i, idx - i] for i in range(self.n_years)])

    @classmethod
    def from_annual(cls, rows: Sequence[Sequence[float]]) -> "ClaimsTriangle":
        """Build from ragged annual (incremental) claims via running sums."""
        n = len(rows)
        c = np.full((n, n), np.nan)
        for i, row in enumerate(rows):
            if len(row) != n - i:
                raise ValueError(f"accident year {i}: expected {n - i} annual values")
            c[i, : n - i] = np.cumsum(np.asarray(row, dtype=float))
        return cls(cumulative=c)

    @classmethod
    def from_csv(cls, path) -> "ClaimsTriangle":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "accident_year":
                raise ValueError("expected header starting with 'accident_year'")
            body = [row for row in reader if row]
        n = len(body)
        c = np.full((n, n), np.nan)
        for line_no, row in enumerate(body):
            i = int(row[0])
            if i != line_no:
                raise ValueError(f"accident years must run 0..{n - 1} in order")
            vals = [float(v) for v in row[1:] if v != ""]
            if len(vals) != n - i:
                raise ValueError(f"accident year {i}: expected {n - i} observed cells")
            c[i, : n - i] = vals
        return cls(cumulative=c)

    def to_csv(self, path) -> None:
        n = self.n_years
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["accident_year"] + [f"dev_{j}" for j in range(n)])
            for i in range(n):
                writer.writerow([i] + [repr(float(v)) for v in self.cumulative[i, : n - i]])


# --------------------------------------------------------------------------
# classical estimators and prediction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainLadderParams:
    """Development factors f_0..f_{I-1} and noise scales sigma_0..sigma_{I-1}.

    ``sigma`` may be None for triangles too small to estimate any variance.
    """

    f: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        if f.ndim != 1 or np.any(f <= 0):
            raise ValueError("factors must be a strictly positive vector")
        object.__setattr__(self, "f", f)
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            if s.shape != f.shape or np.any(s <= 0):
                raise ValueError("sigma must match f's shape and be strictly positive")
            object.__setattr__(self, "sigma", s)

    def as_vector(self) -> np.ndarray:
        if self.sigma is None:
            raise ValueError("sigma unavailable")
        return np.concatenate([self.f, self.sigma])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "ChainLadderParams":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 2:
            raise ValueError("expected a flat (f, sigma) vector of even length")
        k = x.size // 2
        return cls(f=x[:k], sigma=x[k:])


def classical_chain_ladder(tri: ClaimsTriangle) -> ChainLadderParams:
    """Column-ratio factor estimates and the matching variance estimates.

    f_k is the ratio of column sums over rows observed in both columns.
    sigma_k^2 averages C_{i,k} (C_{i,k+1}/C_{i,k} - f_k)^2 over those rows
    with divisor (rows - 1); the final column has a single ratio, so its
    variance slot is filled by the standard log-extrapolation
    min{sigma_{I-2}^4 / sigma_{I-3}^2, sigma_{I-3}^2, sigma_{I-2}^2}.
    """
    c = tri.cumulative
    idx = tri.final_index
    if idx < 1:
        raise ValueError("need at least two accident years")
    f = np.empty(idx)
    for k in range(idx):
        rows = idx - k
        f[k] = c[:rows, k + 1].sum() / c[:rows, k].sum()

    if idx == 1:
        return ChainLadderParams(f=f, sigma=None)

    sig2 = np.empty(idx)
    for k in range(idx - 1):
        rows = idx - k
        dev = c[:rows, k + 1] / c[:rows, k] - f[k]
        sig2[k] = float(np.sum(c[:rows, k] * dev**2)) / (rows - 1)
    if idx >= 3:
        sig2[idx - 1] = min(sig2[idx - 2] ** 2 / sig2[idx - 3], sig2[idx - 3], sig2[idx - 2])
    else:
        sig2[idx - 1] = sig2[idx - 2]  # no older columns to extrapolate from
    return ChainLadderParams(f=f, sigma=np.sqrt(sig2))


@dataclass(frozen=True)
class ChainLadderPrediction:
    """Completed square of claims plus the implied reserves (triangle units)."""

    completed: np.ndarray
    reserves: np.ndarray
    total_reserve: float


def chain_ladder_predict(tri: ClaimsTriangle, params: ChainLadderParams) -> ChainLadderPrediction:
    """Fill the lower triangle by the factor recursion from each diagonal cell."""
    idx = tri.final_index
    if params.f.size != idx:
        raise ValueError(f"expected {idx} factors, got {params.f.size}")
    completed = tri.cumulative.copy()
    for i in range(1, idx + 1):
        for j in range(idx - i, idx):
            completed[i, j + 1] = completed[i, j] * params.f[j]
    reserves = completed[:, idx] - tri.latest_diagonal()
    return ChainLadderPrediction(
        completed=completed, reserves=reserves, total_reserve=float(reserves.sum())
    )


# --------------------------------------------------------------------------
# conditional bootstrap simulator
# --------------------------------------------------------------------------


def _column_offsets(idx: int) -> np.ndarray:
    """Start offsets of each development column in the flat residual layout."""
    lengths = [idx - j for j in range(idx)]
    return np.concatenate([[0], np.cumsum(lengths)])


class _TrianglePlan:
    """Flattened view of a triangle's observed region.

    The recursion walks cells column by column while the summary wants them
    row by row, and both orders depend on the triangle alone. Precomputing
    the data-side arrays and the column-major -> row-major scatter map turns
    each bootstrap draw into a few vectorised passes with no square-matrix
    bookkeeping — this is the simulator's hot path.
    """

    def __init__(self, tri: ClaimsTriangle):
        c = tri.cumulative
        idx = tri.final_index
        self.idx = idx
        self.offsets = _column_offsets(idx)
        self.n_cells = int(self.offsets[-1])
        col = np.repeat(np.arange(idx), np.arange(idx, 0, -1))
        row = np.concatenate([np.arange(idx - j) for j in range(idx)])
        self.col = col
        self.succ = c[row, col + 1]  # C_{i,j+1}, flat column-major
        self.base = c[row, col]  # C_{i,j}
        self.sqrt_base = np.sqrt(self.base)
        self.col0 = c[:, 0].copy()
        n = idx + 1
        row_starts = np.concatenate([[0], np.cumsum(n - np.arange(n))])
        self.template = np.zeros(int(row_starts[-1]) + 2)
        self.template[row_starts[:-1]] = self.col0  # column 0 is conditioned on
        self.scatter = row_starts[row] + col + 1

    def invert(self, f: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        """Residuals implied by the data under (f, sigma), column-major."""
        return (self.succ - f[self.col] * self.base) / (sigma[self.col] * self.sqrt_base)

    def develop(
        self,
        eps: np.ndarray,
        f: np.ndarray,
        sigma: np.ndarray,
        *,
        redraw_pool: np.ndarray | None,
        rng: np.random.Generator | None,
        retry_budget: int,
    ) -> np.ndarray:
        """Forward recursion from column 0; mutates ``eps`` where redraws land.

        Returns the simulated cells in the flat column-major layout.
        """
        cells = np.empty(self.n_cells)
        off = self.offsets
        prev = self.col0[: self.idx]
        for j in range(self.idx):
            seg = eps[off[j] : off[j + 1]]
            scale = sigma[j] * np.sqrt(prev)
            val = f[j] * prev + scale * seg
            bad = val <= 0
            retries = 0
            while bad.any():
                if redraw_pool is None or rng is None:
                    raise SimulatorFailure(
                        f"non-positive claim at column {j + 1} with no redraw pool"
                    )
                retries += 1
                if retries > retry_budget:
                    raise SimulatorFailure(
                        f"positivity retry budget ({retry_budget}) exhausted at column {j + 1}"
                    )
                seg[bad] = redraw_pool[rng.integers(0, redraw_pool.size, size=int(bad.sum()))]
                val[bad] = f[j] * prev[bad] + scale[bad] * seg[bad]
                bad = val <= 0
            cells[off[j] : off[j + 1]] = val
            prev = val[:-1]
        return cells

    def bootstrap(
        self,
        f: np.ndarray,
        sigma: np.ndarray,
        rng: np.random.Generator,
        retry_budget: int = 100,
    ) -> np.ndarray:
        """Invert, resample i.i.d., re-develop; returns the stacked summary."""
        pool = self.invert(f, sigma)
        eps = pool[rng.integers(0, pool.size, size=pool.size)]
        cells = self.develop(
            eps, f, sigma, redraw_pool=pool, rng=rng, retry_budget=retry_budget
        )
        out = self.template.copy()
        out[self.scatter] = cells
        out[-2] = eps.mean()
        out[-1] = eps.std(ddof=1)
        return out

    def matrix(self, cells: np.ndarray) -> np.ndarray:
        """Square cumulative matrix (NaN lower region) from flat cells."""
        n = self.idx + 1
        c = np.full((n, n), np.nan)
        c[:, 0] = self.col0
        off = self.offsets
        for j in range(self.idx):
            c[: self.idx - j, j + 1] = cells[off[j] : off[j + 1]]
        return c


def conditional_residuals(tri: ClaimsTriangle, params: ChainLadderParams) -> np.ndarray:
    """Invert the development recursion over the observed region.

    Returns eps_{i,j+1} = (C_{i,j+1} - f_j C_{i,j}) / (sigma_j sqrt(C_{i,j}))
    flattened column by column (j outer, accident year inner) — the same
    order the forward recursion consumes.
    """
    if params.sigma is None:
        raise ValueError("residual inversion requires sigma")
    idx = tri.final_index
    if params.f.size != idx:
        raise ValueError(f"expected {idx} factors, got {params.f.size}")
    return _TrianglePlan(tri).invert(params.f, params.sigma)


def reconstruct_triangle(
    tri: ClaimsTriangle,
    params: ChainLadderParams,
    residuals: np.ndarray,
    *,
    redraw_pool: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    retry_budget: int = 100,
) -> tuple[ClaimsTriangle, np.ndarray]:
    """Re-develop the observed region from column 0 with given residuals.

    ``residuals`` uses the flat column-major layout of
    ``conditional_residuals``; feeding the inverted residuals back
    reproduces the input triangle. Any step landing at or below zero is
    redrawn from ``redraw_pool`` (up to ``retry_budget`` times per cell) —
    without a pool the violation is an immediate simulator failure. Returns
    the rebuilt triangle and the residuals actually consumed.
    """
    if params.sigma is None:
        raise ValueError("forward recursion requires sigma")
    plan = _TrianglePlan(tri)
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape != (plan.n_cells,):
        raise ValueError(f"expected {plan.n_cells} residuals, got {residuals.shape}")
    used = residuals.copy()
    cells = plan.develop(
        used,
        params.f,
        params.sigma,
        redraw_pool=redraw_pool,
        rng=rng,
        retry_budget=retry_budget,
    )
    return ClaimsTriangle(cumulative=plan.matrix(cells)), used


@dataclass(frozen=True)
class BootstrapDraw:
    """One synthetic triangle plus the mean/sd of the residuals it consumed.

    ``stacked`` is already the summary layout — observed-region cells row by
    row, then the residual mean and sd — so the ABC loop never touches a
    square matrix. ``triangle`` materialises one on demand.
    """

    stacked: np.ndarray

    def summary(self) -> np.ndarray:
        return self.stacked

    @property
    def residual_mean(self) -> float:
        return float(self.stacked[-2])

    @property
    def residual_sd(self) -> float:
        return float(self.stacked[-1])

    @property
    def triangle(self) -> ClaimsTriangle:
        cells = self.stacked[:-2]
        n = (math.isqrt(8 * cells.size + 1) - 1) // 2
        c = np.full((n, n), np.nan)
        pos = 0
        for i in range(n):
            c[i, : n - i] = cells[pos : pos + n - i]
            pos += n - i
        return ClaimsTriangle(cumulative=c)


def bootstrap_simulate(
    tri: ClaimsTriangle,
    params: ChainLadderParams,
    rng: np.random.Generator,
    *,
    retry_budget: int = 100,
) -> BootstrapDraw:
    """Conditional bootstrap: invert, resample i.i.d., re-develop.

    Every row restarts from its observed first column, so the draw is
    conditioned on column 0. Positivity is enforced by redrawing the
    offending residual from the empirical pool (bounded per cell); the
    reported mean/sd (ddof=1) cover the residuals actually used.
    """
    if params.sigma is None:
        raise ValueError("residual inversion requires sigma")
    plan = _TrianglePlan(tri)
    if params.f.size != plan.idx:
        raise ValueError(f"expected {plan.idx} factors, got {params.f.size}")
    return BootstrapDraw(stacked=plan.bootstrap(params.f, params.sigma, rng, retry_budget))


def observed_summary_vector(tri: ClaimsTriangle) -> np.ndarray:
    """The data-side summary: observed cells stacked with (0, 1)."""
    return np.concatenate([tri.observed_values(), [0.0, 1.0]])


def claims_summary_and_distance(
    tri_obs: ClaimsTriangle, sim_output: BootstrapDraw, covariance
) -> float:
    """Mahalanobis distance between observed and simulated stacked summaries."""
    return MahalanobisDistance(covariance).evaluate(
        observed_summary_vector(tri_obs), sim_output.summary()
    )


# --------------------------------------------------------------------------
# priors and initial sampler
# --------------------------------------------------------------------------


def _gamma_logpdf(x: np.ndarray, shape: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (shape - 1.0) * np.log(x) - x / scale - shape * np.log(scale) - gammaln(shape)


@dataclass(frozen=True)
class ChainLadderPriors:
    """Independent gamma priors on factors, inverse-gamma on noise scales.

    Parameterised by per-column (shape, scale) for the gammas and (a, b)
    for the inverse gammas; a > 1 so every mean exists.
    """

    f_shape: np.ndarray
    f_scale: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("f_shape", "f_scale", "s_a", "s_b"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or np.any(arr <= 0):
                raise ValueError(f"{name} must be a strictly positive vector")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        if len({a.size for a in arrays.values()}) != 1:
            raise ValueError("hyperparameter vectors must share one length")
        if np.any(arrays["s_a"] <= 1):
            raise ValueError("inverse-gamma shape must exceed 1 (finite mean)")
        # the normalising constants never change, and gammaln dominates the
        # per-proposal density cost once they are hoisted out
        log_norm = float(
            np.sum(self.s_a * np.log(self.s_b) - gammaln(self.s_a))
            - np.sum(self.f_shape * np.log(self.f_scale) + gammaln(self.f_shape))
        )
        object.__setattr__(self, "_log_norm", log_norm)
        object.__setattr__(self, "_f_rate", 1.0 / self.f_scale)

    @property
    def dim(self) -> int:
        return 2 * self.f_shape.size

    @classmethod
    def from_estimates(
        cls, params: ChainLadderParams, cov: float = 1.0
    ) -> "ChainLadderPriors":
        """Centre the priors on classical estimates with a common CoV.

        Gamma with mean m and CoV c has shape 1/c^2, scale m c^2; inverse
        gamma with mean m and CoV c has a = 2 + 1/c^2, b = m (a - 1). The
        default c = 1 is diffuse — each prior's sd equals the classical
        estimate itself — while keeping the factor densities bounded.
        Pushing c above 1 drives the gamma shapes below 1, which plants an
        integrable spike at f = 0; its importance ratio against any mixture
        kernel that stays finite there is unbounded, and a sampler fed such
        weights drifts into the spike and starves.
        """
        if params.sigma is None:
            raise ValueError("priors need sigma estimates to centre on")
        if cov <= 0:
            raise ValueError("cov must be positive")
        k = params.f.size
        f_shape = np.full(k, 1.0 / cov**2)
        f_scale = params.f * cov**2
        a = 2.0 + 1.0 / cov**2
        return cls(
            f_shape=f_shape,
            f_scale=f_scale,
            s_a=np.full(k, a),
            s_b=params.sigma * (a - 1.0),
        )

    def means(self) -> np.ndarray:
        return np.concatenate([self.f_shape * self.f_scale, self.s_b / (self.s_a - 1.0)])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        f = rng.gamma(self.f_shape, self.f_scale)
        sigma = self.s_b / rng.gamma(self.s_a, 1.0)
        return np.concatenate([f, sigma])

    def log_density(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}")
        if np.any(x <= 0):
            return -math.inf
        k = self.f_shape.size
        f, s = x[:k], x[k:]
        return float(
            np.dot(self.f_shape - 1.0, np.log(f))
            - np.dot(f, self._f_rate)
            - np.dot(self.s_a + 1.0, np.log(s))
            - np.dot(self.s_b, 1.0 / s)
            + self._log_norm
        )

    def density(self, x: np.ndarray) -> float:
        logp = self.log_density(x)
        if logp == -math.inf:
            return 0.0
        # the diffuse factor priors (gamma shape << 1) diverge at zero, so a
        # near-zero proposal can push the joint density past float range
        return math.exp(logp) if logp < 709.0 else math.inf


def claims_mu_sampler(params: ChainLadderParams, mu_cov: float = 0.5) -> InitialSampler:
    """Initial distribution: independent gammas at the classical estimates.

    Tighter than the prior (CoV ``mu_cov``) so the first population starts
    where simulated triangles can actually resemble the data.
    """
    if params.sigma is None:
        raise ValueError("initial sampler needs sigma estimates")
    if mu_cov <= 0:
        raise ValueError("mu_cov must be positive")
    means = params.as_vector()
    shape = np.full(means.size, 1.0 / mu_cov**2)
    scale = means * mu_cov**2

    def sample(rng: np.random.Generator) -> np.ndarray:
        return rng.gamma(shape, scale)

    def log_density(x) -> float:
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            return -math.inf
        return float(np.sum(_gamma_logpdf(x, shape, scale)))

    return InitialSampler(sample=sample, log_density=log_density)


# --------------------------------------------------------------------------
# pilot calibration
# --------------------------------------------------------------------------


def _pilot_draws(
    tri: ClaimsTriangle,
    param_sampler: Callable[[np.random.Generator], ChainLadderParams],
    n_pilot: int,
    seed: int,
    stream_tag: int,
):
    """Collect n_pilot successful bootstrap draws on setup streams."""
    plan = _TrianglePlan(tri)
    draws = []
    attempts = 0
    k = 0
    while len(draws) < n_pilot:
        if attempts >= 10 * n_pilot:
            raise RuntimeError("pilot simulation failure rate too high")
        rng = substream(seed, 0, stream_tag, k)
        k += 1
        attempts += 1
        params = param_sampler(rng)
        try:
            draws.append(BootstrapDraw(stacked=plan.bootstrap(params.f, params.sigma, rng)))
        except SimulatorFailure:
            continue
    return draws


def pilot_covariance(
    tri: ClaimsTriangle,
    param_sampler: Callable[[np.random.Generator], ChainLadderParams],
    *,
    n_pilot: int = 1000,
    seed: int = 0,
    floor: float = 1e-12,
) -> np.ndarray:
    """Diagonal distance covariance from pilot simulations.

    Runs ``n_pilot`` bootstrap draws at parameters from ``param_sampler``
    and returns a per-component variance of the stacked summary (floored
    away from zero). Pass a constant sampler — repeat simulations at one
    representative parameter point — so the scale is pure simulator noise:
    a deviation then costs what it should, the odds of the simulator
    producing it by chance. Folding parameter spread into the pilot
    instead inflates exactly the components that react to parameters,
    which deadens the distance where it most needs to discriminate: the
    residual-moment coordinates, scaled against wild wrong-parameter
    pools, stop registering even order-of-magnitude anomalies. The scale
    is the normal-consistent interquartile estimate rather than the
    sample variance, so stray pilot draws cannot set it.
    """
    draws = _pilot_draws(tri, param_sampler, n_pilot, seed, stream_tag=0)
    summaries = np.array([d.summary() for d in draws])
    q25, q75 = np.percentile(summaries, [25.0, 75.0], axis=0)
    sd = (q75 - q25) / 1.349
    return np.maximum(sd**2, floor)


def calibrate_final_tolerance(
    tri: ClaimsTriangle,
    params: ChainLadderParams,
    covariance,
    *,
    n_pilot: int = 1000,
    seed: int = 0,
    rel_error: float = 0.01,
    quantile: float = 0.5,
    floor: float = 1e-5,
) -> float:
    """Final tolerance matched to a target accuracy on the parameters.

    A tolerance should say how close is close enough. Pilot triangles are
    simulated at copies of ``params`` whose components are jittered by
    ``rel_error`` with random signs, and the ``quantile`` of their
    distances becomes the endpoint: a population that reaches it is, in
    distance terms, indistinguishable from parameters within ``rel_error``
    of the estimates. ``rel_error = 0`` degenerates to the intrinsic
    simulator floor at the estimates themselves — far below anything a
    finite population can anneal to here, because the distance is steep in
    the development factors (half a percent of factor error already
    dominates the at-estimate floor) while chasing it starves the accept
    loop. Returns max(floor, the calibrated value).
    """
    if rel_error < 0:
        raise ValueError("rel_error must be >= 0")
    base = params.as_vector()

    def sampler(rng: np.random.Generator) -> ChainLadderParams:
        signs = rng.choice((-1.0, 1.0), size=base.size)
        return ChainLadderParams.from_vector(base * (1.0 + rel_error * signs))

    obs = observed_summary_vector(tri)
    dist = MahalanobisDistance(covariance)
    draws = _pilot_draws(tri, sampler, n_pilot, seed, stream_tag=1)
    distances = [dist.evaluate(obs, d.summary()) for d in draws]
    return max(floor, float(np.quantile(distances, quantile)))


def claims_schedule(
    final_tolerance: float, *, first: float = 10.0, length: int = 22
) -> ToleranceSchedule:
    """Infinite first step, then geometric descent from ``first`` to the end."""
    if not 0 < final_tolerance <= first:
        raise ValueError("final tolerance must lie in (0, first]")
    if length < 3:
        raise ValueError("schedule needs at least three steps")
    steps = np.linspace(0.0, 1.0, length - 1)
    finite = first * (final_tolerance / first) ** steps
    return ToleranceSchedule(epsilons=(math.inf, *finite))


# --------------------------------------------------------------------------
# target wiring
# --------------------------------------------------------------------------


def claims_bindings(
    tri: ClaimsTriangle,
    priors: ChainLadderPriors,
    covariance,
    *,
    s_draws: int = 1,
    retry_budget: int = 100,
) -> AbcTarget:
    """Wire triangle + priors + pilot covariance into a likelihood-free target."""
    idx = tri.final_index
    plan = _TrianglePlan(tri)

    def simulator(x: np.ndarray, rng: np.random.Generator) -> BootstrapDraw:
        # the prior gate guarantees x > 0 here, so skip params validation
        return BootstrapDraw(stacked=plan.bootstrap(x[:idx], x[idx:], rng, retry_budget))

    return AbcTarget(
        prior_density=priors.density,
        simulator=simulator,
        summary=BootstrapDraw.summary,
        weighting=WeightingDensity(
            kind="uniform", distance=MahalanobisDistance(covariance)
        ),
        s_draws=s_draws,
        observed_summary=observed_summary_vector(tri),
    )


def _weighted_iqr_scale_sq(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Squared per-dimension spread from the weighted IQR, (IQR/1.349)^2."""
    out = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        order = np.argsort(values[:, j])
        cum = np.cumsum(weights[order])
        q25, q75 = np.interp([0.25, 0.75], cum, values[order, j])
        out[j] = ((q75 - q25) / 1.349) ** 2
    return out


def claims_kernel_builder(floor: float = 1e-12):
    """Gamma-mixture kernel factory with population-adapted bandwidth.

    Per-dimension component variance is a robust weighted spread estimate —
    the weighted interquartile range on the Gaussian calibration
    (IQR/1.349)^2, falling back to the weighted variance where the IQR
    degenerates to zero — shrunk at the usual kernel-density rate
    N^(-2/(d+4)) and floored away from zero. Robustness matters here: a few
    stray particles far from the bulk would inflate a plain variance and
    with it every mutation, stalling acceptance exactly when the tolerance
    gets tight. Each component's variance is additionally capped at its
    squared center so every gamma shape stays >= 1: a sub-unit shape piles
    draws onto 0.0 in floating point, which the positive-support priors
    reject outright.
    """

    def build(system: ParticleSystem) -> GammaMixtureKernel:
        norm = system.normalize()
        rate = norm.n ** (-2.0 / (norm.dim + 4.0))
        scale_sq = _weighted_iqr_scale_sq(norm.values, norm.weights)
        fallback = norm.weighted_var()
        scale_sq = np.where(scale_sq > 0, scale_sq, fallback)
        var = np.maximum(scale_sq * rate, floor)
        var = np.minimum(var, norm.values**2)
        return GammaMixtureKernel(norm.values, norm.weights, variance=var)

    return build


@dataclass(frozen=True)
class ClaimsRunResult:
    """Everything the reporting layer needs from one reserving run."""

    triangle: ClaimsTriangle
    system: ParticleSystem
    diagnostics: list
    classical: ChainLadderParams
    priors: ChainLadderPriors
    covariance: np.ndarray
    schedule: ToleranceSchedule

    def posterior_mean_params(self) -> ChainLadderParams:
        return ChainLadderParams.from_vector(self.system.normalize().weighted_mean())


def run_claims(
    tri: ClaimsTriangle | None = None,
    *,
    n_particles: int = 5000,
    seed: int = 0,
    s_draws: int = 1,
    quantile_level: float = 0.0,
    schedule_length: int = 22,
    prior_cov: float = 1.0,
    mu_cov: float = 0.5,
    n_pilot: int = 1000,
    tolerance_rel_error: float = 0.01,
    tolerance_quantile: float = 0.5,
    max_attempts: int | None = 1_000_000,
    keep_trace: bool = False,
) -> ClaimsRunResult:
    """Full reserving run: calibrate, then drive the sampler down the schedule.

    The pilot stage fixes the distance covariance (simulations at initial-
    sampler parameter draws) and the final tolerance (``tolerance_quantile``
    of distances at estimates jittered by ``tolerance_rel_error``); the
    schedule descends geometrically from 10 to that tolerance. Thresholds
    use the pool-quantile rule at ``quantile_level`` (0 = smallest positive
    raw weight).
    """
    if tri is None:
        tri = ClaimsTriangle.from_annual(TABLE1_ANNUAL)
    classical = classical_chain_ladder(tri)
    priors = ChainLadderPriors.from_estimates(classical, cov=prior_cov)
    mu = claims_mu_sampler(classical, mu_cov=mu_cov)
    covariance = pilot_covariance(
        tri, lambda rng: ChainLadderParams.from_vector(mu.sample(rng)),
        n_pilot=n_pilot, seed=seed,
    )
    eps_final = calibrate_final_tolerance(
        tri, classical, covariance, n_pilot=n_pilot, seed=seed,
        rel_error=tolerance_rel_error, quantile=tolerance_quantile,
    )
    schedule = claims_schedule(eps_final, length=schedule_length)
    target = claims_bindings(tri, priors, covariance, s_draws=s_draws)
    policy = PrcPolicy.quantile(quantile_level, max_attempts=max_attempts)
    system, diagnostics = run_prc_abc(
        target, schedule, claims_kernel_builder(), policy, n_particles, mu, seed,
        keep_trace=keep_trace,
    )
    return ClaimsRunResult(
        triangle=tri,
        system=system,
        diagnostics=diagnostics,
        classical=classical,
        priors=priors,
        covariance=covariance,
        schedule=schedule,
    )
