"""Exact conditional inference for the gamma-discount Poisson state model.

Conditional on the discount factor gamma (and regression coefficients when
covariates are present), everything here is closed form:

  predict:  (a, b)            -> (gamma*a, gamma*b)        mean kept, variance / gamma
  update:   (a, b), N_t, m_t  -> (a + N_t, b + m_t)        m_t = exp(beta' z_t)
  one-step: N_t | past        ~  NegBin(gamma*a, gamma*b / (gamma*b + m_t))

The per-step negative binomial log-predictives summed over t give the
count likelihood with the latent rates integrated out, which is what the
MCMC engine targets. Backward sampling uses the exact decomposition
theta_{n-1} = gamma*theta_n + Gamma((1-gamma)*a_{n-1}, b_{n-1}), whose
support enforces theta_{n-1} > gamma*theta_n on every sampled path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .kernels import (
    DomainError,
    GammaParams,
    NegBinParams,
    NumericDegeneracyError,
    RngStream,
)
from .model import CountSeries, DesignMatrix, PriorConfig, linear_predictor


@dataclass(frozen=True)
class FilterTrajectory:
    """Filtered gamma states (a_t, b_t) for t = 0..T plus per-step log-predictives."""

    a: np.ndarray  # length T+1, a[0] = a0
    b: np.ndarray  # length T+1
    gamma: float
    log_predictive: np.ndarray  # length T, log p(N_t | N^(t-1), ...)

    @property
    def T(self) -> int:
        return len(self.log_predictive)

    def state(self, t: int) -> GammaParams:
        """Filtering distribution of theta_t given months 1..t (t = 0 is the prior)."""
        return GammaParams(float(self.a[t]), float(self.b[t]))

    @property
    def total_log_predictive(self) -> float:
        return float(self.log_predictive.sum())


@dataclass(frozen=True)
class SmoothingDraws:
    """Sampled latent-rate paths, one row per retained draw."""

    paths: np.ndarray  # (S, T)
    source: str = ""

    @property
    def S(self) -> int:
        return self.paths.shape[0]

    @property
    def T(self) -> int:
        return self.paths.shape[1]


@dataclass(frozen=True)
class GammaGridPosterior:
    """Discrete posterior of the discount factor over a grid in (0, 1)."""

    grid: np.ndarray
    probs: np.ndarray
    mean: float


def predict_step(state: GammaParams, gamma: float) -> GammaParams:
    """Discount the filtered state one month ahead: (a, b) -> (gamma*a, gamma*b)."""
    if not (0.0 < gamma <= 1.0):
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    return GammaParams(gamma * state.shape, gamma * state.rate)


def update_step(predicted: GammaParams, n: int, multiplier: float = 1.0) -> GammaParams:
    """Condition the predicted state on the month's count."""
    if n < 0 or n != int(n):
        raise DomainError(f"count must be a nonnegative integer, got {n}")
    if not (multiplier > 0):
        raise DomainError(f"multiplier must be positive, got {multiplier}")
    return GammaParams(predicted.shape + n, predicted.rate + multiplier)


def one_step_predictive(predicted: GammaParams, multiplier: float = 1.0) -> NegBinParams:
    """Negative binomial forecast of the next count given the predicted state."""
    if not (multiplier > 0):
        raise DomainError(f"multiplier must be positive, got {multiplier}")
    r = predicted.shape
    p = predicted.rate / (predicted.rate + multiplier)
    return NegBinParams(r, p)


def filter_core(
    counts: np.ndarray,
    multipliers: np.ndarray,
    gamma: float,
    a0: float,
    b0: float,
) -> FilterTrajectory:
    """Run predict/update over all months. Array-level workhorse for the MCMC loops."""
    if not (0.0 < gamma <= 1.0):
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    counts = np.asarray(counts)
    multipliers = np.asarray(multipliers, dtype=float)
    T = len(counts)
    if len(multipliers) != T:
        raise DomainError("one multiplier per month required")
    if np.any(multipliers <= 0) or not np.all(np.isfinite(multipliers)):
        raise DomainError("multipliers must be positive and finite")

    a = np.empty(T + 1)
    b = np.empty(T + 1)
    a[0], b[0] = a0, b0
    for t in range(1, T + 1):
        a[t] = gamma * a[t - 1] + counts[t - 1]
        b[t] = gamma * b[t - 1] + multipliers[t - 1]

    # negbin log pmf of N_t under r_t = gamma*a_{t-1}, p_t = gamma*b_{t-1}/(gamma*b_{t-1}+m_t);
    # extreme multipliers can overflow the rate recursion, leaving non-finite
    # entries for the caller to treat as out-of-support
    r = gamma * a[:-1]
    gb = gamma * b[:-1]
    n = counts.astype(float)
    with np.errstate(invalid="ignore", over="ignore"):
        log_pred = (
            gammaln(r + n)
            - gammaln(n + 1.0)
            - gammaln(r)
            + r * (np.log(gb) - np.log(gb + multipliers))
            + n * (np.log(multipliers) - np.log(gb + multipliers))
        )
    return FilterTrajectory(a=a, b=b, gamma=gamma, log_predictive=log_pred)


def filter_pass(
    series: CountSeries,
    design: DesignMatrix,
    beta: np.ndarray,
    gamma: float,
    priors: PriorConfig,
) -> FilterTrajectory:
    """Filter a cohort under static or per-month coefficients."""
    if design.T != series.T:
        raise DomainError("design matrix and count series disagree on T")
    multipliers = linear_predictor(design, beta)
    return filter_core(series.counts, multipliers, gamma, priors.a0, priors.b0)


def gamma_grid_posterior(
    series: CountSeries,
    design: DesignMatrix,
    beta: np.ndarray,
    priors: PriorConfig,
    grid_step: float | None = None,
    grid: np.ndarray | None = None,
    prior_weights: np.ndarray | None = None,
) -> GammaGridPosterior:
    """Posterior of the discount factor over a discrete grid inside (0, 1).

    The default grid is {step, 2*step, ..., 1 - step}; a custom grid may be
    passed directly. Prior weights default to uniform over the grid.
    """
    if grid is None:
        step = priors.gamma_grid_step if grid_step is None else grid_step
        n = round(1.0 / step)
        grid = np.arange(1, n) * step
    else:
        grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0.0) or np.any(grid >= 1.0):
        raise DomainError("gamma grid must lie strictly inside (0, 1)")
    if prior_weights is None:
        log_prior = np.zeros(len(grid))
    else:
        prior_weights = np.asarray(prior_weights, dtype=float)
        if len(prior_weights) != len(grid) or np.any(prior_weights < 0):
            raise DomainError("prior weights must be nonnegative, one per grid point")
        with np.errstate(divide="ignore"):
            log_prior = np.log(prior_weights)

    multipliers = linear_predictor(design, beta)
    log_post = np.array(
        [
            filter_core(series.counts, multipliers, g, priors.a0, priors.b0).total_log_predictive
            for g in grid
        ]
    )
    log_post = log_post + log_prior
    norm = logsumexp(log_post)
    if not np.isfinite(norm):
        raise NumericDegeneracyError(
            "gamma grid posterior has zero total mass",
            context={"grid_size": len(grid)},
        )
    probs = np.exp(log_post - norm)
    return GammaGridPosterior(grid=grid, probs=probs, mean=float(probs @ grid))


def ffbs_sample(trajectory: FilterTrajectory, rng: RngStream) -> np.ndarray:
    """Draw one latent-rate path from its joint smoothing distribution.

    theta_T comes from the final filter Gamma(a_T, b_T); earlier months follow
    the backward kernel theta_{n-1} = gamma*theta_n + Gamma((1-gamma)*a_{n-1},
    b_{n-1}), so every path satisfies theta_{n-1} > gamma*theta_n.
    """
    gamma = trajectory.gamma
    T = trajectory.T
    a, b = trajectory.a, trajectory.b
    gen = rng.generator
    path = np.empty(T)
    path[T - 1] = gen.gamma(shape=a[T], scale=1.0 / b[T])
    for n in range(T - 1, 0, -1):
        shape = (1.0 - gamma) * a[n]
        if gamma == 1.0:
            # static limit: the increment distribution collapses to zero and
            # the whole path equals the final filter draw
            path[n - 1] = path[n]
            continue
        if shape <= 0:
            raise NumericDegeneracyError(
                "backward kernel has nonpositive shape",
                context={"month": n, "gamma": gamma},
            )
        increment = gen.gamma(shape=shape, scale=1.0 / b[n])
        path[n - 1] = gamma * path[n] + increment
    if not np.all(np.isfinite(path) & (path > 0)):
        bad = int(np.argmin(np.isfinite(path) & (path > 0))) + 1
        raise NumericDegeneracyError(
            "backward sampling produced a degenerate rate", context={"month": bad}
        )
    return path


def exceedance_probability(draws: SmoothingDraws, s: int, u: int) -> float:
    """Fraction of sampled paths with theta_s >= theta_u (months are 1-based)."""
    T = draws.T
    if not (1 <= s <= T and 1 <= u <= T):
        raise DomainError(f"month indices must lie in 1..{T}")
    return float(np.mean(draws.paths[:, s - 1] >= draws.paths[:, u - 1]))
