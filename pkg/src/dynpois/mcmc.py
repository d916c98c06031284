"""Posterior samplers: random-walk Metropolis for the static models, the Gibbs
composition for time-varying coefficients, and the static Poisson-regression
benchmark.

The static fitters work on the count likelihood with the latent rates
integrated out (the per-step negative binomial product from the filter), so a
single filter pass prices one proposal. The discount factor is sampled on the
logit scale with its Jacobian; regression coefficients are unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .filtering import (
    ffbs_sample,
    filter_core,
    gamma_grid_posterior,
)
from .kernels import (
    BetaParams,
    DomainError,
    GammaParams,
    RngStream,
    cholesky_or_raise,
    expit,
    log_pdf_beta,
    logit,
)
from .model import CountSeries, DesignMatrix, ModelSpec, PriorConfig, linear_predictor


class FitError(RuntimeError):
    """Estimation failed (optimizer non-convergence, dead chain, ...)."""


@dataclass(frozen=True)
class MhConfig:
    iterations: int = 10_000
    burn_in: int = 2_000
    thinning: int = 1
    proposal_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise DomainError("iterations must be positive")
        if not (0 <= self.burn_in < self.iterations):
            raise DomainError("burn-in must be nonnegative and smaller than iterations")
        if self.thinning < 1:
            raise DomainError("thinning must be at least 1")
        if self.proposal_scale <= 0:
            raise DomainError("proposal scale must be positive")

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thinning))

    @staticmethod
    def static_default(seed: int = 0) -> "MhConfig":
        return MhConfig(iterations=10_000, burn_in=2_000, thinning=1, seed=seed)

    @staticmethod
    def dm5_default(seed: int = 0) -> "MhConfig":
        return MhConfig(iterations=80_000, burn_in=30_000, thinning=10, seed=seed)


@dataclass
class PosteriorDraws:
    """Retained MCMC draws. beta is (S, p) for static coefficients or (S, T, p)
    for time-varying ones; theta holds smoothing paths when requested."""

    beta: np.ndarray
    gamma: np.ndarray | None
    acceptance_rate: float
    beta_names: tuple = ()
    tau: np.ndarray | None = None
    theta: np.ndarray | None = None
    variant: str = ""

    def __post_init__(self):
        if self.gamma is not None:
            if np.any(self.gamma <= 0) or np.any(self.gamma > 1):
                raise DomainError("gamma draws must lie in (0, 1]")
        if self.tau is not None and np.any(self.tau <= 0):
            raise DomainError("tau draws must be positive")
        if not (0.0 <= self.acceptance_rate <= 1.0):
            raise DomainError("acceptance rate must lie in [0, 1]")

    @property
    def S(self) -> int:
        return self.beta.shape[0]

    def parameter_table(self) -> list[tuple[str, np.ndarray]]:
        """Scalar parameters to summarize, in reporting order."""
        out = []
        if self.beta.ndim == 2:
            for i, name in enumerate(self.beta_names):
                out.append((f"beta_{name}", self.beta[:, i]))
        if self.gamma is not None:
            out.append(("gamma", self.gamma))
        if self.tau is not None:
            for i, name in enumerate(self.beta_names):
                out.append((f"tau_{name}", self.tau[:, i]))
        return out


@dataclass(frozen=True)
class ModeHessian:
    mode: np.ndarray
    covariance: np.ndarray
    jitter: float = 0.0


@dataclass(frozen=True)
class MhResult:
    draws: np.ndarray
    acceptance_rate: float
    scale_used: float = 1.0


@dataclass(frozen=True)
class ChainDiagnostics:
    names: tuple
    means: np.ndarray
    sds: np.ndarray
    autocorr: np.ndarray  # (k, max_lag+1), lag 0 first
    ess: np.ndarray


def _log_prior_beta(beta: np.ndarray, sd: float) -> float:
    return float(-0.5 * np.sum(beta**2) / sd**2 - len(beta) * math.log(sd * math.sqrt(2 * math.pi)))


def _log_prior_gamma(gamma: float, priors: PriorConfig) -> float:
    if not (0.0 < gamma < 1.0):
        return -np.inf
    if priors.gamma_prior == "uniform":
        return 0.0
    if priors.gamma_prior == "beta":
        a, b = priors.gamma_beta_ab
        return float(log_pdf_beta(gamma, BetaParams(a, b)))
    if priors.gamma_prior == "fixed":
        return 0.0 if gamma == priors.gamma_fixed_value else -np.inf
    raise DomainError(f"gamma prior {priors.gamma_prior!r} has no density")


def log_target_static(
    beta: np.ndarray,
    gamma: float,
    series: CountSeries,
    design: DesignMatrix,
    priors: PriorConfig,
) -> float:
    """Unnormalized log posterior of (beta, gamma) with latent rates integrated out."""
    if not (0.0 < gamma < 1.0):
        return -np.inf
    beta = np.asarray(beta, dtype=float)
    lp = _log_prior_gamma(gamma, priors)
    if beta.size:
        lp += _log_prior_beta(beta, priors.beta_sd)
    if not np.isfinite(lp):
        return -np.inf
    multipliers = linear_predictor(design, beta)
    if not np.all(np.isfinite(multipliers)):
        return -np.inf
    ll = filter_core(series.counts, multipliers, gamma, priors.a0, priors.b0).total_log_predictive
    # extreme proposals can overflow the rate recursion; treat as out of support
    if not np.isfinite(ll):
        return -np.inf
    return float(ll + lp)


def find_mode_and_hessian(
    log_target, start: np.ndarray, max_iter: int = 500, rel_step: float = 1e-4
) -> ModeHessian:
    """Maximize a log density and return the inverse negative Hessian at the mode.

    Quasi-Newton with finite-difference gradients; the Hessian comes from
    central second differences, symmetrized. If the inverse is not positive
    definite its diagonal is inflated until it is, and the added jitter is
    reported on the result.
    """
    start = np.atleast_1d(np.asarray(start, dtype=float))

    def neg(x):
        v = log_target(x)
        return -v if np.isfinite(v) else 1e300

    res = optimize.minimize(neg, start, method="BFGS", options={"maxiter": max_iter})
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        raise FitError(f"mode search diverged: {res.message}")
    if not res.success:
        # BFGS often stops on precision loss near the optimum; refine and accept
        # the better point, but give up if no progress was made at all.
        res2 = optimize.minimize(neg, res.x, method="Nelder-Mead", options={"maxiter": 50 * max_iter})
        if res2.fun <= res.fun:
            res = res2
        if res.fun > neg(start) + 1e-9:
            raise FitError(f"mode search failed to improve on the start point: {res.message}")
    mode = np.atleast_1d(res.x)

    hessian = _fd_hessian(log_target, mode, rel_step)
    cov = np.linalg.inv(-hessian)
    cov = 0.5 * (cov + cov.T)
    jitter = 0.0
    scale = float(np.mean(np.abs(np.diag(cov)))) or 1.0
    while True:
        try:
            cholesky_or_raise(cov + jitter * np.eye(len(mode)))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-8 * scale if jitter == 0.0 else 10.0 * jitter
            if jitter > 1e6 * scale:
                raise FitError("could not regularize the proposal covariance") from None
    if jitter > 0.0:
        cov = cov + jitter * np.eye(len(mode))
    return ModeHessian(mode=mode, covariance=cov, jitter=jitter)


def _fd_hessian(f, x: np.ndarray, rel_step: float) -> np.ndarray:
    d = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return H


def rw_metropolis(
    log_target,
    init: np.ndarray,
    proposal_covariance: np.ndarray,
    config: MhConfig,
    rng: RngStream,
) -> MhResult:
    """Random-walk Metropolis with a fixed multivariate-normal proposal.

    The proposal is symmetric so the acceptance ratio is the posterior ratio,
    evaluated in log space. Burn-in and thinning are applied before draws are
    retained; the acceptance rate covers the full run.
    """
    init = np.atleast_1d(np.asarray(init, dtype=float))
    d = len(init)
    root = cholesky_or_raise(np.atleast_2d(proposal_covariance))
    lp = log_target(init)
    if not np.isfinite(lp):
        raise DomainError("log target is not finite at the chain start")
    gen = rng.generator
    draws = np.empty((config.n_retained, d))
    x = init.copy()
    accepted = 0
    kept = 0
    for i in range(config.iterations):
        step = root @ gen.standard_normal(d)
        u = gen.random()
        prop = x + step
        lp_prop = log_target(prop)
        if math.log(u) < lp_prop - lp:
            x = prop
            lp = lp_prop
            accepted += 1
        if i >= config.burn_in and (i - config.burn_in) % config.thinning == 0:
            draws[kept] = x
            kept += 1
    rate = accepted / config.iterations
    if accepted == 0:
        raise FitError(
            "chain accepted no proposals; rescale the proposal covariance "
            "(proposal_scale) or check the target"
        )
    return MhResult(draws=draws, acceptance_rate=rate)


_RETRY_LADDER = (1.0, 0.5, 2.0)
_ACCEPTANCE_BAND = (0.1, 0.6)


def _mode_then_chain(log_target, start: np.ndarray, config: MhConfig, rng: RngStream) -> MhResult:
    """Hessian-calibrated chain with the fixed retry ladder on the proposal scale."""
    mh = find_mode_and_hessian(log_target, start)
    attempts = []
    for k, mult in enumerate(_RETRY_LADDER):
        scale = config.proposal_scale * mult
        try:
            res = rw_metropolis(log_target, mh.mode, mh.covariance * scale, config, rng.substream(k))
        except FitError:
            continue
        res = MhResult(res.draws, res.acceptance_rate, scale_used=scale)
        if _ACCEPTANCE_BAND[0] <= res.acceptance_rate <= _ACCEPTANCE_BAND[1]:
            return res
        attempts.append(res)
    if not attempts:
        raise FitError("no proposal scale on the retry ladder produced a live chain")
    return min(attempts, key=lambda r: abs(r.acceptance_rate - 0.3))


def _smooth_paths(
    counts: np.ndarray,
    design: DesignMatrix,
    betas: np.ndarray,
    gammas: np.ndarray,
    priors: PriorConfig,
    rng: RngStream,
) -> np.ndarray:
    S = len(gammas)
    theta = np.empty((S, len(counts)))
    for j in range(S):
        multipliers = linear_predictor(design, betas[j]) if design.p else np.ones(len(counts))
        traj = filter_core(counts, multipliers, gammas[j], priors.a0, priors.b0)
        theta[j] = ffbs_sample(traj, rng)
    return theta


def fit_dm_static(
    series: CountSeries,
    design: DesignMatrix,
    spec: ModelSpec,
    priors: PriorConfig,
    config: MhConfig,
    rng: RngStream,
    smooth: bool = True,
) -> PosteriorDraws:
    """Sample (beta, gamma) for the static-coefficient dynamic models.

    With a discrete-grid prior on gamma (covariate-free model only) the
    posterior is summed exactly on the grid and draws are taken from it with
    no Metropolis step. Otherwise a joint random-walk chain runs over
    (beta, logit gamma) with the logit Jacobian included, calibrated by the
    inverse negative Hessian at the mode. Smoothing paths are drawn by
    backward sampling per retained draw when ``smooth`` is set.
    """
    if spec.variant not in ("DM1", "DM2", "DM3", "DM4"):
        raise DomainError(f"fit_dm_static does not handle variant {spec.variant}")
    if design.T != series.T:
        raise DomainError("design matrix and count series disagree on T")
    p = design.p
    S = config.n_retained

    if priors.gamma_prior == "grid":
        if p:
            raise DomainError("the discrete-grid gamma prior applies to the covariate-free model")
        post = gamma_grid_posterior(series, design, np.zeros(0), priors)
        gammas = rng.substream(0).generator.choice(post.grid, size=S, p=post.probs)
        betas = np.zeros((S, 0))
        acc = 1.0
    elif priors.gamma_prior == "fixed":
        g0 = priors.gamma_fixed_value
        gammas = np.full(S, g0)
        if p == 0:
            betas = np.zeros((S, 0))
            acc = 1.0
        else:

            def target(b):
                return log_target_static(b, g0, series, design, priors)

            res = _mode_then_chain(target, np.zeros(p), config, rng.substream(0))
            betas, acc = res.draws, res.acceptance_rate
    else:

        def target(x):
            g = expit(x[-1])
            if not (0.0 < g < 1.0):
                return -np.inf
            # d gamma / d logit = g (1 - g)
            jac = math.log(g) + math.log1p(-g)
            return log_target_static(x[:p], g, series, design, priors) + jac

        res = _mode_then_chain(target, np.zeros(p + 1), config, rng.substream(0))
        betas = res.draws[:, :p]
        gammas = expit(res.draws[:, p])
        acc = res.acceptance_rate

    theta = None
    if smooth:
        theta = _smooth_paths(series.counts, design, betas, gammas, priors, rng.substream(1))
    return PosteriorDraws(
        beta=betas,
        gamma=gammas,
        acceptance_rate=acc,
        beta_names=design.column_names,
        theta=theta,
        variant=spec.variant,
    )


def tau_full_conditional(beta_path: np.ndarray, priors: PriorConfig) -> GammaParams:
    """Gamma full conditional of one random-walk precision given its coefficient path."""
    beta_path = np.asarray(beta_path, dtype=float)
    if beta_path.ndim != 1 or len(beta_path) < 2:
        raise DomainError("need a path of at least two steps")
    increments = np.diff(beta_path)
    return GammaParams(
        priors.tau_shape + 0.5 * (len(beta_path) - 1),
        priors.tau_rate + 0.5 * float(np.sum(increments**2)),
    )


def fit_dm5(
    series: CountSeries,
    design: DesignMatrix,
    priors: PriorConfig,
    config: MhConfig,
    rng: RngStream,
    smooth: bool = True,
) -> PosteriorDraws:
    """Gibbs sampler for the time-varying-coefficient model.

    Each sweep updates, in order: the discount factor by a Metropolis step on
    the rate-integrated likelihood, the latent-rate path by backward sampling,
    every month's coefficient vector by a single-site Metropolis step against
    its Poisson term and random-walk neighbors, and the per-coefficient
    precisions from their conjugate gamma conditionals.
    """
    p = design.p
    if p < 1:
        raise DomainError("the time-varying model needs at least one covariate")
    if design.T != series.T:
        raise DomainError("design matrix and count series disagree on T")
    T = series.T
    counts = series.counts
    Z = design.rows
    gen = rng.substream(0).generator
    ffbs_rng = rng.substream(1)

    beta = np.zeros((T, p))
    tau = np.ones(p)
    gamma = 0.5
    x_gamma = logit(gamma)
    gamma_step = 0.25 * math.sqrt(config.proposal_scale)
    prior_var = priors.beta_sd**2

    S = config.n_retained
    betas_out = np.empty((S, T, p))
    gammas_out = np.empty(S)
    taus_out = np.empty((S, p))
    theta_out = np.empty((S, T)) if smooth else None

    n_accept = 0
    n_moves = 0
    kept = 0
    for it in range(config.iterations):
        multipliers = np.exp(np.sum(Z * beta, axis=1))
        traj = filter_core(counts, multipliers, gamma, priors.a0, priors.b0)

        # discount factor, collapsed over the latent rates
        x_prop = x_gamma + gamma_step * gen.standard_normal()
        g_prop = expit(x_prop)
        u = gen.random()
        if 0.0 < g_prop < 1.0:
            traj_prop = filter_core(counts, multipliers, g_prop, priors.a0, priors.b0)
            num = (
                traj_prop.total_log_predictive
                + _log_prior_gamma(g_prop, priors)
                + math.log(g_prop)
                + math.log1p(-g_prop)
            )
            den = (
                traj.total_log_predictive
                + _log_prior_gamma(gamma, priors)
                + math.log(gamma)
                + math.log1p(-gamma)
            )
            if math.log(u) < num - den:
                gamma, x_gamma, traj = g_prop, x_prop, traj_prop
                n_accept += 1
        n_moves += 1

        # latent rates given (beta, gamma)
        theta = ffbs_sample(traj, ffbs_rng)

        # single-site sweep over the coefficient path
        prop_sd = config.proposal_scale / np.sqrt(
            (counts[:, None] + 1.0) * Z**2 + 2.0 * tau[None, :]
        )
        for t in range(T):
            b_cur = beta[t]
            b_prop = b_cur + prop_sd[t] * gen.standard_normal(p)
            u = gen.random()
            eta_cur = float(Z[t] @ b_cur)
            eta_prop = float(Z[t] @ b_prop)
            delta = counts[t] * (eta_prop - eta_cur) - theta[t] * (
                math.exp(eta_prop) - math.exp(eta_cur)
            )
            if t == 0:
                delta += -0.5 * float(np.sum(b_prop**2 - b_cur**2)) / prior_var
            else:
                prev = beta[t - 1]
                delta += -0.5 * float(tau @ ((b_prop - prev) ** 2 - (b_cur - prev) ** 2))
            if t < T - 1:
                nxt = beta[t + 1]
                delta += -0.5 * float(tau @ ((nxt - b_prop) ** 2 - (nxt - b_cur) ** 2))
            if math.log(u) < delta:
                beta[t] = b_prop
                n_accept += 1
            n_moves += 1

        # random-walk precisions
        diffs = np.diff(beta, axis=0)
        shape = priors.tau_shape + 0.5 * (T - 1)
        rates = priors.tau_rate + 0.5 * np.sum(diffs**2, axis=0)
        tau = gen.gamma(shape=shape, scale=1.0 / rates)

        if it >= config.burn_in and (it - config.burn_in) % config.thinning == 0:
            betas_out[kept] = beta
            gammas_out[kept] = gamma
            taus_out[kept] = tau
            if smooth:
                theta_out[kept] = theta
            kept += 1

    if n_accept == 0:
        raise FitError("no Gibbs move was accepted; check scaling of the data or proposal")
    return PosteriorDraws(
        beta=betas_out,
        gamma=gammas_out,
        acceptance_rate=n_accept / n_moves,
        beta_names=design.column_names,
        tau=taus_out,
        theta=theta_out,
        variant="DM5",
    )


def with_intercept(design: DesignMatrix) -> DesignMatrix:
    """Prepend a constant column; the regression benchmark is misspecified without one."""
    rows = np.column_stack([np.ones(design.T), design.rows])
    return DesignMatrix(("intercept", *design.column_names), rows, design.standardized)


def log_target_bpm(
    beta: np.ndarray, series: CountSeries, design: DesignMatrix, priors: PriorConfig
) -> float:
    """Log posterior of the static Poisson regression (rate exp(beta' z_t))."""
    eta = design.rows @ np.asarray(beta, dtype=float)
    ll = float(np.sum(series.counts * eta - np.exp(eta) - gammaln(series.counts + 1.0)))
    return ll + _log_prior_beta(np.asarray(beta, dtype=float), priors.beta_sd)


def fit_bpm(
    series: CountSeries,
    design: DesignMatrix,
    priors: PriorConfig,
    config: MhConfig,
    rng: RngStream,
) -> PosteriorDraws:
    """Metropolis fit of the Poisson-regression benchmark; an intercept column is
    added in front of the supplied design."""
    full = with_intercept(design)

    def target(b):
        return log_target_bpm(b, series, full, priors)

    res = _mode_then_chain(target, np.zeros(full.p), config, rng.substream(0))
    return PosteriorDraws(
        beta=res.draws,
        gamma=None,
        acceptance_rate=res.acceptance_rate,
        beta_names=full.column_names,
        variant="BPM",
    )


def posterior_summary(draws: PosteriorDraws) -> list[dict]:
    """25th percentile, mean, 75th percentile and standard deviation per parameter."""
    rows = []
    for name, values in draws.parameter_table():
        rows.append(
            {
                "parameter": name,
                "q25": float(np.percentile(values, 25)),
                "mean": float(np.mean(values)),
                "q75": float(np.percentile(values, 75)),
                "sd": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            }
        )
    return rows


def _autocorr(x: np.ndarray, max_lag: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x)
    x = x - x.mean()
    denom = float(x @ x)
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    if denom == 0.0:
        return out
    for k in range(1, min(max_lag, n - 1) + 1):
        out[k] = float(x[:-k] @ x[k:]) / denom
    return out


def _ess(x: np.ndarray, acf: np.ndarray) -> float:
    """Effective sample size by Geyer's initial-positive-sequence truncation."""
    n = len(x)
    if np.std(x) == 0.0:
        return 1.0
    # pair sums of consecutive autocorrelations stay positive for a valid chain;
    # truncate the sum at the first nonpositive pair
    total = 0.0
    k = 1
    while k + 1 < len(acf):
        pair = acf[k] + acf[k + 1]
        if pair <= 0.0:
            break
        total += pair
        k += 2
    ess = n / (1.0 + 2.0 * total)
    return float(min(max(ess, 1.0), n))


def diagnostics(draws: PosteriorDraws, max_lag: int = 50) -> ChainDiagnostics:
    """Trace summaries, autocorrelations (lags 0..max_lag) and ESS per parameter."""
    table = draws.parameter_table()
    if draws.S < 2:
        raise DomainError("diagnostics need at least two draws")
    names = tuple(name for name, _ in table)
    means = np.array([np.mean(v) for _, v in table])
    sds = np.array([np.std(v, ddof=1) for _, v in table])
    acfs = np.vstack([_autocorr(v, max_lag) for _, v in table])
    ess = np.array([_ess(v, acf) for (_, v), acf in zip(table, acfs)])
    return ChainDiagnostics(names=names, means=means, sds=sds, autocorr=acfs, ess=ess)
