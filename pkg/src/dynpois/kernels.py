"""Seedable probability primitives shared by the whole package.

Distribution parameters are plain frozen dataclasses; densities are exposed
in log space and only exponentiated at reporting boundaries. Every sampler
takes an :class:`RngStream`, so results are bitwise reproducible for a fixed
(seed, stream_id) pair.

Gamma distributions are parameterized by shape and *rate* throughout
(mean = shape/rate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


class DomainError(ValueError):
    """Raised when an argument is outside the mathematical domain of an operation."""


class NumericDegeneracyError(ArithmeticError):
    """Raised when a computation degenerates numerically (underflow, zero mass, ...).

    Carries optional ``context`` describing where the degeneracy occurred.
    """

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization failed; carries the offending matrix."""

    def __init__(self, message: str, matrix: np.ndarray):
        super().__init__(message)
        self.matrix = matrix


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs reproduce identical draw sequences;
    distinct stream ids give statistically independent streams. A stream is
    stateful and must not be shared across concurrent callers; derive
    independent children with :meth:`substream` instead.
    """

    def __init__(self, seed: int, stream_id: int = 0, _spawn_key: tuple = ()):
        if not (0 <= int(seed) < 2**64):
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
        if not (0 <= int(stream_id) < 2**64):
            raise DomainError(f"stream_id must be an unsigned 64-bit integer, got {stream_id}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self._spawn_key))
        self.generator = np.random.default_rng(seq)

    def substream(self, k: int) -> "RngStream":
        """Derive the k-th child stream, independent of this one and its siblings."""
        return RngStream(self.seed, self.stream_id, _spawn_key=(*self._spawn_key, int(k)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class GammaParams:
    """Gamma(shape, rate); density shape-rate so mean = shape/rate."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and np.isfinite(self.shape)):
            raise DomainError(f"gamma shape must be positive, got {self.shape}")
        if not (self.rate > 0 and np.isfinite(self.rate)):
            raise DomainError(f"gamma rate must be positive, got {self.rate}")

    def mean(self) -> float:
        return self.shape / self.rate

    def variance(self) -> float:
        return self.shape / self.rate**2


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise DomainError(f"beta alpha must be positive, got {self.alpha}")
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise DomainError(f"beta beta must be positive, got {self.beta}")

    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class NegBinParams:
    """Negative binomial with pmf(n) = C(r+n-1, n) p^r (1-p)^n, n = 0, 1, 2, ...

    r may be non-integer (the binomial coefficient generalizes through the
    gamma function). mean = r(1-p)/p.
    """

    r: float
    p: float

    def __post_init__(self):
        if not (self.r > 0 and np.isfinite(self.r)):
            raise DomainError(f"negbin r must be positive, got {self.r}")
        if not (0.0 < self.p < 1.0):
            raise DomainError(f"negbin p must lie in (0, 1), got {self.p}")

    def mean(self) -> float:
        return self.r * (1.0 - self.p) / self.p

    def variance(self) -> float:
        return self.r * (1.0 - self.p) / self.p**2

    def log_pmf(self, n) -> np.ndarray | float:
        return log_pmf_negbin(n, self)

    def cdf(self, n) -> np.ndarray | float:
        """P(N <= n); regularized incomplete beta I_p(r, n+1)."""
        n = np.asarray(n)
        out = np.where(n < 0, 0.0, special.betainc(self.r, np.floor(n) + 1.0, self.p))
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class PoissonParams:
    """Poisson(rate). Used for the predictive mixtures of the static regression benchmark."""

    rate: float

    def __post_init__(self):
        if not (self.rate >= 0 and np.isfinite(self.rate)):
            raise DomainError(f"poisson rate must be nonnegative, got {self.rate}")

    def mean(self) -> float:
        return self.rate

    def variance(self) -> float:
        return self.rate

    def log_pmf(self, n) -> np.ndarray | float:
        return log_pmf_poisson(n, self.rate)

    def cdf(self, n) -> np.ndarray | float:
        n = np.asarray(n)
        out = np.where(n < 0, 0.0, special.pdtr(np.floor(n), self.rate))
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class TruncatedGammaParams:
    """Gamma law restricted to the open tail (lower, inf)."""

    base: GammaParams
    lower: float = 0.0

    def __post_init__(self):
        if not (self.lower >= 0 and np.isfinite(self.lower)):
            raise DomainError(f"truncation point must be nonnegative, got {self.lower}")


def log_pmf_poisson(n, rate) -> np.ndarray | float:
    """log Poisson pmf: n*log(rate) - rate - lgamma(n+1). rate = 0 is the point mass at 0."""
    n = np.asarray(n)
    rate = np.asarray(rate, dtype=float)
    if np.any(n < 0) or np.any(n != np.floor(n)):
        raise DomainError("count must be a nonnegative integer")
    if np.any(rate < 0) or not np.all(np.isfinite(rate)):
        raise DomainError("poisson rate must be nonnegative and finite")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = n * np.log(rate) - rate - special.gammaln(n + 1.0)
    # rate == 0: pmf is 1 at n=0, 0 elsewhere
    out = np.where(rate == 0, np.where(n == 0, 0.0, -np.inf), out)
    return out if out.ndim else float(out)


def log_pmf_negbin(n, params: NegBinParams) -> np.ndarray | float:
    """log negbin pmf via log-gamma, valid for non-integer r."""
    n = np.asarray(n)
    if np.any(n < 0) or np.any(n != np.floor(n)):
        raise DomainError("count must be a nonnegative integer")
    r, p = params.r, params.p
    out = (
        special.gammaln(r + n)
        - special.gammaln(n + 1.0)
        - special.gammaln(r)
        + r * np.log(p)
        + n * np.log1p(-p)
    )
    return out if out.ndim else float(out)


def log_pdf_gamma(x, params: GammaParams) -> np.ndarray | float:
    """log Gamma(shape a, rate b) density; -inf for x <= 0 by convention."""
    x = np.asarray(x, dtype=float)
    a, b = params.shape, params.rate
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a * np.log(b) - special.gammaln(a) + (a - 1.0) * np.log(x) - b * x
    out = np.where(x > 0, out, -np.inf)
    return out if out.ndim else float(out)


def log_pdf_beta(x, params: BetaParams) -> np.ndarray | float:
    """log Beta(alpha, beta) density; -inf outside (0, 1)."""
    x = np.asarray(x, dtype=float)
    a, b = params.alpha, params.beta
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            (a - 1.0) * np.log(x)
            + (b - 1.0) * np.log1p(-x)
            - special.betaln(a, b)
        )
    out = np.where((x > 0) & (x < 1), out, -np.inf)
    return out if out.ndim else float(out)


def sample_gamma(params: GammaParams, rng: RngStream, size=None):
    """Draw from Gamma(shape, rate)."""
    return rng.generator.gamma(shape=params.shape, scale=1.0 / params.rate, size=size)


def sample_beta(params: BetaParams, rng: RngStream, size=None):
    return rng.generator.beta(params.alpha, params.beta, size=size)


def sample_poisson(rate, rng: RngStream, size=None):
    if np.any(np.asarray(rate) < 0):
        raise DomainError("poisson rate must be nonnegative")
    return rng.generator.poisson(rate, size=size)


# Tail mass below which inverse-CDF truncated sampling is abandoned for the
# rejection envelope (the inverse incomplete gamma loses precision there).
_TRUNC_TAIL_EPS = 1e-12
_TRUNC_MAX_REJECT = 10_000


def sample_truncated_gamma(params: TruncatedGammaParams, rng: RngStream, size=None):
    """Draw from Gamma(shape, rate) restricted to (lower, inf).

    Uses inverse-CDF sampling on the renormalized tail. When the tail mass
    above ``lower`` is below 1e-12 the inversion becomes unreliable and a
    shifted-exponential rejection envelope is used instead; if even that
    cannot produce draws, a NumericDegeneracyError is raised rather than
    looping forever.
    """
    a, b, lo = params.base.shape, params.base.rate, params.lower
    scalar = size is None
    n = 1 if scalar else int(np.prod(size))
    if lo == 0.0:
        out = rng.generator.gamma(shape=a, scale=1.0 / b, size=size)
        return out

    tail = special.gammaincc(a, b * lo)  # regularized upper incomplete gamma
    if tail >= _TRUNC_TAIL_EPS:
        u = rng.generator.random(size=n)
        # invert the survival function: sf(x) = tail * (1 - u)
        x = special.gammainccinv(a, tail * (1.0 - u)) / b
        # inversion can land exactly on the boundary at float precision
        x = np.maximum(x, np.nextafter(lo, np.inf))
    else:
        x = _tail_rejection_gamma(a, b, lo, rng, n)
    if not np.all(np.isfinite(x)):
        raise NumericDegeneracyError(
            "truncated gamma sampling produced non-finite values",
            context={"shape": a, "rate": b, "lower": lo, "tail_mass": float(tail)},
        )
    if scalar:
        return float(x[0])
    return x.reshape(size)


def _tail_rejection_gamma(a, b, lo, rng: RngStream, n: int) -> np.ndarray:
    """Rejection sampler for the deep gamma tail, proposal lo + Exp(lam).

    For a <= 1 the density is dominated by lam = b; for a > 1 by
    lam = b - (a-1)/lo, which is positive whenever lo is beyond the mode
    (guaranteed when the tail mass underflows). Acceptance probability
    exp((a-1) * (log(x/lo) - (x-lo)/lo)) <= 1 in the a > 1 case.
    """
    gen = rng.generator
    if a > 1.0:
        lam = b - (a - 1.0) / lo
        if lam <= 0:
            raise NumericDegeneracyError(
                "truncation point is below the gamma mode but the tail mass underflowed",
                context={"shape": a, "rate": b, "lower": lo},
            )
    else:
        lam = b
    out = np.empty(n)
    filled = 0
    for _ in range(_TRUNC_MAX_REJECT):
        m = n - filled
        x = lo + gen.exponential(scale=1.0 / lam, size=m)
        if a > 1.0:
            log_acc = (a - 1.0) * (np.log(x / lo) - (x - lo) / lo)
        else:
            log_acc = (a - 1.0) * np.log(x / lo)
        keep = np.log(gen.random(size=m)) < log_acc
        k = int(keep.sum())
        out[filled : filled + k] = x[keep]
        filled += k
        if filled == n:
            return out
    raise NumericDegeneracyError(
        "truncated gamma rejection sampler failed to accept",
        context={"shape": a, "rate": b, "lower": lo},
    )


def sample_mv_normal(mean, covariance, rng: RngStream, size=None):
    """Draw from N(mean, covariance); covariance must be symmetric positive definite."""
    mean = np.asarray(mean, dtype=float)
    covariance = np.asarray(covariance, dtype=float)
    root = cholesky_or_raise(covariance)
    d = mean.shape[0]
    if size is None:
        return mean + root @ rng.generator.standard_normal(d)
    z = rng.generator.standard_normal((int(size), d))
    return mean + z @ root.T


def cholesky_or_raise(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "covariance matrix is not positive definite", matrix=np.array(matrix)
        ) from None


def negbin_cdf(n, params: NegBinParams):
    return params.cdf(n)


def negbin_quantile(q: float, params: NegBinParams) -> int:
    """Smallest n with CDF(n) >= q."""
    if not (0.0 < q < 1.0):
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    if params.cdf(0) >= q:
        return 0
    # exponential bracketing then bisection on the integer CDF;
    # invariant: cdf(lo) < q <= cdf(hi)
    lo, hi = 0, 1
    while params.cdf(hi) < q:
        lo = hi
        hi *= 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if params.cdf(mid) >= q:
            hi = mid
        else:
            lo = mid
    return hi


def logit(x):
    x = np.asarray(x, dtype=float)
    out = np.log(x) - np.log1p(-x)
    return out if out.ndim else float(out)


def expit(x):
    out = special.expit(x)
    return out if np.ndim(out) else float(out)
