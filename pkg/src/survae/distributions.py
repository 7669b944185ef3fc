"""Log-likelihoods and survival-function pieces used by the ELBO.

All functions are elementwise over arrays and accept either plain numbers /
arrays or autodiff nodes.  With plain inputs they return plain floats or
arrays; if any argument is a :class:`~survae.autodiff.Node` the result is a
node and can be differentiated.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PROB_EPS = 1e-7
TIME_EPS = 1e-8
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _plain_when_untracked(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        tracked = any(isinstance(a, ad.Node) for a in args + tuple(kwargs.values()))
        out = fn(*args, **kwargs)
        if tracked:
            return out
        v = out.value
        return float(v) if v.ndim == 0 else v

    return wrapper


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=np.float64)


def _require_positive(name: str, x) -> None:
    if np.any(_values(x) <= 0):
        raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        _require_positive("sigma", self.sigma)


@dataclass(frozen=True)
class BernoulliParams:
    beta: float

    def __post_init__(self):
        if np.any((np.asarray(self.beta) < 0) | (np.asarray(self.beta) > 1)):
            raise ValueError("beta must lie in [0, 1]")


@dataclass(frozen=True)
class CategoricalParams:
    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if np.any(th < 0) or np.any(np.abs(th.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("theta must be a probability vector")


@dataclass(frozen=True)
class TimeParams:
    """Weibull (shape ``alpha``, scale ``lam``) or exponential (``lam`` only).

    Fields may be arrays, one entry per subject.
    """

    lam: np.ndarray
    alpha: np.ndarray | float = 1.0
    family: str = "weibull"

    def __post_init__(self):
        if self.family not in ("weibull", "exponential"):
            raise ValueError(f"unknown time family {self.family!r}")
        if self.family == "exponential":
            object.__setattr__(self, "alpha", 1.0)
        _require_positive("alpha", self.alpha)
        _require_positive("lambda", self.lam)

    def log_hazard(self, t):
        return weibull_log_hazard(t, self.alpha, self.lam)

    def log_survival(self, t):
        return weibull_log_survival(t, self.alpha, self.lam)

    def cdf(self, t):
        return weibull_cdf(t, self.alpha, self.lam)

    def loglik(self, t, d):
        return censored_time_loglik(t, d, self.alpha, self.lam)

    def rescaled(self, factor: float) -> "TimeParams":
        """Same distribution with time measured in units ``factor`` times smaller."""
        return TimeParams(np.asarray(self.lam) * factor, self.alpha, self.family)


@dataclass(frozen=True)
class LatentGaussian:
    mu: np.ndarray
    logvar: np.ndarray


# -- covariate heads ---------------------------------------------------------


@_plain_when_untracked
def gaussian_loglik(x, mu, sigma):
    _require_positive("sigma", sigma)
    z = ad.div(ad.sub(x, mu), sigma)
    return ad.sub(ad.neg(ad.log(sigma)) - LOG_SQRT_2PI, ad.square(z) * 0.5)


@_plain_when_untracked
def bernoulli_loglik(x, beta):
    xv = _values(x)
    if not np.all((xv == 0) | (xv == 1)):
        raise ValueError("Bernoulli observations must be 0 or 1")
    b = ad.clip(beta, PROB_EPS, 1.0 - PROB_EPS)
    return ad.add(ad.mul(x, ad.log(b)), ad.mul(1.0 - xv, ad.log(ad.sub(1.0, b))))


@_plain_when_untracked
def categorical_loglik(x, theta):
    """log theta[x] with theta clamped to >= 1e-7 and renormalized over the last axis."""
    th = ad.as_node(theta)
    k = th.shape[-1]
    idx = np.asarray(_values(x))
    if not np.all((idx == np.round(idx)) & (idx >= 0) & (idx < k)):
        raise ValueError(f"category index out of range for K={k}")
    onehot = np.eye(k)[idx.astype(int)]
    clamped = ad.clip(th, PROB_EPS, None)
    normed = ad.div(clamped, ad.total(clamped, axis=-1, keepdims=True))
    return ad.total(ad.mul(ad.log(normed), onehot), axis=-1)


# -- time model --------------------------------------------------------------


def _check_time_params(alpha, lam) -> None:
    _require_positive("alpha", alpha)
    _require_positive("lambda", lam)


@_plain_when_untracked
def weibull_log_hazard(t, alpha, lam):
    _check_time_params(alpha, lam)
    log_t = np.log(np.maximum(_values(t), TIME_EPS))
    log_lam = ad.log(lam)
    return ad.add(ad.sub(ad.log(alpha), log_lam), ad.mul(ad.sub(alpha, 1.0), ad.sub(log_t, log_lam)))


@_plain_when_untracked
def weibull_log_survival(t, alpha, lam):
    _check_time_params(alpha, lam)
    tv = _values(t)
    if np.any(tv < 0):
        raise ValueError("time must be >= 0")
    return ad.neg(ad.power(ad.div(tv, lam), alpha))


@_plain_when_untracked
def weibull_cdf(t, alpha, lam):
    return ad.sub(1.0, ad.exp(weibull_log_survival(t, ad.as_node(alpha), ad.as_node(lam))))


@_plain_when_untracked
def censored_time_loglik(t, d, alpha, lam):
    """d * log h(t) + log S(t): a censored subject contributes survival only."""
    dv = _values(d)
    if not np.all((dv == 0) | (dv == 1)):
        raise ValueError("event indicator must be 0 or 1")
    alpha, lam = ad.as_node(alpha), ad.as_node(lam)
    return ad.add(ad.mul(dv, weibull_log_hazard(t, alpha, lam)), weibull_log_survival(t, alpha, lam))


# -- latent space ------------------------------------------------------------


@_plain_when_untracked
def kl_std_normal(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis."""
    inner = ad.sub(ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), logvar), 1.0)
    return ad.total(inner, axis=-1) * 0.5


@_plain_when_untracked
def reparameterize(mu, logvar, eps):
    mu_n = ad.as_node(mu)
    if np.shape(eps) != mu_n.shape:
        raise ValueError(f"noise shape {np.shape(eps)} != latent shape {mu_n.shape}")
    return ad.add(mu_n, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
