"""Reparameterizable mask distributions and their divergences.

Samplers take explicit uniform noise so every draw is reproducible and the
same noise can be frozen for gradient checks.  Inputs may be plain floats,
numpy arrays or :class:`~sparse_ib.tensor.Tensor`; floats and arrays come
back as floats and arrays, tensors come back as tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import tensor as T
from .tensor import Tensor

LOGIT_LIMIT = 15.0
NOISE_KINDS = ("logistic", "paper_gumbel")


@dataclass(frozen=True)
class StretchParams:
    l0: float = -0.1
    l1: float = 1.1

    def __post_init__(self):
        if not (self.l0 < 0.0 and self.l1 > 1.0):
            raise ValueError(f"stretch needs l0 < 0 < 1 < l1, got ({self.l0}, {self.l1})")


@dataclass(frozen=True)
class KumaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Kumaraswamy shapes must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class BetaParams:
    alpha_b: float
    beta_b: float

    def __post_init__(self):
        if not (self.alpha_b > 0 and self.beta_b > 0):
            raise ValueError(f"Beta shapes must be positive, got {self.alpha_b}, {self.beta_b}")


def _lift(x) -> tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, True
    return Tensor(x), False


def _lower(t: Tensor, keep: bool):
    if keep:
        return t
    return float(t.data) if t.data.ndim == 0 else t.data


def _open_unit(name: str, u) -> np.ndarray:
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")
    return u


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


# -- noise --------------------------------------------------------------------

def gumbel(u):
    """Gumbel(0, 1) draw from a uniform: ``-log(-log u)``."""
    u = _open_unit("u", u)
    g = -np.log(-np.log(u))
    return float(g) if g.ndim == 0 else g


def logistic(u):
    """Logistic(0, 1) draw ``log u - log(1 - u)`` (difference of two Gumbels)."""
    u = _open_unit("u", u)
    out = np.log(u) - np.log1p(-u)
    return float(out) if out.ndim == 0 else out


def _noise(u, noise: str) -> np.ndarray:
    if noise == "logistic":
        return np.asarray(logistic(u))
    if noise == "paper_gumbel":
        return np.asarray(gumbel(u))
    raise ValueError(f"unknown noise kind {noise!r}; expected one of {NOISE_KINDS}")


# -- Bernoulli / binary concrete ---------------------------------------------

def kl_bernoulli(theta, pi):
    """KL(Bernoulli(theta) || Bernoulli(pi)), elementwise."""
    th, keep = _lift(theta)
    pt, keep_pi = _lift(pi)
    if np.any(th.data <= 0) or np.any(th.data >= 1):
        raise ValueError("theta must lie strictly inside (0, 1)")
    if np.any(pt.data <= 0) or np.any(pt.data >= 1):
        raise ValueError("pi must lie strictly inside (0, 1)")
    one_th = T.sub(1.0, th)
    one_pi = T.sub(1.0, pt)
    kl = T.add(T.mul(th, T.sub(T.log(th), T.log(pt))),
               T.mul(one_th, T.sub(T.log(one_th), T.log(one_pi))))
    return _lower(kl, keep or keep_pi)


def sample_concrete(logit, tau: float, u, noise: str = "logistic"):
    """Binary-concrete relaxation ``sigmoid((logit + noise) / tau)``."""
    _check_tau(tau)
    lt, keep = _lift(logit)
    eps = _noise(u, noise)
    return _lower(T.sigmoid(T.scalar_mul(T.add(lt, eps), 1.0 / tau)), keep)


def stretch_and_rectify(h, stretch: StretchParams):
    ht, keep = _lift(h)
    stretched = T.add(T.scalar_mul(ht, stretch.l1 - stretch.l0), stretch.l0)
    return _lower(T.clamp(stretched, 0.0, 1.0), keep)


def sample_hard_concrete(logit, tau: float, u, stretch: StretchParams = StretchParams(),
                         noise: str = "logistic"):
    """Stretched, rectified binary concrete; exact 0 and 1 have positive mass."""
    lt, keep = _lift(logit)
    h = sample_concrete(lt, tau, u, noise)
    return _lower(stretch_and_rectify(h, stretch), keep)


def expected_l0_hard_concrete(logit, tau: float, stretch: StretchParams = StretchParams()):
    """Probability that a hard-concrete gate is non-zero."""
    _check_tau(tau)
    lt, keep = _lift(logit)
    shift = -tau * np.log(-stretch.l0 / stretch.l1)
    return _lower(T.sigmoid(T.add(lt, shift)), keep)


# -- Kumaraswamy --------------------------------------------------------------

def kuma_cdf(x, a: float, b: float):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):  # x = 1 gives log1p(-1) = -inf, cdf 1
        out = -np.expm1(b * np.log1p(-np.power(x, a)))
    return float(out) if out.ndim == 0 else out


def kuma_pdf(x, a: float, b: float):
    x = np.asarray(x, dtype=np.float64)
    out = a * b * np.power(x, a - 1) * np.power(1 - np.power(x, a), b - 1)
    return float(out) if out.ndim == 0 else out


def sample_kuma(params, u):
    """Inverse-CDF Kumaraswamy draw ``(1 - (1 - u)^(1/b))^(1/a)``.

    ``params`` is a :class:`KumaParams` or an ``(a, b)`` pair whose entries
    may be tensors, in which case the sample is differentiable in them.
    """
    a, b = (params.a, params.b) if isinstance(params, KumaParams) else params
    at, keep_a = _lift(a)
    bt, keep_b = _lift(b)
    if np.any(at.data <= 0) or np.any(bt.data <= 0):
        raise ValueError("Kumaraswamy shapes must be positive")
    u = _open_unit("u", u)
    log1mu = np.log1p(-u)
    # (1 - u)^(1/b), then 1 - that, kept strictly positive for the log
    inner = T.exp(T.mul(log1mu, T.exp(T.scalar_mul(T.log(bt), -1.0))))
    base = T.clamp(T.sub(1.0, inner), 1e-300, 1.0)
    x = T.exp(T.mul(T.log(base), T.exp(T.scalar_mul(T.log(at), -1.0))))
    return _lower(x, keep_a or keep_b)


def sample_hard_kuma(params, u, stretch: StretchParams = StretchParams()):
    a, b = (params.a, params.b) if isinstance(params, KumaParams) else params
    keep = isinstance(a, Tensor) or isinstance(b, Tensor)
    x = sample_kuma((a, b), u)
    return _lower(stretch_and_rectify(_lift(x)[0], stretch), keep)


def kuma_from_logit(logit):
    """Single-logit Kumaraswamy parameterization ``(a, b) = (exp(logit), 1)``.

    Kuma(a, 1) has mean ``a / (a + 1) = sigmoid(logit)``, so the explainer's
    Bernoulli probability keeps its meaning under either distribution.
    """
    lt, _ = _lift(logit)
    return T.exp(lt), Tensor(np.ones(lt.shape))


def _kuma_series_term(m, a: float, b: float):
    return np.exp(special.betaln(m / a, b)) / (m + a * b)


def kl_kuma_beta(q: KumaParams, p: BetaParams, series_terms: int = 10,
                 tail_correction: bool = True) -> float:
    """KL(Kumaraswamy(a, b) || Beta(alpha, beta)) via the truncated series.

    The infinite sum over ``B(m/a, b) / (m + ab)`` decays only like
    ``m^-(1+b)``; with ``tail_correction`` the remainder after
    ``series_terms`` terms is added by Euler-Maclaurin (integral of the
    summand plus the first two boundary corrections).
    """
    if series_terms < 1:
        raise ValueError("series_terms must be >= 1")
    a, b = q.a, q.b
    alpha, beta = p.alpha_b, p.beta_b
    m = np.arange(1, series_terms + 1, dtype=np.float64)
    total = float(np.sum(_kuma_series_term(m, a, b)))
    if tail_correction:
        M = float(series_terms)
        f_m = _kuma_series_term(M, a, b)
        df_m = f_m * ((special.digamma(M / a) - special.digamma(M / a + b)) / a - 1.0 / (M + a * b))
        tail = integrate.quad(lambda t: _kuma_series_term(t, a, b), M, np.inf, limit=200)[0]
        total += tail - f_m / 2.0 - df_m / 12.0
    return float(
        (a - alpha) / a * (-np.euler_gamma - special.digamma(b) - 1.0 / b)
        + np.log(a * b)
        + special.betaln(alpha, beta)
        - (b - 1.0) / b
        + (beta - 1.0) * b * total
    )
