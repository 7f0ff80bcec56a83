"""Biased stochastic hypergradient estimator via a randomized truncated
Neumann series, its bias bound, and the truncation-budget selection rules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateArgument,
    InvalidConstants,
    NonfiniteValue,
    SingularDenominator,
)
from .oracle import BilevelOracle, IteratePair, ProblemConstants, Vector
from .sampling import STREAM_K_DRAW, STREAM_XI, STREAM_ZETA, SampleToken

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeumannConfig:
    """Truncation budget and the lower-level spectrum bounds that scale it."""

    K: int
    L_g: float
    mu_g: float

    def __post_init__(self):
        if self.K < 1:
            raise InvalidConstants("K must be >= 1")
        if not (0 < self.mu_g <= self.L_g):
            raise InvalidConstants("need 0 < mu_g <= L_g")

    @classmethod
    def from_constants(cls, c: ProblemConstants, K: int) -> "NeumannConfig":
        return cls(K=K, L_g=c.L_g, mu_g=c.mu_g)


@dataclass(frozen=True)
class HyperGradSample:
    value: Vector
    k_drawn: int
    hvp_count: int


@dataclass(frozen=True)
class BiasBound:
    bound: float


def draw_k(cfg: NeumannConfig, token: SampleToken) -> int:
    """The uniform truncation index; part of the composite sample, so a
    coupled re-evaluation at another iterate sees the same k."""
    return int(token.child(STREAM_K_DRAW).rng().integers(cfg.K))


def estimate(
    oracle: BilevelOracle,
    at: IteratePair,
    cfg: NeumannConfig,
    sample: SampleToken,
) -> HyperGradSample:
    """One draw of the truncated-series hypergradient estimator.

    Computes grad_x f - (K/L_g) * H_xy * prod_{i=1..k}(I - H_yy^(i)/L_g) *
    grad_y f, applied right-to-left as k+1 Hessian-vector products.  The
    empty product (k = 0) is the identity.
    """
    oracle.check_dims(at)
    k = draw_k(cfg, sample)
    xi = sample.child(STREAM_XI)
    p = oracle.grad_y_f_sample(at, xi)
    inv_lg = 1.0 / cfg.L_g
    for i in range(1, k + 1):
        hvp = oracle.hess_yy_g_sample(at, sample.child(STREAM_ZETA, i))
        p = p - inv_lg * hvp(p)
    cross = oracle.hess_xy_g_sample(at, sample.child(STREAM_ZETA, 0))
    value = oracle.grad_x_f_sample(at, xi) - (cfg.K * inv_lg) * cross(p)
    if not np.all(np.isfinite(value)):
        raise NonfiniteValue("hypergradient sample contains NaN/Inf")
    return HyperGradSample(value=value, k_drawn=k, hvp_count=k + 1)


def exact_neumann_expectation(
    hess_yy: np.ndarray,
    hess_xy: np.ndarray,
    grad_x_f: Vector,
    grad_y_f: Vector,
    K: int,
    L_g: float,
) -> Vector:
    """Closed-form expectation of the estimator for deterministic Hessians.

    Averaging the randomized product over k gives (1/L_g) * sum_{k=0}^{K-1}
    (I - A/L_g)^k applied to grad_y f, then the cross Hessian and grad_x f.
    """
    d = hess_yy.shape[0]
    M = np.eye(d) - hess_yy / L_g
    acc = np.zeros(d)
    p = np.asarray(grad_y_f, dtype=float)
    for _ in range(K):
        acc += p
        p = M @ p
    return np.asarray(grad_x_f, dtype=float) - hess_xy @ (acc / L_g)


def bias_bound(c: ProblemConstants, K: int) -> BiasBound:
    """Worst-case estimator bias: (C_gxy C_fy / mu_g) (1 - mu_g/L_g)^K."""
    if c.mu_g <= 0 or c.mu_g > c.L_g:
        raise InvalidConstants("need 0 < mu_g <= L_g")
    if K < 1:
        raise InvalidConstants("K must be >= 1")
    contraction = 1.0 - c.mu_g / c.L_g
    return BiasBound(bound=(c.C_gxy * c.C_fy / c.mu_g) * contraction**K)


def _choose_k(c: ProblemConstants, log_arg: float, multiplier: float) -> int:
    if c.mu_g <= 0 or c.mu_g > c.L_g:
        raise InvalidConstants("need 0 < mu_g <= L_g")
    if log_arg <= 1.0:
        logger.warning(
            "K-selection argument %.3g <= 1: bias already within the target "
            "at K = 1", log_arg,
        )
        return 1
    return max(1, math.ceil(multiplier * math.log(log_arg)))


def choose_K_nonconvex(c: ProblemConstants, T: int) -> int:
    """Truncation budget making the bias at most 1/T (non-convex schedule)."""
    if T < 1:
        raise DegenerateArgument("T must be >= 1")
    return _choose_k(c, c.C_gxy * c.C_fy * T / c.mu_g, c.L_g / c.mu_g)


def choose_K_strongly_convex(c: ProblemConstants, T: int) -> int:
    """Truncation budget making the squared bias at most 1/T."""
    if T < 1:
        raise DegenerateArgument("T must be >= 1")
    return _choose_k(
        c, (c.C_gxy**2) * (c.C_fy**2) * T / c.mu_g**2, c.L_g / (2.0 * c.mu_g)
    )


def lipschitz_L_K(c: ProblemConstants, K: int) -> float:
    """Mean-square Lipschitz constant of the sampled estimator w.r.t. the
    iterate, growing as sqrt(K^3) through the product term."""
    if c.mu_g <= 0 or c.mu_g > c.L_g:
        raise InvalidConstants("need 0 < mu_g <= L_g")
    if K < 1:
        raise InvalidConstants("K must be >= 1")
    denom = 2.0 * c.mu_g * c.L_g - c.mu_g**2
    cubic_num = 6.0 * c.C_gxy**2 * c.C_fy**2 * c.L_gyy**2 * K**3
    if c.L_g == c.mu_g:
        if cubic_num > 0:
            raise SingularDenominator(
                "L_K is undefined at mu_g == L_g with a nonzero product term"
            )
        cubic = 0.0
    else:
        cubic = cubic_num / ((c.L_g - c.mu_g) ** 2 * denom)
    return math.sqrt(
        2.0 * c.L_fx**2
        + 6.0 * c.C_gxy**2 * c.L_fy**2 * K / denom
        + 6.0 * c.C_fy**2 * c.L_gxy**2 * K / denom
        + cubic
    )
