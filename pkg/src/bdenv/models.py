"""Birth-death models with environment-dependent rates.

A model is a pair of rate families lambda_n(z) (births) and mu_n(z) (deaths),
indexed by the level n and an opaque environment point z.  Everything the
invariant-measure machinery needs flows through the cumulative rate ratios

    r_0(z) = 1,    r_n(z) = prod_{k=1..n} lambda_{k-1}(z) / mu_k(z),

which for a frozen environment are the unnormalized stationary weights of the
level chain.  Ratios are kept in log space throughout: products of hundreds of
factors overflow or underflow double precision long before the weights stop
being meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import logsumexp

from .errors import Divergence, DomainError, MissingParam, UnknownModel, ZeroDeathRate

RateFn = Callable[[Any, Any], Any]

_RATIO_WINDOW_MIN = 8
_DIVERGENCE_DELTA = 1e-6


def _constant_variability(n):
    return np.ones_like(np.asarray(n, dtype=float)) if np.ndim(n) else 1.0


@dataclass(frozen=True)
class ModelSpec:
    """Rate families of one birth-death model.

    birth_rate(n, z) must be >= 0 for n >= 0; death_rate(n, z) must be > 0
    for n >= 1 (level 0 has no death).  Both should broadcast over numpy
    arrays of levels when possible; scalar-only callables are tolerated.
    variability(n) is the per-level tempering beta_n > 0 of the environment
    clock; it never affects the invariant measure, only the dynamics.
    """

    name: str
    birth_rate: RateFn
    death_rate: RateFn
    variability: Callable[[Any], Any] = field(default=_constant_variability)
    truncation_hint: int = 512


@dataclass(frozen=True)
class CumulativeRatio:
    """log r_n(z) for n = 0..truncated_at, plus the per-step ratios.

    log_values[n] may be -inf when some birth rate along the way is zero
    (gated models); it is never +inf or NaN for admissible rates.
    step_ratios[k-1] = lambda_{k-1}(z) / mu_k(z) for k = 1..truncated_at.
    """

    log_values: np.ndarray
    step_ratios: np.ndarray
    z: Any
    truncated_at: int

    @property
    def values(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_values)

    def value(self, n: int) -> float:
        return float(np.exp(self.log_values[n]))


@dataclass(frozen=True)
class NormalizedWeights:
    """Stationary level weights kappa_n = kappa_0 r_n at a frozen z.

    kappa sums to 1 - tail_bound, where tail_bound is the certified bound on
    the mass beyond the truncation level.
    """

    kappa: np.ndarray
    log_kappa: np.ndarray
    tail_bound: float
    z: Any


@dataclass(frozen=True)
class SummabilityReport:
    """Outcome of the geometric-tail test for sum_n r_n(z) < infinity."""

    summable: bool
    status: str  # "summable" | "divergent" | "inconclusive"
    residual: float
    ratio_window: tuple
    n_max: int
    z: Any


def _level_rates(model: ModelSpec, z, n_max: int):
    """Evaluate lambda_{0..n_max-1}(z) and mu_{1..n_max}(z) as flat arrays."""
    births = np.arange(0, n_max)
    deaths = np.arange(1, n_max + 1)
    try:
        lam = np.broadcast_to(
            np.asarray(model.birth_rate(births, z), dtype=float), (n_max,)
        ).copy()
        mu = np.broadcast_to(
            np.asarray(model.death_rate(deaths, z), dtype=float), (n_max,)
        ).copy()
    except Exception:
        lam = np.array([float(model.birth_rate(int(k), z)) for k in births])
        mu = np.array([float(model.death_rate(int(k), z)) for k in deaths])
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        bad = int(np.argmax(~np.isfinite(lam) | (lam < 0)))
        raise DomainError(f"birth rate lambda_{bad}(z={z!r}) = {lam[bad]} is not admissible")
    if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
        bad = int(np.argmax(~np.isfinite(mu) | (mu <= 0)))
        raise ZeroDeathRate(f"death rate mu_{bad + 1}(z={z!r}) = {mu[bad]} must be positive")
    return lam, mu


def cumulative_ratio(model: ModelSpec, z, n_max: int) -> CumulativeRatio:
    """Compute log r_n(z) for n = 0..n_max.

    r_n(z) = prod_{k=1..n} lambda_{k-1}(z)/mu_k(z), r_0 = 1.  Accumulated as a
    cumulative sum of log ratios; a zero birth rate makes every later level
    carry log r = -inf, which downstream treats as zero weight.
    """
    if n_max < 0:
        raise DomainError("n_max must be nonnegative")
    lam, mu = _level_rates(model, z, n_max) if n_max > 0 else (np.empty(0), np.empty(0))
    with np.errstate(divide="ignore"):
        steps = np.log(lam) - np.log(mu)
    log_values = np.concatenate(([0.0], np.cumsum(steps)))
    # -inf + finite stays -inf; cumsum after the first -inf must stay -inf,
    # which holds because later steps are finite or -inf, never +inf.
    with np.errstate(invalid="ignore"):
        ratios = lam / mu
    return CumulativeRatio(
        log_values=log_values, step_ratios=ratios, z=z, truncated_at=n_max
    )


def trailing_ratio(cr: CumulativeRatio) -> float:
    """Largest step ratio over the trailing window the tail bound uses."""
    n_max = cr.truncated_at
    if n_max == 0:
        return np.inf
    w = min(max(_RATIO_WINDOW_MIN, n_max // 8), n_max)
    return float(np.max(cr.step_ratios[-w:]))


def _tail_log_bound(cr: CumulativeRatio) -> float:
    """Log of a geometric bound on sum_{n > n_max} r_n, or raise Divergence.

    Uses the largest step ratio over the trailing window as the geometric
    rate; valid whenever the true ratios beyond the truncation stay below it,
    which holds for monotone-ratio families (every catalog model).
    """
    n_max = cr.truncated_at
    if n_max == 0:
        raise Divergence("cannot bound the tail with n_max = 0")
    rho = trailing_ratio(cr)
    if not rho < 1.0 - _DIVERGENCE_DELTA:
        raise Divergence(
            f"trailing ratio {rho:.6g} at n_max={n_max} shows no geometric decay; "
            "the weight series may diverge or n_max is too small"
        )
    if rho <= 0.0:
        return -np.inf
    return float(cr.log_values[-1] + np.log(rho) - np.log1p(-rho))


def normalized_weights(model: ModelSpec, z, n_max: int, tol: float = 1e-10) -> NormalizedWeights:
    """Normalized stationary weights kappa_n(z) over levels 0..n_max.

    kappa_0 = 1 / sum_{n>=0} r_n(z); the part of the series beyond n_max is
    covered by a geometric tail bound which must stay below `tol` relative to
    the total, else Divergence is raised.  All sums run through logsumexp.
    """
    cr = cumulative_ratio(model, z, n_max)
    log_tail = _tail_log_bound(cr)
    log_total = float(np.logaddexp(logsumexp(cr.log_values), log_tail))
    rel_tail = float(np.exp(log_tail - log_total))
    if rel_tail > tol:
        raise Divergence(
            f"tail mass {rel_tail:.3g} beyond n_max={n_max} exceeds tol={tol:.3g}; "
            "increase n_max"
        )
    log_kappa = cr.log_values - log_total
    return NormalizedWeights(
        kappa=np.exp(log_kappa),
        log_kappa=log_kappa,
        tail_bound=float(np.exp(log_tail - log_total)),
        z=z,
    )


def check_summability(model: ModelSpec, z, n_max: int = 512,
                      delta: float = 1e-3) -> SummabilityReport:
    """Geometric-ratio test for sum_n r_n(z) < infinity.

    Looks at the step ratios lambda_{n-1}/mu_n over a trailing window:
    all below 1 - delta certifies a summable tail (with a residual bound),
    all above 1 + delta reports divergence, anything else is inconclusive
    (e.g. a critical random walk with ratio exactly 1).
    """
    cr = cumulative_ratio(model, z, n_max)
    w = min(max(10, n_max // 8), n_max)
    window = cr.step_ratios[-w:]
    rmax = float(np.max(window))
    rmin = float(np.min(window))
    if rmax < 1.0 - delta:
        residual = float(np.exp(cr.log_values[-1]) * rmax / (1.0 - rmax)) if rmax > 0 else 0.0
        return SummabilityReport(True, "summable", residual, (rmin, rmax), n_max, z)
    if rmin > 1.0 + delta:
        return SummabilityReport(False, "divergent", np.inf, (rmin, rmax), n_max, z)
    return SummabilityReport(False, "inconclusive", np.nan, (rmin, rmax), n_max, z)


def _resolve_param(value):
    """Turn a catalog parameter into a callable of the environment point.

    Accepts a number (constant), a mapping keyed by environment label, a
    callable z -> value, the string "env" (the environment value itself), or
    "env[i]" (component i of a vector environment).
    """
    if isinstance(value, str):
        if value == "env":
            return lambda z: z
        if value.startswith("env[") and value.endswith("]"):
            idx = int(value[4:-1])
            return lambda z: z[idx]
        raise DomainError(f"unrecognized rate parameter string {value!r}")
    if callable(value):
        return value
    if isinstance(value, Mapping):
        table = dict(value)
        return lambda z: table[z]
    const = float(value)
    return lambda z: const


def _variability_from(params: Mapping[str, Any]):
    beta = params.get("beta")
    if beta is None:
        return _constant_variability
    if callable(beta):
        return beta
    if isinstance(beta, (tuple, list)) and len(beta) == 2 and beta[0] == "geometric":
        a = float(beta[1])
        if not 0 < a:
            raise DomainError("geometric variability base must be positive")
        return lambda n: a ** np.asarray(n, dtype=float) if np.ndim(n) else a ** n
    const = float(beta)
    return lambda n: const * np.ones_like(np.asarray(n, dtype=float)) if np.ndim(n) else const


def geometric_variability(a: float):
    """beta_n = a^n, the standard per-level tempering of the environment clock."""
    a = float(a)
    if a <= 0:
        raise DomainError("geometric variability base must be positive")

    def beta(n):
        return a ** np.asarray(n, dtype=float) if np.ndim(n) else a ** n

    return beta


def _require(params: Mapping[str, Any], name: str, *keys: str):
    out = []
    for key in keys:
        if key not in params:
            raise MissingParam(f"model {name!r} requires parameter {key!r}")
        out.append(params[key])
    return out


def catalog(name: str, params: Mapping[str, Any]) -> ModelSpec:
    """Build one of the stock models.

    Names and parameters:
      mm1            lam, mu            single server
      mminf          lam, mu            infinite server, mu_n = n mu
      mmk            lam, mu, K         K servers, mu_n = min(n, K) mu
      mmk0           lam, mu, K         K servers and no queueing (loss):
                                        births gated off at n >= K
      mmk_plus_m     lam, mu, K, gamma  K servers with abandonment:
                                        mu_n = min(n,K) mu + max(n-K,0) gamma
      linear_growth  lam, theta, mu     lambda_n = n lam + theta, mu_n = n mu
      growth_stock   lam, theta, mu, vartheta
                                        lambda_n = n lam + theta,
                                        mu_n = n mu + vartheta

    Rate parameters may be numbers, mappings keyed by environment label,
    callables of z, or the strings "env"/"env[i]".  Optional: beta (constant,
    ("geometric", a), or a callable n -> beta_n) and truncation_hint.
    """
    params = dict(params)
    hint = int(params.get("truncation_hint", 512))
    variability = _variability_from(params)

    if name == "mm1":
        lam, mu = map(_resolve_param, _require(params, name, "lam", "mu"))
        birth = lambda n, z: lam(z) * np.ones_like(np.asarray(n, dtype=float))
        death = lambda n, z: mu(z) * np.ones_like(np.asarray(n, dtype=float))
    elif name == "mminf":
        lam, mu = map(_resolve_param, _require(params, name, "lam", "mu"))
        birth = lambda n, z: lam(z) * np.ones_like(np.asarray(n, dtype=float))
        death = lambda n, z: np.asarray(n, dtype=float) * mu(z)
    elif name == "mmk":
        lam, mu = map(_resolve_param, _require(params, name, "lam", "mu"))
        K = int(_require(params, name, "K")[0])
        birth = lambda n, z: lam(z) * np.ones_like(np.asarray(n, dtype=float))
        death = lambda n, z: np.minimum(np.asarray(n, dtype=float), K) * mu(z)
    elif name == "mmk0":
        (lam, mu) = map(_resolve_param, _require(params, name, "lam", "mu"))
        K = int(_require(params, name, "K")[0])
        birth = lambda n, z: np.where(np.asarray(n) < K, lam(z), 0.0)
        death = lambda n, z: np.minimum(np.asarray(n, dtype=float), K) * mu(z)
    elif name == "mmk_plus_m":
        (lam, mu, gam) = map(_resolve_param, _require(params, name, "lam", "mu", "gamma"))
        K = int(_require(params, name, "K")[0])
        birth = lambda n, z: lam(z) * np.ones_like(np.asarray(n, dtype=float))
        death = lambda n, z: (
            np.minimum(np.asarray(n, dtype=float), K) * mu(z)
            + np.maximum(np.asarray(n, dtype=float) - K, 0.0) * gam(z)
        )
    elif name == "linear_growth":
        (lam, theta, mu) = map(_resolve_param, _require(params, name, "lam", "theta", "mu"))
        birth = lambda n, z: np.asarray(n, dtype=float) * lam(z) + theta(z)
        death = lambda n, z: np.asarray(n, dtype=float) * mu(z)
    elif name == "growth_stock":
        (lam, theta, mu, vartheta) = map(
            _resolve_param, _require(params, name, "lam", "theta", "mu", "vartheta")
        )
        birth = lambda n, z: np.asarray(n, dtype=float) * lam(z) + theta(z)
        death = lambda n, z: np.asarray(n, dtype=float) * mu(z) + vartheta(z)
    else:
        raise UnknownModel(f"no catalog model named {name!r}")

    return ModelSpec(
        name=name,
        birth_rate=birth,
        death_rate=death,
        variability=variability,
        truncation_hint=hint,
    )
