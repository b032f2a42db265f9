"""Reflected (jump) diffusion environments and their stationary laws.

Each stock example pairs a reflected SDE with the closed-form stationary law
used by the product-form joint measure:

  rbm_halfline          dZ = -c dt + sigma dW, reflected at 0
                        -> Exp(2c/sigma^2)
  rbm_shifted           same dynamics reflected at mu0 > 0
                        -> mu0 + Exp(2c/sigma^2)
  rbm_product_orthant   dZ = -c dt + L dW + R dY in a shifted orthant with
                        skew-symmetric data (2 Sigma = R D + D R^T)
                        -> product of exponentials, alpha = 2 D^{-1} R^{-1} c
  reflected_ou          dZ = -2 c Z dt + sigma dW, reflected at 0
                        -> one-sided Gaussian with density prop. to
                           exp(-(2c/sigma^2) z^2)
  jump_rbm              dZ = -c dt + sigma dW + jumps(kappa, K), reflected
                        at 0 -> law known through its MGF
                           Psi(u) = M u / F(u),
                           F(u) = c u - sigma^2 u^2 / 2 - kappa Psi_K(u) + kappa,
                           M = F'(0) = c - kappa * mean(K)

Reflection in simulation is by folding (normal reflection) or a projected
Gauss-Seidel complementarity solve (oblique orthant reflection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy import integrate
from scipy.special import erf, erfinv, logsumexp

from .errors import (
    Divergence,
    DomainError,
    NegativeEffectiveDrift,
    SkewSymmetryFailed,
    SpeedCap,
    StepRejected,
    XiDivergent,
)
from .models import ModelSpec, cumulative_ratio
from .models import _tail_log_bound as _series_tail
from .models import trailing_ratio as _trailing_ratio
from .stats import EmpiricalMeasure

_LCP_MAX_ITER = 200
_LCP_TOL = 1e-12


# ---------------------------------------------------------------------------
# domains and reflection


@dataclass(frozen=True)
class DomainSpec:
    """A reflection domain.

    kind: "half_line" (z >= lower), "interval" (lo <= z <= hi), "orthant"
    (z_i >= shifts_i, normal or oblique reflection), or "variable_half_line"
    (z >= lower_fn(n), the bound moving with the level).
    """

    kind: str
    lower: float = 0.0
    hi: float = math.inf
    dim: int = 1
    shifts: tuple = ()
    reflection_matrix: Any = None
    lower_fn: Callable[[int], float] | None = None

    def lower_bound(self, n: int | None = None) -> float:
        if self.kind == "variable_half_line":
            if n is None:
                raise DomainError("variable domain needs the level n")
            return float(self.lower_fn(n))
        return self.lower

    def contains(self, z, n: int | None = None) -> bool:
        if self.kind in ("half_line", "variable_half_line"):
            return bool(np.all(np.asarray(z) >= self.lower_bound(n) - 1e-12))
        if self.kind == "interval":
            z = float(np.asarray(z))
            return self.lower - 1e-12 <= z <= self.hi + 1e-12
        shifts = np.asarray(self.shifts)
        return bool(np.all(np.asarray(z) >= shifts - 1e-12))


def half_line(lower: float = 0.0) -> DomainSpec:
    return DomainSpec(kind="half_line", lower=float(lower))


def interval(lo: float, hi: float) -> DomainSpec:
    if not lo < hi:
        raise DomainError("interval needs lo < hi")
    return DomainSpec(kind="interval", lower=float(lo), hi=float(hi))


def orthant(dim: int, shifts=None, reflection_matrix=None) -> DomainSpec:
    shifts = tuple(float(s) for s in (shifts if shifts is not None else [0.0] * dim))
    if len(shifts) != dim:
        raise DomainError("shifts length must equal dim")
    R = None
    if reflection_matrix is not None:
        R = np.asarray(reflection_matrix, dtype=float)
        if R.shape != (dim, dim):
            raise DomainError("reflection matrix must be dim x dim")
        if np.any(np.diag(R) <= 0):
            raise DomainError("reflection matrix needs positive diagonal")
    return DomainSpec(kind="orthant", dim=dim, shifts=shifts, reflection_matrix=R)


def variable_half_line(lower_fn: Callable[[int], float]) -> DomainSpec:
    return DomainSpec(kind="variable_half_line", lower_fn=lower_fn)


def _fold_half_line(z, lo):
    return lo + np.abs(np.asarray(z) - lo)


def _fold_interval(z, lo, hi):
    width = hi - lo
    y = np.mod(np.asarray(z) - lo, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return lo + y


def _oblique_project(x: np.ndarray, shifts: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Skorokhod-type projection y = x + R delta, delta >= 0, y >= shifts,
    delta_i (y_i - shifts_i) = 0, by projected Gauss-Seidel."""
    dim = x.shape[0]
    delta = np.zeros(dim)
    scale = max(float(np.max(np.abs(x - shifts))), 1.0)
    for _ in range(_LCP_MAX_ITER):
        worst = 0.0
        for i in range(dim):
            y_i = x[i] + float(R[i] @ delta)
            new = max(0.0, delta[i] + (shifts[i] - y_i) / R[i, i])
            worst = max(worst, abs(new - delta[i]))
            delta[i] = new
        if worst <= _LCP_TOL * scale:
            y = x + R @ delta
            # complementarity can leave y_i == shifts_i - O(tol); clamp
            return np.maximum(y, shifts)
    raise StepRejected("oblique reflection solve did not converge")


def reflect_into(domain: DomainSpec, z, n: int | None = None):
    """Map an unconstrained proposal back into the domain."""
    if domain.kind == "half_line":
        return _fold_half_line(z, domain.lower)
    if domain.kind == "variable_half_line":
        return _fold_half_line(z, domain.lower_bound(n))
    if domain.kind == "interval":
        return _fold_interval(z, domain.lower, domain.hi)
    if domain.kind == "orthant":
        x = np.asarray(z, dtype=float)
        shifts = np.asarray(domain.shifts)
        if domain.reflection_matrix is None:
            return shifts + np.abs(x - shifts)
        return _oblique_project(x, shifts, domain.reflection_matrix)
    raise DomainError(f"unknown domain kind {domain.kind!r}")


# ---------------------------------------------------------------------------
# processes


@dataclass(frozen=True)
class DiffusionSpec:
    """A reflected jump diffusion dZ = b dt + sigma dW + jumps, reflected.

    drift(z) and diffusion(z) return a scalar (1D) or vector/matrix; jumps
    arrive at rate jump_intensity with sizes drawn from jump_law.sample(rng)
    (applied before reflection, at most one per step).
    """

    drift: Callable
    diffusion: Callable
    domain: DomainSpec
    jump_intensity: float = 0.0
    jump_law: Any = None

    @property
    def dim(self) -> int:
        return self.domain.dim if self.domain.kind == "orthant" else 1


def step_reflected(spec: DiffusionSpec, z, dt: float, rng,
                   n_context: int | None = None, speed: float = 1.0,
                   speed_cap: float = math.inf):
    """One Euler step over effective time h = dt * speed, then reflect."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    if not speed > 0:
        raise DomainError("speed must be positive")
    if speed > speed_cap:
        raise SpeedCap(f"environment speed {speed:.3g} exceeds cap {speed_cap:.3g}")
    h = dt * speed
    if spec.dim == 1:
        z = float(np.asarray(z))
        b = float(spec.drift(z))
        s = float(spec.diffusion(z))
        znew = z + b * h + s * math.sqrt(h) * rng.standard_normal()
        if spec.jump_intensity > 0 and rng.random() < -math.expm1(-spec.jump_intensity * h):
            znew += float(spec.jump_law.sample(rng))
        return float(reflect_into(spec.domain, znew, n_context))
    z = np.asarray(z, dtype=float)
    b = np.asarray(spec.drift(z), dtype=float)
    s = np.asarray(spec.diffusion(z), dtype=float)
    noise = rng.standard_normal(spec.dim)
    znew = z + b * h + math.sqrt(h) * (s @ noise if s.ndim == 2 else s * noise)
    if spec.jump_intensity > 0 and rng.random() < -math.expm1(-spec.jump_intensity * h):
        znew = znew + np.asarray(spec.jump_law.sample(rng), dtype=float)
    return reflect_into(spec.domain, znew, n_context)


def simulate_env_path(spec: DiffusionSpec, z0, dt: float, n_steps: int, seed: int,
                      burn_in_steps: int = 0, thin: int = 1,
                      n_context: int | None = None) -> np.ndarray:
    """Fixed-step path of the environment alone; returns thinned samples.

    The 1D case runs a scalar loop over pre-drawn chunks of noise; the
    multi-dimensional case steps through `step_reflected`.
    """
    rng = np.random.default_rng(seed)
    if n_steps <= 0 or burn_in_steps < 0 or thin < 1:
        raise DomainError("bad step counts")
    kept = (n_steps - burn_in_steps + thin - 1) // thin if n_steps > burn_in_steps else 0
    if spec.dim > 1:
        out = np.empty((kept, spec.dim))
        z = np.asarray(z0, dtype=float)
        k = 0
        for i in range(n_steps):
            z = step_reflected(spec, z, dt, rng, n_context=n_context)
            if i >= burn_in_steps and (i - burn_in_steps) % thin == 0:
                out[k] = z
                k += 1
        return out[:k]

    out = np.empty(kept)
    z = float(np.asarray(z0))
    drift = spec.drift
    sig = spec.diffusion
    domain = spec.domain
    lo = domain.lower_bound(n_context) if domain.kind != "interval" else domain.lower
    hi = domain.hi
    sqdt = math.sqrt(dt)
    kappa = spec.jump_intensity
    p_jump = -math.expm1(-kappa * dt) if kappa > 0 else 0.0
    k = 0
    chunk = 65536
    i = 0
    while i < n_steps:
        todo = min(chunk, n_steps - i)
        normals = rng.standard_normal(todo)
        jumps_u = rng.random(todo) if kappa > 0 else None
        for q in range(todo):
            z = z + drift(z) * dt + sig(z) * sqdt * normals[q]
            if kappa > 0 and jumps_u[q] < p_jump:
                z += float(spec.jump_law.sample(rng))
            if domain.kind == "interval":
                width = hi - lo
                y = (z - lo) % (2.0 * width)
                if y > width:
                    y = 2.0 * width - y
                z = lo + y
            else:
                if z < lo:
                    z = 2.0 * lo - z
            step_index = i + q
            if step_index >= burn_in_steps and (step_index - burn_in_steps) % thin == 0:
                out[k] = z
                k += 1
        i += todo
    return out[:k]


# ---------------------------------------------------------------------------
# stationary laws


@dataclass(frozen=True)
class StationaryLaw:
    """Closed-form (or MGF-implicit) stationary law of an environment.

    tag in {exponential, shifted_exponential, product_exponential,
    one_sided_gaussian, truncated_gaussian, mgf_implicit}.  Densities are
    normalized; normalizers without a safe closed form are computed
    numerically at construction.
    """

    tag: str
    params: dict
    domain: DomainSpec

    @property
    def dim(self) -> int:
        if self.tag == "product_exponential":
            return len(self.params["alphas"])
        return 1

    # -- densities ---------------------------------------------------------

    def log_density(self, z) -> float:
        p = self.params
        if self.tag == "exponential":
            a = p["rate"]
            z = float(z)
            return math.log(a) - a * z if z >= 0 else -math.inf
        if self.tag == "shifted_exponential":
            a, s = p["rate"], p["shift"]
            z = float(z)
            return math.log(a) - a * (z - s) if z >= s else -math.inf
        if self.tag == "one_sided_gaussian":
            a = p["a"]
            z = float(z)
            return -a * z * z - math.log(p["_norm"]) if z >= 0 else -math.inf
        if self.tag == "truncated_gaussian":
            a, c0, lo, hi = p["a"], p["center"], p["lo"], p["hi"]
            z = float(z)
            if not lo <= z <= hi:
                return -math.inf
            return -a * (z - c0) ** 2 - math.log(p["_norm"])
        if self.tag == "product_exponential":
            z = np.asarray(z, dtype=float)
            alphas = np.asarray(p["alphas"])
            shifts = np.asarray(p["shifts"])
            if np.any(z < shifts):
                return -math.inf
            return float(np.sum(np.log(alphas) - alphas * (z - shifts)))
        raise DomainError(f"law {self.tag!r} has no density")

    def density(self, z) -> float:
        ld = self.log_density(z)
        return math.exp(ld) if ld > -math.inf else 0.0

    # -- distribution functions --------------------------------------------

    def cdf(self, z):
        p = self.params
        if self.tag == "exponential":
            return -np.expm1(-p["rate"] * np.maximum(np.asarray(z, dtype=float), 0.0))
        if self.tag == "shifted_exponential":
            x = np.maximum(np.asarray(z, dtype=float) - p["shift"], 0.0)
            return -np.expm1(-p["rate"] * x)
        if self.tag == "one_sided_gaussian":
            return erf(np.sqrt(p["a"]) * np.maximum(np.asarray(z, dtype=float), 0.0))
        if self.tag == "truncated_gaussian":
            a, c0, lo, hi = p["a"], p["center"], p["lo"], p["hi"]
            s = math.sqrt(a)
            z = np.clip(np.asarray(z, dtype=float), lo, hi)
            return (erf(s * (z - c0)) - erf(s * (lo - c0))) / (
                erf(s * (hi - c0)) - erf(s * (lo - c0))
            )
        raise DomainError(f"law {self.tag!r} has no scalar cdf")

    def marginal_cdf(self, i: int, z):
        if self.tag != "product_exponential":
            raise DomainError("marginal_cdf is for product laws")
        a = self.params["alphas"][i]
        s = self.params["shifts"][i]
        return -np.expm1(-a * np.maximum(np.asarray(z, dtype=float) - s, 0.0))

    def quantile(self, q: float):
        if not 0 <= q < 1:
            raise DomainError("quantile level must be in [0, 1)")
        p = self.params
        if self.tag == "exponential":
            return -math.log1p(-q) / p["rate"]
        if self.tag == "shifted_exponential":
            return p["shift"] - math.log1p(-q) / p["rate"]
        if self.tag == "one_sided_gaussian":
            return float(erfinv(q)) / math.sqrt(p["a"])
        if self.tag == "product_exponential":
            return np.asarray(
                [s - math.log1p(-q) / a for a, s in zip(p["alphas"], p["shifts"])]
            )
        raise DomainError(f"law {self.tag!r} has no quantile")

    def mean(self):
        p = self.params
        if self.tag == "exponential":
            return 1.0 / p["rate"]
        if self.tag == "shifted_exponential":
            return p["shift"] + 1.0 / p["rate"]
        if self.tag == "one_sided_gaussian":
            return 1.0 / math.sqrt(math.pi * p["a"])
        if self.tag == "product_exponential":
            return np.asarray(p["shifts"]) + 1.0 / np.asarray(p["alphas"])
        if self.tag == "mgf_implicit":
            h = 1e-6 * min(1.0, self.params["u0"])
            return (self.mgf(h) - 1.0) / h
        raise DomainError(f"law {self.tag!r} has no mean")

    # -- sampling ------------------------------------------------------------

    def sample(self, rng, size: int):
        p = self.params
        if self.tag == "exponential":
            return rng.exponential(1.0 / p["rate"], size)
        if self.tag == "shifted_exponential":
            return p["shift"] + rng.exponential(1.0 / p["rate"], size)
        if self.tag == "one_sided_gaussian":
            return np.abs(rng.normal(0.0, 1.0 / math.sqrt(2.0 * p["a"]), size))
        if self.tag == "product_exponential":
            cols = [
                s + rng.exponential(1.0 / a, size)
                for a, s in zip(p["alphas"], p["shifts"])
            ]
            return np.column_stack(cols)
        raise DomainError(f"law {self.tag!r} has no direct sampler")

    # -- MGF-implicit laws ---------------------------------------------------

    def mgf(self, u: float) -> float:
        p = self.params
        if self.tag == "exponential":
            if u >= p["rate"]:
                raise DomainError("MGF argument at or beyond the exponential rate")
            return p["rate"] / (p["rate"] - u)
        if self.tag != "mgf_implicit":
            raise DomainError(f"law {self.tag!r} exposes no MGF")
        if u == 0.0:
            return 1.0
        if u < 0 or u >= p["u0"]:
            raise DomainError(
                f"MGF defined on [0, u0) with u0 = {p['u0']:.6g}, got {u:.6g}"
            )
        F = p["F"]
        return p["M"] * u / F(u)

    def to_json_dict(self) -> dict:
        out = {"tag": self.tag}
        for key, val in self.params.items():
            if key.startswith("_") or callable(val):
                continue
            if isinstance(val, np.ndarray):
                out[key] = val.tolist()
            elif isinstance(val, (tuple, list)):
                out[key] = list(val)
            else:
                out[key] = val
        return out


def skew_symmetry_check(R, Sigma, tol: float = 1e-12) -> tuple[bool, float]:
    """Residual of 2 Sigma = R D + D R^T with D = diag(Sigma_ii)."""
    R = np.asarray(R, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    D = np.diag(np.diag(Sigma))
    resid = float(np.max(np.abs(2.0 * Sigma - R @ D - D @ R.T)))
    scale = max(float(np.max(np.abs(Sigma))), 1.0)
    return resid <= tol * 2.0 * scale, resid


@dataclass(frozen=True)
class ExponentialJumps:
    """I.i.d. exponential jump sizes with the given mean."""

    mean: float

    def sample(self, rng, size=None):
        return rng.exponential(self.mean, size)

    def mgf(self, u: float) -> float:
        if u >= 1.0 / self.mean:
            return math.inf
        return 1.0 / (1.0 - self.mean * u)

    @property
    def mgf_pole(self) -> float:
        return 1.0 / self.mean


def _jump_rbm_law(c: float, sigma: float, kappa: float, jump_law) -> StationaryLaw:
    mean_jump = float(jump_law.mean)
    M = c - kappa * mean_jump
    if M <= 0:
        raise NegativeEffectiveDrift(
            f"net drift c - kappa*mean = {M:.6g} must be positive"
        )

    def F(u: float) -> float:
        return c * u - 0.5 * sigma**2 * u * u - kappa * jump_law.mgf(u) + kappa

    # F is concave with F(0) = 0, F'(0) = M > 0; find the positive root u0.
    pole = getattr(jump_law, "mgf_pole", math.inf)
    hi = min(1.0, 0.5 * pole)
    while F(hi) > 0:
        nxt = min(2.0 * hi, 0.5 * (hi + pole))
        if nxt - hi < 1e-15 * max(hi, 1.0):
            break
        hi = nxt
    lo = hi / 2.0
    while F(lo) <= 0:
        lo /= 2.0
        if lo < 1e-300:
            raise DomainError("failed to bracket the root of F")
    from scipy.optimize import brentq

    u0 = float(brentq(F, lo, hi, xtol=1e-14, rtol=8.9e-16))
    return StationaryLaw(
        tag="mgf_implicit",
        params={
            "c": c,
            "sigma": sigma,
            "kappa": kappa,
            "jump_mean": mean_jump,
            "M": M,
            "u0": u0,
            "F": F,
        },
        domain=half_line(0.0),
    )


def stationary_law(example: str, params: dict) -> StationaryLaw:
    """Stationary law of a stock environment example (see module docstring)."""
    p = dict(params)
    if example == "rbm_halfline":
        c, sigma = float(p["c"]), float(p["sigma"])
        if c <= 0 or sigma <= 0:
            raise DomainError("rbm_halfline needs c > 0 and sigma > 0")
        return StationaryLaw("exponential", {"rate": 2.0 * c / sigma**2}, half_line(0.0))
    if example == "rbm_shifted":
        c, sigma, mu0 = float(p["c"]), float(p["sigma"]), float(p["mu0"])
        if c <= 0 or sigma <= 0 or mu0 < 0:
            raise DomainError("rbm_shifted needs c > 0, sigma > 0, mu0 >= 0")
        return StationaryLaw(
            "shifted_exponential",
            {"rate": 2.0 * c / sigma**2, "shift": mu0},
            half_line(mu0),
        )
    if example == "rbm_product_orthant":
        c = np.asarray(p["c"], dtype=float)
        Sigma = np.asarray(p["Sigma"], dtype=float)
        dim = c.shape[0]
        R = np.asarray(p.get("R", np.eye(dim)), dtype=float)
        shifts = np.asarray(p.get("shifts", np.zeros(dim)), dtype=float)
        ok, resid = skew_symmetry_check(R, Sigma)
        if not ok:
            raise SkewSymmetryFailed(
                f"2 Sigma = R D + D R' fails with residual {resid:.3g}"
            )
        xi = np.linalg.solve(R, c)
        if np.any(xi <= 0):
            raise DomainError(
                "R^{-1} c must be componentwise positive for positive recurrence"
            )
        alphas = 2.0 * xi / np.diag(Sigma)
        return StationaryLaw(
            "product_exponential",
            {"alphas": tuple(alphas.tolist()), "shifts": tuple(shifts.tolist())},
            orthant(dim, shifts=shifts, reflection_matrix=R),
        )
    if example == "reflected_ou":
        c, sigma = float(p["c"]), float(p["sigma"])
        if c <= 0 or sigma <= 0:
            raise DomainError("reflected_ou needs c > 0 and sigma > 0")
        a = 2.0 * c / sigma**2
        norm = integrate.quad(lambda z: math.exp(-a * z * z), 0.0, math.inf)[0]
        return StationaryLaw(
            "one_sided_gaussian", {"a": a, "_norm": norm}, half_line(0.0)
        )
    if example == "jump_rbm":
        return _jump_rbm_law(
            float(p["c"]), float(p["sigma"]), float(p["kappa"]), p["jump_law"]
        )
    raise DomainError(f"unknown environment example {example!r}")


def example_process(example: str, params: dict) -> tuple[DiffusionSpec, StationaryLaw]:
    """The SDE and the stationary law of a stock example, as a pair."""
    law = stationary_law(example, params)
    p = dict(params)
    if example == "rbm_halfline":
        c, sigma = float(p["c"]), float(p["sigma"])
        spec = DiffusionSpec(
            drift=lambda z: -c, diffusion=lambda z: sigma, domain=law.domain
        )
    elif example == "rbm_shifted":
        c, sigma = float(p["c"]), float(p["sigma"])
        spec = DiffusionSpec(
            drift=lambda z: -c, diffusion=lambda z: sigma, domain=law.domain
        )
    elif example == "rbm_product_orthant":
        c = np.asarray(p["c"], dtype=float)
        Sigma = np.asarray(p["Sigma"], dtype=float)
        L = np.linalg.cholesky(Sigma)
        spec = DiffusionSpec(
            drift=lambda z: -c, diffusion=lambda z: L, domain=law.domain
        )
    elif example == "reflected_ou":
        # drift -2 c z pairs with the density exp(-(2c/sigma^2) z^2)
        c, sigma = float(p["c"]), float(p["sigma"])
        spec = DiffusionSpec(
            drift=lambda z: -2.0 * c * z, diffusion=lambda z: sigma, domain=law.domain
        )
    elif example == "jump_rbm":
        c, sigma = float(p["c"]), float(p["sigma"])
        spec = DiffusionSpec(
            drift=lambda z: -c,
            diffusion=lambda z: sigma,
            domain=law.domain,
            jump_intensity=float(p["kappa"]),
            jump_law=p["jump_law"],
        )
    else:
        raise DomainError(f"unknown environment example {example!r}")
    return spec, law


# ---------------------------------------------------------------------------
# Xi and the hybrid invariant measure


@dataclass(frozen=True)
class XiResult:
    value: float
    error_bound: float
    method: str
    detail: dict


def xi_rbm_arrival_closed_form(c: float, sigma: float, mu: float) -> float:
    """Xi for the infinite-server model with arrival rate z over Exp(2c/s^2).

    Xi = alpha / (alpha - 1/mu) with alpha = 2c/sigma^2; diverges unless
    alpha > 1/mu.
    """
    alpha = 2.0 * c / sigma**2
    if alpha <= 1.0 / mu:
        raise XiDivergent(
            f"alpha = {alpha:.6g} <= 1/mu = {1.0 / mu:.6g}: Xi is infinite"
        )
    return alpha / (alpha - 1.0 / mu)


def xi_jump_rbm_closed_form(law: StationaryLaw, mu: float) -> float:
    """Xi = Psi_nu(1/mu) for the infinite-server model over a jump-RBM law."""
    if law.tag != "mgf_implicit":
        raise DomainError("expected an MGF-implicit law")
    u = 1.0 / mu
    if u >= law.params["u0"]:
        raise XiDivergent(
            f"1/mu = {u:.6g} is not below u0 = {law.params['u0']:.6g}: Xi is infinite"
        )
    return law.mgf(u)


_SERIES_TERMS_CAP = 1 << 15


def _log_series_at(model: ModelSpec, z, n_series: int) -> float:
    """log sum_n r_n(z) including the geometric tail bound.

    n_series is a floor, not a commitment: a factorially convergent series
    (infinite-server style) only enters geometric decay past n ~ z / mu, so
    at a large-z quadrature node a failed tail test is retried with twice
    the terms while the trailing ratio keeps dropping.  A stalled ratio
    means the series really has no geometric tail, and that Divergence
    propagates to the caller.
    """
    n = max(n_series, 1)
    rho_prev = math.inf
    while True:
        cr = cumulative_ratio(model, z, n)
        try:
            log_tail = _series_tail(cr)
        except Divergence:
            rho = _trailing_ratio(cr)
            if n >= _SERIES_TERMS_CAP or not rho < 0.95 * rho_prev:
                raise
            rho_prev = rho
            n *= 2
            continue
        return float(np.logaddexp(logsumexp(cr.log_values), log_tail))


def compute_xi_diffusive(model: ModelSpec, law: StationaryLaw, n_series: int = 256,
                         epsabs: float = 1e-10) -> XiResult:
    """Xi = integral of sum_n r_n(z) against the law, by adaptive quadrature.

    One-dimensional laws only.  Divergence is detected two ways: the level
    series itself failing its geometric tail test at some node (XiDivergent),
    and the log integrand not decaying between the 99.9% quantile and twice
    that distance (XiDivergent before any quadrature is attempted).
    """
    if law.dim != 1:
        raise DomainError("quadrature route implemented for one-dimensional laws")
    lo = law.domain.lower

    def log_f(z: float) -> float:
        ld = law.log_density(z)
        if ld == -math.inf:
            return -math.inf
        try:
            return _log_series_at(model, float(z), n_series) + ld
        except Divergence as exc:
            raise XiDivergent(f"level series diverges at z = {z:.6g}: {exc}") from exc

    q999 = law.quantile(0.999)
    z1 = max(q999, lo + 1e-6)
    z2 = lo + 2.0 * (z1 - lo)
    g1, g2 = log_f(z1), log_f(z2)
    slope = (g2 - g1) / (z2 - z1)
    if slope >= -1e-6:
        raise XiDivergent(
            f"log integrand slope {slope:.3g} beyond the 99.9% quantile is not negative"
        )
    # extend the cutoff until the integrand is negligible against its bulk
    probes = np.linspace(lo + 1e-9, z1, 16)
    g_peak = max(log_f(float(z)) for z in probes)
    z_hi = z2
    g_hi = g2
    for _ in range(200):
        if g_hi < g_peak - 46.0:
            break
        z_hi = lo + 2.0 * (z_hi - lo)
        g_new = log_f(z_hi)
        if g_new >= g_hi - 1e-12:
            raise XiDivergent("integrand stops decaying while extending the cutoff")
        g_hi = g_new
    else:
        raise XiDivergent("could not reach a negligible integrand level")

    def f(z: float) -> float:
        lf = log_f(z)
        return math.exp(lf) if lf > -math.inf else 0.0

    value, abserr = integrate.quad(f, lo, z_hi, limit=400, epsabs=epsabs)
    slope_end = (log_f(z_hi) - log_f(0.5 * (z_hi + z1))) / (0.5 * (z_hi - z1))
    tail = math.exp(g_hi) / max(-slope_end, 1e-12)
    return XiResult(
        value=float(value),
        error_bound=float(abserr + tail),
        method="quadrature",
        detail={"cutoff": z_hi, "n_series": n_series, "tail_bound": tail},
    )


@dataclass(frozen=True)
class HybridInvariantMeasure:
    """pi(n, dz) = r_n(z) nu(dz) / Xi with per-level weights w_n = m_n / Xi.

    weights covers levels 0..n_cut with a relative tail bound beyond; the
    conditional z-density at level n is r_n(z) nu(z) / m_n.
    """

    law: StationaryLaw
    weights: np.ndarray
    Xi: float
    tail_bound: float
    n_cut: int
    _level_integrals: np.ndarray

    def level_weight(self, n: int) -> float:
        return float(self.weights[n]) if n <= self.n_cut else 0.0

    def conditional_density(self, n: int, z, model: ModelSpec) -> float:
        """Density of z given level n: r_n(z) nu(z) / m_n."""
        if n > self.n_cut:
            raise DomainError("level beyond the retained range")
        cr = cumulative_ratio(model, float(z), n)
        lf = float(cr.log_values[n]) + self.law.log_density(z)
        m_n = float(self._level_integrals[n])
        return math.exp(lf) / m_n if lf > -math.inf else 0.0


def _level_integral(model: ModelSpec, law: StationaryLaw, n: int, z_hi: float) -> float:
    """m_n = int r_n(z) nu(dz), by quadrature over [lo, z_hi]."""
    lo = law.domain.lower

    def f(z: float) -> float:
        cr = cumulative_ratio(model, float(z), n)
        lf = float(cr.log_values[n]) + law.log_density(z)
        return math.exp(lf) if lf > -math.inf else 0.0

    val, _ = integrate.quad(f, lo, z_hi, limit=200)
    return float(val)


def invariant_measure_diffusive(model: ModelSpec, law: StationaryLaw,
                                n_max: int = 128, tol: float = 1e-9) -> HybridInvariantMeasure:
    """Level weights of the hybrid law by per-level quadrature.

    Levels are accumulated until the geometric ratio of consecutive level
    integrals certifies a tail below tol; reaching n_max without geometric
    decay raises XiDivergent.
    """
    if law.dim != 1:
        raise DomainError("implemented for one-dimensional laws")
    q = law.quantile(1.0 - 1e-12) if law.tag != "mgf_implicit" else None
    if q is None:
        raise DomainError("need a law with a quantile function")
    lo = law.domain.lower
    z_hi = lo + 4.0 * (q - lo)
    integrals = []
    n = 0
    while True:
        integrals.append(_level_integral(model, law, n, z_hi))
        if n >= 8:
            r1 = integrals[-1] / integrals[-2] if integrals[-2] > 0 else 0.0
            r2 = integrals[-2] / integrals[-3] if integrals[-3] > 0 else 0.0
            rho = max(r1, r2)
            if rho < 0.9:
                tail = integrals[-1] * rho / (1.0 - rho)
                if tail < tol * sum(integrals):
                    break
        n += 1
        if n > n_max:
            raise XiDivergent(
                f"level integrals show no geometric decay by n_max={n_max}"
            )
    m = np.asarray(integrals)
    rho = m[-1] / m[-2] if m[-2] > 0 else 0.0
    tail = m[-1] * rho / (1.0 - rho) if rho < 1.0 else math.inf
    Xi = float(m.sum() + tail)
    return HybridInvariantMeasure(
        law=law,
        weights=m / Xi,
        Xi=Xi,
        tail_bound=float(tail / Xi),
        n_cut=int(m.size - 1),
        _level_integrals=m,
    )


def binned_joint_measure(model: ModelSpec, law: StationaryLaw, n_rows: int,
                         bin_edges: np.ndarray, n_series: int = 96) -> EmpiricalMeasure:
    """Analytic mass of pi on cells (n, z-bin), matching simulation clipping.

    Rows 0..n_rows-1 are exact levels; row n_rows aggregates all higher
    levels.  The final bin extends to the upper quadrature cutoff; bin edges
    must start at the domain's lower bound.  Gauss-Legendre nodes are shared
    across levels so the whole table costs one batch of r_n evaluations.
    """
    if law.dim != 1:
        raise DomainError("implemented for one-dimensional laws")
    edges = np.asarray(bin_edges, dtype=float)
    lo = law.domain.lower
    if abs(edges[0] - lo) > 1e-12:
        raise DomainError("bin edges must start at the domain lower bound")
    q_hi = law.quantile(1.0 - 1e-12)
    z_cut = max(lo + 8.0 * (q_hi - lo), float(edges[-1]) * 2.0)
    # extended edge list: declared bins plus the clip extension of the last bin
    nodes_list, weights_list, owner = [], [], []
    segs = []
    for b in range(edges.size - 1):
        segs.append((edges[b], edges[b + 1], b))
    # split the extension into a few geometrically growing segments
    left = edges[-1]
    width = max(edges[-1] - edges[-2], 1e-6)
    while left < z_cut:
        right = min(left + width, z_cut)
        segs.append((left, right, edges.size - 2))
        width *= 2.0
        left = right
    gl_x, gl_w = np.polynomial.legendre.leggauss(16)
    for a, b, bin_idx in segs:
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        nodes_list.append(mid + half * gl_x)
        weights_list.append(half * gl_w)
        owner.append(np.full(gl_x.size, bin_idx, dtype=int))
    nodes = np.concatenate(nodes_list)
    wts = np.concatenate(weights_list)
    owner = np.concatenate(owner)

    log_r = np.empty((n_series + 1, nodes.size))
    for i, z in enumerate(nodes):
        log_r[:, i] = cumulative_ratio(model, float(z), n_series).log_values
    log_nu = np.array([law.log_density(float(z)) for z in nodes])
    with np.errstate(over="ignore"):
        dens = np.exp(log_r + log_nu[None, :])
    if not np.all(np.isfinite(dens)):
        raise XiDivergent("unnormalized joint density overflows on the grid")

    n_bins = edges.size - 1
    table = np.zeros((n_rows + 1, n_bins))
    for n in range(n_rows):
        table[n] = np.bincount(owner, weights=dens[n] * wts, minlength=n_bins)
    tail_dens = dens[n_rows:].sum(axis=0)
    table[n_rows] = np.bincount(owner, weights=tail_dens * wts, minlength=n_bins)
    total = table.sum()
    table /= total
    cells = tuple((n, b) for n in range(n_rows + 1) for b in range(n_bins))
    return EmpiricalMeasure(cells=cells, masses=table.reshape(-1), sample_count=0)


@dataclass(frozen=True)
class VariableDomainFamily:
    """Per-level shifted-exponential environment laws nu_n on [lower(n), inf)."""

    lower_fn: Callable[[int], float]
    c: float
    sigma: float

    def law_for(self, n: int) -> StationaryLaw:
        shift = float(self.lower_fn(n))
        if shift < 0:
            raise DomainError(f"lower bound at level {n} is negative")
        return StationaryLaw(
            "shifted_exponential",
            {"rate": 2.0 * self.c / self.sigma**2, "shift": shift},
            half_line(shift),
        )

    def xi(self, model: ModelSpec, n_max: int = 256, tol: float = 1e-10) -> XiResult:
        """Xi = sum_n int_{D_n} r_n d(nu_n), level by level."""
        integrals = []
        n = 0
        while True:
            law_n = self.law_for(n)
            z_hi = law_n.quantile(1.0 - 1e-13)
            integrals.append(_level_integral(model, law_n, n, z_hi))
            if n >= 6 and integrals[-2] > 0:
                rho = integrals[-1] / integrals[-2]
                if rho < 0.9:
                    tail = integrals[-1] * rho / (1.0 - rho)
                    if tail < tol * sum(integrals):
                        break
            n += 1
            if n > n_max:
                raise XiDivergent("no geometric decay of level integrals")
        m = np.asarray(integrals)
        rho = m[-1] / m[-2]
        tail = m[-1] * rho / (1.0 - rho)
        return XiResult(
            value=float(m.sum() + tail),
            error_bound=float(tail),
            method="per-level quadrature",
            detail={"n_cut": int(m.size - 1)},
        )
