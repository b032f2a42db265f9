"""Convergence-rate machinery for the joint chain.

Scenario 1 (uniformly bounded level rates): with
    q_i(z) = lambda_i(z) + mu_i(z),  p_i(z) = lambda_i(z)/q_i(z),
    qbar = inf over i >= 1 and z of q_i,  pbar = sup over i >= 1 and z of p_i
(pbar < 1/2 required), the embedded level chain is dominated by the pbar-walk,
whose one-step-down passage count tau has PGF

    g(s) = (1 - sqrt(1 - b s^2)) / (2 pbar s),   b = 4 pbar (1 - pbar),

valid for 0 <= s <= b^{-1/2}.  In continuous time the passage MGF is bounded
by G(u) = g(qbar / (qbar - u)) for u in [0, u*], u* = qbar (1 - sqrt(b)).

Environment coupling is summarized by a tail bound P(tau_env >= t) <=
alpha e^{-gamma t} (alpha > 1), and races between an Exp(beta) clock and such
a tail are bounded by

    theta(alpha, beta, gamma, a) = beta/(beta-a)
        - a gamma / ((beta-a)(beta+gamma-a)) * alpha^{-(beta-a)/gamma}.

The joint coupling time then satisfies E[e^{u tau}] <= G(u)^{n1 v n2} *
theta(alpha, qbar, gamma, u) whenever

    G(u) theta(alpha, qbar, gamma, u)
        < (1 - alpha^{-qbar/gamma} gamma/(qbar+gamma))^{-eps/(1-eps)},

giving total-variation decay at rate kappa = (1 - eps) u.  Scenario 2
replaces G by the busy-period MGF of an infinite-server envelope (valid for
all u > 0, no pbar < 1/2 needed).  The polynomial route certifies a Lyapunov
drift bound on envelope rates and yields O(1/t) decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    BoundViolated,
    DivergenceSuspected,
    DomainError,
    HorizonExceeded,
    InsufficientData,
    NotLyapunov,
)
from .jumpenv import EnvChainSpec
from .models import ModelSpec
from .stats import MgfEstimate, TailFit, fit_tail, mgf_estimate, survival_curve

# ---------------------------------------------------------------------------
# closed-form ingredients


def theta(alpha: float, beta: float, gamma: float, a: float) -> float:
    """Bound on E[e^{a (xi ^ eta)}], xi ~ Exp(beta), P(eta > u) <= alpha e^{-gamma u}."""
    if not alpha > 1:
        raise DomainError("theta requires alpha > 1")
    if beta <= 0 or gamma <= 0:
        raise DomainError("theta requires beta > 0 and gamma > 0")
    if not 0 <= a < beta:
        raise DomainError(f"theta requires 0 <= a < beta, got a={a}, beta={beta}")
    lead = beta / (beta - a)
    corr = a * gamma / ((beta - a) * (beta + gamma - a)) * alpha ** (-(beta - a) / gamma)
    return lead - corr


def pgf_b(p_bar: float) -> float:
    """b = 4 pbar (1 - pbar), the squared reciprocal radius of g."""
    if not 0 < p_bar < 0.5:
        raise DomainError("pbar must lie in (0, 1/2)")
    return 4.0 * p_bar * (1.0 - p_bar)


def g(s: float, p_bar: float) -> float:
    """PGF of the one-step-down passage count of the pbar-walk.

    Evaluated in the conjugate form 2(1-pbar)s / (1 + sqrt(1 - b s^2)), which
    is exact (not just stable) at the radius s = b^{-1/2} and at s = 0.
    g(1) = 1 and g(b^{-1/2}) = sqrt((1-pbar)/pbar).
    """
    b = pgf_b(p_bar)
    radius = 1.0 / math.sqrt(b)
    if not 0 <= s <= radius * (1.0 + 1e-12):
        raise DomainError(f"g defined on [0, {radius:.6g}], got s={s}")
    if s == 1.0:
        return 1.0
    inner = max(1.0 - b * s * s, 0.0)
    # at the radius 1 - b s^2 is pure cancellation noise; the limit value
    # 2 (1-pbar) s is exact there
    if inner < 1e-13:
        inner = 0.0
    return 2.0 * (1.0 - p_bar) * s / (1.0 + math.sqrt(inner))


def u_star_value(p_bar: float, q_bar: float) -> float:
    if q_bar <= 0:
        raise DomainError("qbar must be positive")
    return q_bar * (1.0 - math.sqrt(pgf_b(p_bar)))


def G(u: float, p_bar: float, q_bar: float) -> float:
    """Passage MGF bound G(u) = g(qbar/(qbar-u)) on [0, u*]."""
    if q_bar <= 0:
        raise DomainError("qbar must be positive")
    ustar = u_star_value(p_bar, q_bar)
    if not 0 <= u <= ustar * (1.0 + 1e-12):
        raise DomainError(f"G defined on [0, {ustar:.6g}], got u={u}")
    return g(q_bar / (q_bar - u), p_bar)


@dataclass(frozen=True)
class UStarReport:
    """The endpoint u* with both published values of G(u*).

    g_identity_value = sqrt((1-pbar)/pbar) follows from g at its radius;
    alt_value = sqrt(pbar (1-pbar)) / qbar is the other printed form.  They
    do not agree in general; `agree` records whether they happen to.
    Downstream code uses the g-identity value.
    """

    value: float
    G_value: float
    alt_value: float
    agree: bool


def u_star(p_bar: float, q_bar: float) -> UStarReport:
    val = u_star_value(p_bar, q_bar)
    g_id = math.sqrt((1.0 - p_bar) / p_bar)
    alt = math.sqrt(p_bar * (1.0 - p_bar)) / q_bar
    return UStarReport(
        value=val,
        G_value=g_id,
        alt_value=alt,
        agree=bool(math.isclose(g_id, alt, rel_tol=1e-9)),
    )


# ---------------------------------------------------------------------------
# rate profiles


@dataclass(frozen=True)
class BoundsProfile:
    """Probe-certified rate bounds.

    qbar = min over i in [1, n_max] and probed z of lambda_i + mu_i;
    pbar = max over the same range of lambda_i/(lambda_i + mu_i);
    lambda_bar = max over i in [0, n_max] of lambda_i.  From level 0 the
    chain moves up with probability one, so p_0 plays no role.  These are
    certificates over the probed grid, not symbolic suprema.
    """

    q_bar: float
    p_bar: float
    lambda_bar: float
    n_max: int
    z_probes: tuple
    argmin_q: tuple
    argmax_p: tuple

    @property
    def u_star(self) -> float:
        return u_star_value(self.p_bar, self.q_bar)


def bounds_profile(model: ModelSpec, z_probes: Sequence, n_max: int = 256) -> BoundsProfile:
    q_bar = math.inf
    p_bar = 0.0
    lam_bar = 0.0
    argmin_q = argmax_p = (None, None)
    levels = np.arange(0, n_max + 1)
    for zp in z_probes:
        try:
            lam = np.broadcast_to(
                np.asarray(model.birth_rate(levels, zp), dtype=float), levels.shape
            ).copy()
            mu = np.broadcast_to(
                np.asarray(model.death_rate(levels, zp), dtype=float), levels.shape
            ).copy()
        except Exception:
            lam = np.array([float(model.birth_rate(int(i), zp)) for i in levels])
            mu = np.array([float(model.death_rate(int(i), zp)) for i in levels])
        lam_bar_here = float(lam.max())
        if lam_bar_here > lam_bar:
            lam_bar = lam_bar_here
        q = lam[1:] + mu[1:]
        p = lam[1:] / q
        i_q = int(np.argmin(q))
        i_p = int(np.argmax(p))
        if q[i_q] < q_bar:
            q_bar = float(q[i_q])
            argmin_q = (i_q + 1, zp)
        if p[i_p] > p_bar:
            p_bar = float(p[i_p])
            argmax_p = (i_p + 1, zp)
    return BoundsProfile(
        q_bar=q_bar,
        p_bar=p_bar,
        lambda_bar=lam_bar,
        n_max=n_max,
        z_probes=tuple(z_probes),
        argmin_q=argmin_q,
        argmax_p=argmax_p,
    )


# ---------------------------------------------------------------------------
# environment coupling fit


@dataclass(frozen=True)
class EnvCouplingFit:
    """Fitted tail bound P(meeting time >= t) <= alpha e^{-gamma t}."""

    alpha: float
    gamma: float
    samples: np.ndarray
    fit: TailFit


def _pair_meeting_time(T: np.ndarray, i: int, j: int, rng, horizon: float) -> float:
    """Meeting time of two independent chains with generator T."""
    t = 0.0
    m = T.shape[0]
    while i != j:
        qi = -T[i, i]
        qj = -T[j, j]
        total = qi + qj
        if total <= 0:
            return math.nan
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            return math.nan
        u = rng.random() * total
        if u < qi:
            u2 = rng.random() * qi
            acc = 0.0
            for k in range(m):
                if k == i:
                    continue
                acc += T[i, k]
                if u2 < acc:
                    i = k
                    break
        else:
            u2 = rng.random() * qj
            acc = 0.0
            for k in range(m):
                if k == j:
                    continue
                acc += T[j, k]
                if u2 < acc:
                    j = k
                    break
    return t


def fit_env_coupling(env: EnvChainSpec, level: int = 0, replicas: int = 4000,
                     seed: int = 0, horizon: float = 1e4,
                     safety: float = 1.05) -> EnvCouplingFit:
    """Fit (alpha, gamma) from meeting times of independent environment copies.

    Pairs of distinct starts are cycled; gamma is the exponential tail rate of
    the empirical survival curve and alpha is inflated so alpha e^{-gamma t}
    dominates the whole empirical curve (then clamped above 1).
    """
    T = np.asarray(env.generators(level), dtype=float)
    m = T.shape[0]
    if m < 2:
        raise DomainError("environment coupling needs at least two states")
    pairs = [(i, j) for i in range(m) for j in range(m) if i != j]
    rng = np.random.default_rng(seed)
    samples = np.empty(replicas)
    for r in range(replicas):
        i, j = pairs[r % len(pairs)]
        samples[r] = _pair_meeting_time(T, i, j, rng, horizon)
    samples = samples[np.isfinite(samples)]
    if samples.size < max(100, replicas // 2):
        raise InsufficientData("too many censored environment meeting times")
    t, s = survival_curve(samples)
    hi = float(np.quantile(samples, 0.999))
    fit = fit_tail(t, s, kind="exponential", fit_range=(0.0, hi), min_points=20)
    gamma = -fit.slope
    if gamma <= 0:
        raise InsufficientData("meeting-time tail shows no exponential decay")
    keep = s > 0
    alpha_emp = float(np.max(s[keep] * np.exp(gamma * t[keep])))
    alpha = max(alpha_emp * safety, 1.0 + 1e-6)
    return EnvCouplingFit(alpha=alpha, gamma=gamma, samples=samples, fit=fit)


def exponential_tail_eta(alpha: float, gamma: float, rng, size: int) -> np.ndarray:
    """Samples with survival exactly min(1, alpha e^{-gamma u})."""
    if not (alpha > 1 and gamma > 0):
        raise DomainError("need alpha > 1 and gamma > 0")
    return (math.log(alpha) + rng.exponential(1.0, size)) / gamma


def fit_env_coupling_diffusive(spec, z_pairs: Sequence, dt: float = 1e-3,
                               replicas: int = 2000, seed: int = 0,
                               horizon: float = 100.0, safety: float = 1.05,
                               meet_tol: float | None = None) -> EnvCouplingFit:
    """Reflection-coupling fit of (alpha, gamma) for a 1-D diffusion.

    Two copies are driven by mirrored noise (the second gets the negated
    increments) until their gap changes sign or falls below meet_tol; the
    meeting times are fitted like the jump-environment case.  Jump terms are
    out of scope here (the mirrored construction says nothing about them).
    """
    from .diffusion import reflect_into

    if spec.dim != 1:
        raise DomainError("reflection coupling implemented for 1-D environments")
    if spec.jump_intensity > 0:
        raise DomainError("reflection coupling fit does not cover jump terms")
    pairs = [(float(a), float(b)) for a, b in z_pairs if not a == b]
    if not pairs:
        raise DomainError("need at least one pair of distinct starts")
    rng = np.random.default_rng(seed)
    sq = math.sqrt(dt)
    n_steps = int(round(horizon / dt))
    samples = np.empty(replicas)
    for r in range(replicas):
        z1, z2 = pairs[r % len(pairs)]
        tol = meet_tol
        if tol is None:
            tol = 0.5 * sq * (abs(float(spec.diffusion(z1))) + abs(float(spec.diffusion(z2))))
        t_meet = math.nan
        for step in range(n_steps):
            w = rng.standard_normal() * sq
            z1 = reflect_into(
                spec.domain, z1 + float(spec.drift(z1)) * dt + float(spec.diffusion(z1)) * w
            )
            z2 = reflect_into(
                spec.domain, z2 + float(spec.drift(z2)) * dt - float(spec.diffusion(z2)) * w
            )
            if abs(z1 - z2) <= tol:
                t_meet = (step + 1) * dt
                break
        samples[r] = t_meet
    finite = samples[np.isfinite(samples)]
    if finite.size < max(100, replicas // 2):
        raise InsufficientData("too many censored reflection-coupling meetings")
    t, s = survival_curve(finite)
    hi = float(np.quantile(finite, 0.999))
    fit = fit_tail(t, s, kind="exponential", fit_range=(0.0, hi), min_points=20)
    gamma = -fit.slope
    if gamma <= 0:
        raise InsufficientData("meeting-time tail shows no exponential decay")
    keep = s > 0
    alpha_emp = float(np.max(s[keep] * np.exp(gamma * t[keep])))
    alpha = max(alpha_emp * safety, 1.0 + 1e-6)
    return EnvCouplingFit(alpha=alpha, gamma=gamma, samples=finite, fit=fit)


# ---------------------------------------------------------------------------
# the exponential-rate certificate


@dataclass(frozen=True)
class RateCertificate:
    """An exponential-rate certificate at one (u, eps) pair.

    kappa = (1 - eps) u; condition_residual = rhs - lhs at that pair (> 0 iff
    the contraction condition holds strictly); `valid` is False when no pair
    satisfies it (then kappa = 0).  Produced either from an explicit (u, eps)
    or as the best pair of the grid search.
    """

    scenario: str
    alpha: float
    gamma: float
    q_bar: float
    p_bar: float | None
    u: float | None
    epsilon: float | None
    kappa: float
    lhs: float | None
    rhs: float | None
    condition_residual: float | None
    valid: bool
    grid_shape: tuple | None
    notes: tuple = ()

    def to_text(self) -> str:
        lines = [
            "exponential rate certificate (probe-certified bounds)",
            f"scenario: {self.scenario}",
            f"alpha: {self.alpha!r}",
            f"gamma: {self.gamma!r}",
            f"q_bar: {self.q_bar!r}",
            f"p_bar: {self.p_bar!r}",
            f"valid: {self.valid}",
            f"kappa: {self.kappa!r}",
            f"u: {self.u!r}",
            f"epsilon: {self.epsilon!r}",
            f"lhs: {self.lhs!r}",
            f"rhs: {self.rhs!r}",
            f"condition residual (rhs - lhs): {self.condition_residual!r}",
        ]
        if self.grid_shape is not None:
            lines.append(
                f"grid: {self.grid_shape[0]} u-points x {self.grid_shape[1]} eps-points"
            )
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def _scenario_name(scenario: str) -> str:
    aliases = {
        "s1": "exponential_s1",
        "s2": "exponential_s2",
        "exponential_s1": "exponential_s1",
        "exponential_s2": "exponential_s2",
    }
    if scenario not in aliases:
        raise DomainError(f"unknown scenario {scenario!r}")
    return aliases[scenario]


def check_exponential_condition(profile: BoundsProfile, alpha: float, gamma: float,
                                scenario: str = "s1",
                                u: float | None = None,
                                epsilon: float | None = None,
                                G_function: Callable[[float], float] | None = None,
                                u_points: int = 64, eps_points: int = 32) -> RateCertificate:
    """Certify a TV decay rate kappa = (1-eps)u from the contraction condition.

    With explicit (u, epsilon) the condition is evaluated at that pair alone;
    otherwise the best kappa is searched over a geometric u grid times a
    linear eps grid (the whole sweep is evaluated; no analytic shortcut).
    Scenario 1 uses G from the pbar-walk (requires pbar < 1/2, u <= u*);
    scenario 2 uses the supplied busy-period MGF bound Gbar (any u < qbar).
    """
    if not alpha > 1 or not gamma > 0:
        raise DomainError("need alpha > 1 and gamma > 0")
    name = _scenario_name(scenario)
    q_bar = profile.q_bar
    if name == "exponential_s1":
        if not profile.p_bar < 0.5:
            raise DomainError(
                f"scenario 1 requires pbar < 1/2, profile has {profile.p_bar}"
            )
        u_hi = profile.u_star
        G_eval = lambda x: G(x, profile.p_bar, q_bar)
        p_bar: float | None = profile.p_bar
    else:
        if G_function is None:
            raise DomainError("scenario 2 needs the busy-period MGF bound")
        u_hi = 0.999 * q_bar
        G_eval = G_function
        p_bar = None

    base = 1.0 - alpha ** (-q_bar / gamma) * gamma / (q_bar + gamma)

    def evaluate(u_val: float, eps_val: float):
        lhs = G_eval(u_val) * theta(alpha, q_bar, gamma, u_val)
        rhs = base ** (-eps_val / (1.0 - eps_val))
        return lhs, rhs

    if (u is None) != (epsilon is None):
        raise DomainError("give both u and epsilon, or neither")
    if u is not None:
        if not 0 < u <= u_hi:
            raise DomainError(f"u must lie in (0, {u_hi:.6g}]")
        if not 0 < epsilon < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        lhs, rhs = evaluate(float(u), float(epsilon))
        valid = bool(lhs < rhs)
        return RateCertificate(
            scenario=name, alpha=alpha, gamma=gamma, q_bar=q_bar, p_bar=p_bar,
            u=float(u), epsilon=float(epsilon),
            kappa=(1.0 - epsilon) * u if valid else 0.0,
            lhs=lhs, rhs=rhs, condition_residual=rhs - lhs, valid=valid,
            grid_shape=None,
        )

    us = u_hi * np.geomspace(1e-4, 1.0, u_points)
    epss = np.arange(1, eps_points + 1) / (eps_points + 1.0)
    best = None
    closest = None  # least-violating pair, reported when nothing passes
    for u_val in us:
        try:
            lhs = G_eval(float(u_val)) * theta(alpha, q_bar, gamma, float(u_val))
        except (DomainError, DivergenceSuspected, OverflowError):
            continue
        if not math.isfinite(lhs):
            continue
        for eps_val in epss:
            rhs = float(base ** (-eps_val / (1.0 - eps_val)))
            if lhs < rhs:
                kappa = float((1.0 - eps_val) * u_val)
                if best is None or kappa > best[0]:
                    best = (kappa, float(u_val), float(eps_val), float(lhs), rhs)
            elif closest is None or rhs - lhs > closest[0]:
                closest = (rhs - lhs, float(u_val), float(eps_val), float(lhs), rhs)
    if best is None:
        residual, u_c, eps_c, lhs_c, rhs_c = (
            closest if closest is not None else (None, None, None, None, None)
        )
        return RateCertificate(
            scenario=name, alpha=alpha, gamma=gamma, q_bar=q_bar, p_bar=p_bar,
            u=u_c, epsilon=eps_c, kappa=0.0, lhs=lhs_c, rhs=rhs_c,
            condition_residual=residual, valid=False,
            grid_shape=(u_points, eps_points),
            notes=("no grid pair satisfies the contraction condition",),
        )
    kappa, u_best, eps_best, lhs, rhs = best
    return RateCertificate(
        scenario=name, alpha=alpha, gamma=gamma, q_bar=q_bar, p_bar=p_bar,
        u=u_best, epsilon=eps_best, kappa=kappa, lhs=lhs, rhs=rhs,
        condition_residual=rhs - lhs, valid=True,
        grid_shape=(u_points, eps_points),
    )


# ---------------------------------------------------------------------------
# the integrability side condition


@dataclass(frozen=True)
class IntegrabilityReport:
    """Finiteness of sup_u sum_n G(u)^n m_n over the u grid.

    m_n are level masses of the invariant measure (any fixed normalization).
    The sufficient condition reports the geometric-ratio route: if
    sup lambda_{i-1}/mu_i <= pbar/(1-pbar), the summand ratio is bounded by
    c = (pbar/(1-pbar))^{3/2} < 1.
    """

    finite: bool
    sup_value: float
    per_u: tuple
    failing_u: float | None
    sufficient_holds: bool | None
    sufficient_ratio: float | None


def _log_level_masses_of(measure) -> np.ndarray:
    if hasattr(measure, "log_weights"):
        return np.asarray(logsumexp(measure.log_weights, axis=1), dtype=float)
    if hasattr(measure, "weights"):
        arr = np.asarray(measure.weights, dtype=float)
    else:
        arr = np.asarray(measure, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(arr)


def check_integrability(measure, profile: BoundsProfile,
                        model: ModelSpec | None = None,
                        u_points: int = 16, ratio_delta: float = 1e-3) -> IntegrabilityReport:
    """Check sup over u in [0, u*] of sum_n G(u)^n m_n < infinity.

    Works in log space from the truncated level masses, with a trailing
    geometric-ratio test at each u on the grid; the largest u (u*) dominates,
    but the whole grid is evaluated and reported.  When a model is given, the
    sufficient condition sup lambda_{i-1}/mu_i <= pbar/(1-pbar) is also
    probed on the profile's z grid.
    """
    log_m = _log_level_masses_of(measure)
    if log_m.ndim != 1 or log_m.size < 16:
        raise DomainError("need a 1-D array of at least 16 level masses")
    us = profile.u_star * np.linspace(0.0, 1.0, u_points)
    per_u = []
    finite = True
    failing = None
    sup_val = 0.0
    window = max(8, log_m.size // 8)
    levels = np.arange(log_m.size)
    for u in us:
        Gu = G(float(u), profile.p_bar, profile.q_bar)
        log_terms = log_m + levels * math.log(Gu)
        diffs = np.diff(log_terms)[-window:]
        diffs = diffs[np.isfinite(diffs)]
        # an all-(-inf) tail (gated models) is a finite sum by inspection
        rho = float(np.exp(diffs.max())) if diffs.size else 0.0
        if rho < 1.0 - ratio_delta:
            log_tail = (
                log_terms[-1] + math.log(rho / (1.0 - rho)) if rho > 0 else -math.inf
            )
            total = float(np.exp(np.logaddexp(logsumexp(log_terms), log_tail)))
            per_u.append((float(u), total))
            sup_val = max(sup_val, total)
        else:
            finite = False
            failing = float(u)
            per_u.append((float(u), math.inf))
            sup_val = math.inf
    suff_holds = None
    suff_ratio = None
    if model is not None:
        worst = 0.0
        levels = np.arange(1, profile.n_max + 1)
        for zp in profile.z_probes:
            try:
                lam = np.broadcast_to(
                    np.asarray(model.birth_rate(levels - 1, zp), dtype=float),
                    levels.shape,
                )
                mu = np.broadcast_to(
                    np.asarray(model.death_rate(levels, zp), dtype=float), levels.shape
                )
            except Exception:
                lam = np.array([float(model.birth_rate(int(i) - 1, zp)) for i in levels])
                mu = np.array([float(model.death_rate(int(i), zp)) for i in levels])
            worst = max(worst, float(np.max(lam / mu)))
        bound = profile.p_bar / (1.0 - profile.p_bar)
        suff_holds = bool(worst <= bound * (1.0 + 1e-12))
        suff_ratio = (profile.p_bar / (1.0 - profile.p_bar)) ** 1.5
    return IntegrabilityReport(
        finite=finite,
        sup_value=sup_val,
        per_u=tuple(per_u),
        failing_u=failing,
        sufficient_holds=suff_holds,
        sufficient_ratio=suff_ratio,
    )


# ---------------------------------------------------------------------------
# busy-period MGF (scenario 2 envelope)


@dataclass(frozen=True)
class BusyPeriodMgf:
    u: float
    mc: MgfEstimate | None
    series: float | None
    agree: bool | None


def _busy_series(lambda_bar: float, mu_bar: float, u: float) -> float:
    """Backward continued fraction for the infinite-server busy-period MGF.

    phi_n = n mu / (lambda + n mu - u - lambda phi_{n+1}), Gbar(u) = phi_1.
    Depth doubles until the value stabilizes; a nonpositive denominator on
    the way down means the recursion left its domain.
    """
    if u < 0:
        raise DomainError("u must be nonnegative")
    if u == 0:
        return 1.0
    depth = max(64, 4 * int(math.ceil(lambda_bar / mu_bar + u / mu_bar)) + 4)
    prev = None
    while depth <= 2**22:
        phi = 1.0
        ok = True
        for n in range(depth, 0, -1):
            den = lambda_bar + n * mu_bar - u - lambda_bar * phi
            if den <= 0:
                ok = False
                break
            phi = n * mu_bar / den
        if ok:
            if prev is not None and abs(phi - prev) <= 1e-12 * abs(phi):
                return phi
            prev = phi
        depth *= 2
    raise DivergenceSuspected(
        f"busy-period series did not stabilize for u={u} (last value {prev})"
    )


def _busy_samples(lambda_bar: float, mu_bar: float, replicas: int, rng,
                  max_events: int = 10**7) -> np.ndarray:
    out = np.empty(replicas)
    for r in range(replicas):
        n = 1
        t = 0.0
        events = 0
        while n > 0:
            total = lambda_bar + n * mu_bar
            t += rng.exponential(1.0 / total)
            n += 1 if rng.random() * total < lambda_bar else -1
            events += 1
            if events > max_events:
                raise DivergenceSuspected("busy period exceeded the event budget")
        out[r] = t
    return out


def busy_period_mgf(lambda_bar: float, mu_bar: float, u: float,
                    replicas: int = 20000, seed: int = 0,
                    method: str = "mc") -> BusyPeriodMgf:
    """E[e^{u taubar}] for the infinite-server busy period, MC and/or series.

    MC sampling is the primary route; the continued-fraction series is an
    optional cross-check (method="series" or "both").  The MC route checks
    stability across replica doublings (quarter, half, full) and through the
    top-share diagnostic; a diverging running mean raises DivergenceSuspected.
    """
    if lambda_bar <= 0 or mu_bar <= 0:
        raise DomainError("need positive envelope rates")
    if method not in ("mc", "series", "both"):
        raise DomainError(f"unknown method {method!r}")
    mc = None
    series = None
    if method in ("series", "both"):
        series = _busy_series(lambda_bar, mu_bar, u)
    if method in ("mc", "both"):
        rng = np.random.default_rng(seed)
        samples = _busy_samples(lambda_bar, mu_bar, replicas, rng)
        quarter = mgf_estimate(samples[: replicas // 4], u)
        half = mgf_estimate(samples[: replicas // 2], u)
        full = mgf_estimate(samples, u)
        growing = full.mean > 1.5 * half.mean and half.mean > 1.5 * quarter.mean
        if growing and full.unstable:
            raise DivergenceSuspected(
                f"running MGF mean grows across doublings at u={u}: "
                f"{quarter.mean:.4g} -> {half.mean:.4g} -> {full.mean:.4g}"
            )
        mc = full
    agree = None
    if mc is not None and series is not None:
        agree = bool(abs(mc.mean - series) <= 3.0 * mc.stderr + 1e-9)
    return BusyPeriodMgf(u=float(u), mc=mc, series=series, agree=agree)


def sample_descent_steps(p_bar: float, n_samples: int, seed: int = 0,
                         max_steps: int = 10**7) -> np.ndarray:
    """Steps for the pbar-walk to go one level down, i.i.d. samples.

    The PGF of these counts is g(s, pbar).
    """
    if not 0 < p_bar < 0.5:
        raise DomainError("pbar must lie in (0, 1/2)")
    rng = np.random.default_rng(seed)
    out = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        depth = 1
        steps = 0
        while depth > 0:
            steps += 1
            if steps > max_steps:
                raise DivergenceSuspected("walk descent exceeded the step budget")
            depth += 1 if rng.random() < p_bar else -1
        out[i] = steps
    return out


# ---------------------------------------------------------------------------
# coupling experiment (jump environment)


@dataclass(frozen=True)
class CouplingResult:
    """Coupling times of the two-copy joint chain, with the rate comparison.

    Censored replicas are NaN.  When a certificate is supplied, `slope` is
    the fitted exponential tail slope of the survival curve over the tail
    third and `passed` records slope <= -0.9 kappa.
    """

    times: np.ndarray
    censored: int
    fit: TailFit | None
    kappa: float | None
    slope: float | None
    passed: bool | None

    @property
    def uncensored(self) -> np.ndarray:
        return self.times[np.isfinite(self.times)]


def _couple_once(model: ModelSpec, env: EnvChainSpec, state1, state2, rng,
                 horizon: float, rate_cap: float) -> float:
    """Run two independent copies until their full states coincide."""
    m = env.m
    n1, j1 = state1
    n2, j2 = state2
    log_r_rows: dict[int, np.ndarray] = {0: np.zeros(m)}

    def log_r_row(level: int) -> np.ndarray:
        row = log_r_rows.get(level)
        if row is None:
            prev = log_r_row(level - 1)
            lam_prev = np.array([float(model.birth_rate(level - 1, s)) for s in env.states])
            mu_here = np.array([float(model.death_rate(level, s)) for s in env.states])
            with np.errstate(divide="ignore"):
                row = prev + np.log(lam_prev) - np.log(mu_here)
            log_r_rows[level] = row
        return row

    tables: dict[tuple[int, int], tuple] = {}

    def table(n: int, j: int):
        key = (n, j)
        entry = tables.get(key)
        if entry is None:
            lab = env.states[j]
            lam = float(model.birth_rate(n, lab))
            mu = float(model.death_rate(n, lab)) if n > 0 else 0.0
            inv_r = float(np.exp(-log_r_row(n)[j]))
            Tn = np.asarray(env.generators(n), dtype=float)
            rates = [lam, mu]
            moves = [(1, j), (-1, j)]
            for k in range(m):
                if k != j and Tn[j, k] > 0:
                    rates.append(Tn[j, k] * inv_r)
                    moves.append((0, k))
            cum = np.cumsum(rates)
            entry = (float(cum[-1]), cum, tuple(moves))
            tables[key] = entry
        return entry

    t = 0.0
    while True:
        if n1 == n2 and j1 == j2:
            return t
        tot1, cum1, moves1 = table(n1, j1)
        tot2, cum2, moves2 = table(n2, j2)
        total = tot1 + tot2
        if total > rate_cap:
            raise DomainError(f"pair exit rate {total:.3g} exceeds {rate_cap:.3g}")
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            return math.nan
        u = rng.random() * total
        if u < tot1:
            slot = int(np.searchsorted(cum1, u, side="right"))
            slot = min(slot, len(moves1) - 1)
            dn, j = moves1[slot]
            n1 += dn
            j1 = j if dn == 0 else j1
        else:
            u -= tot1
            slot = int(np.searchsorted(cum2, u, side="right"))
            slot = min(slot, len(moves2) - 1)
            dn, j = moves2[slot]
            n2 += dn
            j2 = j if dn == 0 else j2


def couple_exponential(model: ModelSpec, env: EnvChainSpec, initial_pair,
                       horizon: float, replicas: int, seed: int = 0,
                       certificate: RateCertificate | None = None,
                       rate_cap: float = 1e9) -> CouplingResult:
    """Coupling-time samples for two copies started at initial_pair.

    initial_pair = ((n1, label1), (n2, label2)).  The copies run
    independently and merge at the first instant their full states coincide
    (level and environment).  The certified rate bounds the staged
    construction -- drain both copies to level 0, then race the environment
    meeting against the next birth -- whose merge time dominates this one,
    so the tail-slope comparison against kappa is conservative in the right
    direction.  All replicas censored raises HorizonExceeded.
    """
    (n1, lab1), (n2, lab2) = initial_pair
    s1 = (int(n1), env.index(lab1))
    s2 = (int(n2), env.index(lab2))
    root = np.random.default_rng(seed)
    streams = root.spawn(replicas)
    times = np.empty(replicas)
    for i, rng in enumerate(streams):
        times[i] = _couple_once(model, env, s1, s2, rng, horizon, rate_cap)
    censored = int(np.isnan(times).sum())
    if censored == replicas:
        raise HorizonExceeded(f"all {replicas} coupling replicas censored")
    fit = None
    slope = None
    passed = None
    kappa = certificate.kappa if certificate is not None else None
    finite = times[np.isfinite(times)]
    if certificate is not None:
        t, s = survival_curve(finite)
        lo = float(np.quantile(finite, 2.0 / 3.0))
        hi = float(np.quantile(finite, 0.995))
        fit = fit_tail(t, s, kind="exponential", fit_range=(lo, hi), min_points=10)
        slope = fit.slope
        passed = bool(slope <= -0.9 * kappa)
    return CouplingResult(
        times=times, censored=censored, fit=fit, kappa=kappa, slope=slope,
        passed=passed,
    )


# ---------------------------------------------------------------------------
# domination checks


@dataclass(frozen=True)
class DominationReport:
    excursions: int
    violations: int
    max_len: int


def walk_domination_check(model: ModelSpec, z, p_bar: float, excursions: int = 10000,
                          seed: int = 0, max_steps: int = 10**6) -> DominationReport:
    """Pathwise check: the embedded level chain never exceeds the pbar-walk.

    Both chains start at 1 and share uniforms; the walk moves up on
    U < pbar, the chain on U < p_i(z) (from 0 it moves up surely).  The
    excursion runs until the walk returns to 0; any step with chain > walk
    counts as a violation (none are expected when p_i(z) <= pbar).
    """
    rng = np.random.default_rng(seed)
    p_cache: dict[int, float] = {}

    def p_at(i: int) -> float:
        v = p_cache.get(i)
        if v is None:
            lam = float(model.birth_rate(i, z))
            mu = float(model.death_rate(i, z))
            v = lam / (lam + mu)
            p_cache[i] = v
        return v

    violations = 0
    max_len = 0
    for _ in range(excursions):
        chain = 1
        walk = 1
        steps = 0
        while walk > 0:
            steps += 1
            if steps > max_steps:
                raise DivergenceSuspected("excursion exceeded the step budget")
            u = rng.random()
            walk += 1 if u < p_bar else -1
            if chain == 0:
                chain = 1
            else:
                chain += 1 if u < p_at(chain) else -1
            if chain > walk:
                violations += 1
        max_len = max(max_len, steps)
    return DominationReport(excursions=excursions, violations=violations, max_len=max_len)


def mminf_domination_check(model: ModelSpec, z, lambda_bar: float, mu_bar: float,
                           excursions: int = 2000, seed: int = 0) -> DominationReport:
    """Pathwise check of the infinite-server envelope coupling.

    Joint rates from (n, nbar), n <= nbar: shared births at lambda_bar (the
    envelope always goes up, the chain goes up on a thinning coin
    lambda_n(z)/lambda_bar); shared deaths at n mu_bar; envelope-only deaths
    at (nbar - n) mu_bar; chain-only deaths at mu_n(z) - n mu_bar >= 0.
    Envelope rate bounds are validated on the fly; the excursion ends when
    the envelope empties.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    max_len = 0
    for _ in range(excursions):
        n, nbar = 1, 1
        steps = 0
        while nbar > 0:
            steps += 1
            lam_n = float(model.birth_rate(n, z))
            mu_n = float(model.death_rate(n, z)) if n > 0 else 0.0
            if lam_n > lambda_bar * (1 + 1e-12):
                raise DomainError(f"lambda_{n}(z) = {lam_n} exceeds lambda_bar")
            extra = mu_n - n * mu_bar
            if extra < -1e-12 * max(mu_n, 1.0):
                raise DomainError(f"mu_{n}(z) = {mu_n} below n mu_bar")
            extra = max(extra, 0.0)
            shared_death = n * mu_bar
            env_death = (nbar - n) * mu_bar
            total = lambda_bar + shared_death + env_death + extra
            u = rng.random() * total
            if u < lambda_bar:
                nbar += 1
                if rng.random() < lam_n / lambda_bar:
                    n += 1
            elif u < lambda_bar + shared_death:
                n -= 1
                nbar -= 1
            elif u < lambda_bar + shared_death + env_death:
                nbar -= 1
            else:
                n -= 1
            if n > nbar or n < 0:
                violations += 1
        max_len = max(max_len, steps)
    return DominationReport(excursions=excursions, violations=violations, max_len=max_len)


# ---------------------------------------------------------------------------
# polynomial route


@dataclass(frozen=True)
class PolynomialCertificate:
    """Drift certificate: Lbar V(n) <= -C_V for 1 <= n <= n_max.

    Lbar V(n) = lambda_bar_n (V(n+1) - V(n)) + mu_bar_n (V(n-1) - V(n)) with
    envelope rates (upper birth, lower death).  tail_monotone records whether
    the drift is nonincreasing over the last quarter of the range, a hint
    (not a proof) that the bound persists beyond n_max.
    """

    C_V: float
    argmin_n: int
    n_max: int
    tail_monotone: bool
    V: Callable[[int], float] = field(repr=False)


def lyapunov_certificate(lambda_bar_fn: Callable[[int], float],
                         mu_bar_fn: Callable[[int], float],
                         V: Callable[[int], float], n_max: int = 512) -> PolynomialCertificate:
    v0 = float(V(0))
    if abs(v0) > 0:
        raise DomainError("V(0) must be 0")
    vals = np.array([float(V(n)) for n in range(n_max + 2)])
    if np.any(np.diff(vals) < -1e-12):
        raise DomainError("V must be nondecreasing")
    drift = np.empty(n_max)
    for n in range(1, n_max + 1):
        lam = float(lambda_bar_fn(n))
        mu = float(mu_bar_fn(n))
        if lam < 0 or mu <= 0:
            raise DomainError(f"bad envelope rates at n={n}")
        drift[n - 1] = lam * (vals[n + 1] - vals[n]) + mu * (vals[n - 1] - vals[n])
    worst = float(drift.max())
    if worst >= 0:
        raise NotLyapunov(
            f"drift {worst:.6g} at n={int(drift.argmax()) + 1} is not negative"
        )
    tail = drift[-max(4, n_max // 4):]
    return PolynomialCertificate(
        C_V=-worst,
        argmin_n=int(drift.argmax()) + 1,
        n_max=n_max,
        tail_monotone=bool(np.all(np.diff(tail) <= 1e-12)),
        V=V,
    )


def _envelope_model(lambda_bar_fn, mu_bar_fn) -> ModelSpec:
    return ModelSpec(
        name="envelope",
        birth_rate=lambda n, z: np.vectorize(lambda_bar_fn, otypes=[float])(n),
        death_rate=lambda n, z: np.vectorize(mu_bar_fn, otypes=[float])(n),
    )


def hitting_bound_check(lambda_bar_fn, mu_bar_fn, cert: PolynomialCertificate,
                        starts: Sequence[int], replicas: int = 2000, seed: int = 0,
                        horizon: float = 1e6):
    """MC check of E_n[time to hit 0] <= V(n)/C_V for the envelope chain.

    Returns rows (n, mc_mean, stderr, bound, ok); a row failing by more than
    3 standard errors raises BoundViolated with the margin.
    """
    from .jointsim import SimConfig, hitting_time

    model = _envelope_model(lambda_bar_fn, mu_bar_fn)
    rows = []
    for idx, n0 in enumerate(starts):
        cfg = SimConfig(horizon=horizon, seed=seed + idx, replicas=replicas)
        sample = hitting_time(
            model, None, (int(n0), 0.0), lambda n, z: n == 0, cfg, replicas=replicas
        )
        bound = float(cert.V(int(n0))) / cert.C_V
        mean = sample.mean
        se = sample.stderr
        ok = mean <= bound + 3.0 * se
        rows.append(
            {"n": int(n0), "mean": mean, "stderr": se, "bound": bound, "ok": bool(ok)}
        )
        if not ok:
            raise BoundViolated(
                f"E_{n0}[hit 0] = {mean:.4g} exceeds bound {bound:.4g}",
                margin=(mean - bound) / se if se > 0 else math.inf,
            )
    return rows


@dataclass(frozen=True)
class DecayCurve:
    t: np.ndarray
    tv: np.ndarray
    bound: np.ndarray | None
    fit: TailFit | None
    noise_floor: float

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "tv", "bound"])
            for i in range(self.t.size):
                b = "" if self.bound is None else repr(float(self.bound[i]))
                w.writerow([repr(float(self.t[i])), repr(float(self.tv[i])), b])


def tv_decay_polynomial(lambda_bar_fn, mu_bar_fn, start_n, t_grid,
                        replicas: int = 10000, seed: int = 0,
                        reference_n_max: int = 256,
                        cert: PolynomialCertificate | None = None,
                        fit_min_points: int = 5) -> DecayCurve:
    """Empirical TV distance to stationarity of the envelope chain over t_grid.

    The reference is the analytic stationary law of the envelope chain; the
    state at each grid time is recorded per replica and binned on levels
    (clip row at the end).  start_n may be a single level or an array of
    levels cycled across replicas.  The power fit runs over grid points whose
    TV sits above three times the estimated multinomial noise floor.  When a
    certificate is given the curve 2(E_pi[V] + V(n0)) / (C_V t), clipped at
    1, is attached; with several starts V(n0) is taken at the worst one.
    """
    from .models import normalized_weights

    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0) or t_grid[0] <= 0:
        raise DomainError("t_grid must be positive and increasing")
    starts = np.atleast_1d(np.asarray(start_n, dtype=np.int64))
    if starts.ndim != 1 or starts.size == 0 or np.any(starts < 0):
        raise DomainError("start_n must be a nonnegative level or a 1-d array of them")
    model = _envelope_model(lambda_bar_fn, mu_bar_fn)
    ref = normalized_weights(model, 0.0, reference_n_max)
    # cells: levels 0..K-1 plus a clip row; K covers all but ~1e-9 of the mass
    cum = np.cumsum(ref.kappa)
    K = int(np.searchsorted(cum, 1.0 - 1e-9)) + 1
    K = min(K, reference_n_max)
    ref_masses = np.concatenate([ref.kappa[:K], [1.0 - float(cum[K - 1])]])

    rng = np.random.default_rng(seed)
    counts = np.zeros((t_grid.size, K + 1), dtype=np.int64)
    lam_cache: dict[int, tuple[float, float]] = {}

    def rates(n: int) -> tuple[float, float]:
        pair = lam_cache.get(n)
        if pair is None:
            pair = (
                float(lambda_bar_fn(n)),
                float(mu_bar_fn(n)) if n > 0 else 0.0,
            )
            lam_cache[n] = pair
        return pair

    t_max = float(t_grid[-1])
    for rep in range(replicas):
        n = int(starts[rep % starts.size])
        t = 0.0
        gi = 0
        while gi < t_grid.size:
            lam, mu = rates(n)
            total = lam + mu
            hold = rng.exponential(1.0 / total) if total > 0 else math.inf
            while gi < t_grid.size and t + hold >= t_grid[gi]:
                counts[gi, min(n, K)] += 1
                gi += 1
            if gi >= t_grid.size or t + hold > t_max:
                break
            t += hold
            n += 1 if rng.random() * total < lam else -1
    tv = 0.5 * np.abs(counts / replicas - ref_masses[None, :]).sum(axis=1)
    floor = 1.2533 * float(np.sqrt(ref_masses * (1 - ref_masses)).sum()) / (
        2.0 * math.sqrt(replicas)
    )
    bound = None
    if cert is not None:
        e_pi_v = float(np.sum(ref.kappa * np.array([cert.V(n) for n in range(ref.kappa.size)])))
        v0 = max(float(cert.V(int(s))) for s in np.unique(starts))
        bound = np.minimum(2.0 * (e_pi_v + v0) / (cert.C_V * t_grid), 1.0)
    fit = None
    above = tv > 3.0 * floor
    if above.sum() >= fit_min_points:
        fit = fit_tail(
            t_grid[above], tv[above], kind="power", min_points=fit_min_points
        )
    return DecayCurve(t=t_grid, tv=tv, bound=bound, fit=fit, noise_floor=floor)
