"""Joint simulation of the level process with a diffusive environment.

The level N jumps at rates lambda_n(z), mu_n(z); between jumps the
environment runs the reflected SDE with its clock sped up by
beta_n / r_n(z).  The fixed-step scheme freezes coefficients at the step
start: the environment advances by effective time h = dt * speed (split into
substeps of at most `max_env_step` so large speeds cannot blow up the Euler
bias), then the level moves with probabilities lambda dt / mu dt.

Everything here is written over replica arrays; a single seeded PCG64 stream
drives all replicas, so runs are deterministic per (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .diffusion import DiffusionSpec, StationaryLaw, reflect_into
from .errors import (
    AllCensored,
    DomainError,
    RateExplosion,
    RateTooLargeForStep,
    SpeedCap,
)
from .jumpenv import EnvChainSpec
from .models import ModelSpec
from .stats import EmpiricalMeasure

_BD_STEP_BUDGET = 0.1


@dataclass(frozen=True)
class SimConfig:
    """Shared knobs of the fixed-step joint simulator.

    record: "occupancy" (time-average over (n, z-bin) cells), "path" (thinned
    trajectory; replicas must be 1), or "terminal" (final states only).
    max_env_step bounds the effective environment time of one Euler chunk;
    the clock rate beta_n / r_n(z) is re-evaluated after every chunk, and the
    level transitions are thinned with the trapezoid average of the rates
    along the chunk path.  A step still unfinished after max_env_substeps
    chunks (the clock stayed above ~max_env_step/dt throughout) raises
    SpeedCap.
    """

    horizon: float
    dt: float = 1e-3
    burn_in: float = 0.0
    speed_cap: float = math.inf
    seed: int = 0
    record: str = "occupancy"
    replicas: int = 1
    max_env_step: float = 0.05
    max_env_substeps: int = 10_000
    thin: int = 100

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0:
            raise DomainError("dt and horizon must be positive")
        if self.burn_in < 0 or self.burn_in >= self.horizon:
            raise DomainError("burn_in must lie in [0, horizon)")
        if self.replicas < 1:
            raise DomainError("replicas must be >= 1")
        if self.record not in ("occupancy", "path", "terminal"):
            raise DomainError(f"unknown record mode {self.record!r}")
        if self.record == "path" and self.replicas != 1:
            raise DomainError("path recording requires replicas = 1")


def default_bin_edges(law: StationaryLaw, n_bins: int = 64) -> np.ndarray:
    """Uniform bins from the domain's lower bound to the 99.9% quantile."""
    lo = law.domain.lower
    hi = float(law.quantile(0.999))
    if not hi > lo:
        raise DomainError("degenerate law range")
    return np.linspace(lo, hi, n_bins + 1)


@dataclass(frozen=True)
class OccupancyResult:
    """Time-average occupancy on (level, z-bin) cells.

    Levels above n_rows are clipped into row n_rows, z beyond the last edge
    into the last bin; compare against `binned_joint_measure`, which uses the
    same clipping.
    """

    measure: EmpiricalMeasure
    counts: np.ndarray
    bin_edges: np.ndarray
    n_rows: int
    steps_recorded: int
    level_clips: int
    final_n: np.ndarray
    final_z: np.ndarray


@dataclass(frozen=True)
class PathResult:
    t: np.ndarray
    n: np.ndarray
    z: np.ndarray


def _batch_rates(fn: Callable, n: np.ndarray, z: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(fn(n, z), dtype=float)
        return np.broadcast_to(out, n.shape).copy()
    except Exception:
        if z.ndim == 1:
            return np.array([float(fn(int(a), float(b))) for a, b in zip(n, z)])
        return np.array([float(fn(int(a), b)) for a, b in zip(n, z)])


def _log_r_batch(model: ModelSpec, n: np.ndarray, z: np.ndarray) -> np.ndarray:
    """log r_{n_i}(z_i) for replica arrays, grouped by distinct level."""
    out = np.zeros(n.shape[0])
    for level in np.unique(n):
        if level == 0:
            continue
        mask = n == level
        zs = z[mask]
        acc = np.zeros(zs.shape[0])
        for k in range(1, int(level) + 1):
            lam = _batch_rates(model.birth_rate, np.full(zs.shape[0], k - 1), zs)
            mu = _batch_rates(model.death_rate, np.full(zs.shape[0], k), zs)
            with np.errstate(divide="ignore"):
                acc += np.log(lam) - np.log(mu)
        out[mask] = acc
    return out


def _fold_batch(domain, z: np.ndarray) -> np.ndarray:
    if domain.kind == "half_line":
        return domain.lower + np.abs(z - domain.lower)
    if domain.kind == "interval":
        width = domain.hi - domain.lower
        y = np.mod(z - domain.lower, 2.0 * width)
        y = np.where(y > width, 2.0 * width - y, y)
        return domain.lower + y
    raise DomainError(
        f"vectorized joint runs support half_line/interval domains, not {domain.kind!r}"
    )


def simulate_joint_diffusive(model: ModelSpec, env: DiffusionSpec, cfg: SimConfig,
                             initial: tuple, law: StationaryLaw | None = None,
                             bin_edges: np.ndarray | None = None,
                             n_rows: int = 32):
    """Fixed-step joint run over all replicas in lockstep.

    initial = (n0, z0) shared by every replica.  For occupancy recording,
    pass bin_edges or a law to derive them from.  Returns OccupancyResult,
    PathResult, or final-state arrays according to cfg.record.
    """
    if env.dim != 1:
        raise DomainError("the vectorized joint engine is one-dimensional in z")
    if cfg.record == "occupancy":
        if bin_edges is None:
            if law is None:
                raise DomainError("occupancy recording needs bin_edges or a law")
            bin_edges = default_bin_edges(law)
        bin_edges = np.asarray(bin_edges, dtype=float)

    rng = np.random.default_rng(cfg.seed)
    R = cfg.replicas
    n0, z0 = initial
    n = np.full(R, int(n0), dtype=np.int64)
    z = np.full(R, float(z0))
    steps = int(round(cfg.horizon / cfg.dt))
    burn_steps = int(round(cfg.burn_in / cfg.dt))
    dt = cfg.dt

    if cfg.record == "occupancy":
        n_bins = bin_edges.size - 1
        counts = np.zeros((n_rows + 1, n_bins), dtype=np.int64)
        uniform = np.allclose(np.diff(bin_edges), bin_edges[1] - bin_edges[0])
        width = bin_edges[1] - bin_edges[0]
    level_clips = 0
    path_t, path_n, path_z = [], [], []

    variability = model.variability
    drift = env.drift
    sigma = env.diffusion
    kappa = env.jump_intensity

    for step in range(steps):
        lam = _batch_rates(model.birth_rate, n, z)
        mu = np.where(n > 0, _batch_rates(model.death_rate, n, z), 0.0)
        worst = float(np.max((lam + mu) * dt))
        if worst > _BD_STEP_BUDGET:
            raise RateTooLargeForStep(
                f"(lambda+mu)*dt = {worst:.3g} exceeds {_BD_STEP_BUDGET}; shrink dt"
            )

        log_r = _log_r_batch(model, n, z)
        beta = np.asarray(variability(n), dtype=float)
        beta = np.broadcast_to(beta, n.shape)
        with np.errstate(over="ignore"):
            speed = beta * np.exp(-log_r)
        top = float(np.max(speed))
        if not np.isfinite(top) or top > cfg.speed_cap:
            raise SpeedCap(
                f"environment speed {top:.3g} exceeds cap {cfg.speed_cap:.3g} "
                f"at step {step}"
            )
        # Advance the environment by the random time change: each replica
        # owes dt of wall time, consumed at rate 1/speed(z).  Chunks cover at
        # most max_env_step of effective time and the clock is re-evaluated
        # after each one, so a brush with a fast-clock region (e.g. small z
        # at a positive level for arrival-fed models) resolves itself as z
        # diffuses away instead of committing to an up-front substep count.
        # The level transitions are thinned with the trapezoid average of the
        # rates along the environment's chunk path, not the rates frozen at
        # the step's entry.  Frozen rates systematically starve transitions
        # out of fast-clock states: near a reflecting boundary z can only
        # move away, so the entry rate underestimates the path average by
        # O(sqrt(chunk)) and the occupancy tilts toward low levels.
        h0 = dt * speed
        if float(np.max(h0)) <= cfg.max_env_step:
            # every replica closes in one chunk; skip the masking machinery
            b = np.broadcast_to(np.asarray(drift(z), dtype=float), z.shape)
            s = np.broadcast_to(np.asarray(sigma(z), dtype=float), z.shape)
            zn = z + b * h0 + s * np.sqrt(h0) * rng.standard_normal(R)
            if kappa > 0:
                pj = -np.expm1(-kappa * h0)
                jumping = rng.random(R) < pj
                if jumping.any():
                    sizes = np.asarray(
                        [float(env.jump_law.sample(rng)) for _ in range(int(jumping.sum()))]
                    )
                    zn[jumping] += sizes
            z = _fold_batch(env.domain, zn)
            lam = 0.5 * (lam + _batch_rates(model.birth_rate, n, z))
            mu = 0.5 * (mu + np.where(n > 0, _batch_rates(model.death_rate, n, z), 0.0))
            wall_left = None
        else:
            wall_left = np.full(R, dt)
            lam_wall = np.zeros(R)
            mu_wall = np.zeros(R)
            lam_cur = lam
            mu_cur = mu
        for _chunk in range(cfg.max_env_substeps if wall_left is not None else 0):
            active = wall_left > 0.0
            if not active.any():
                break
            za = z[active]
            sa = speed[active]
            na = n[active]
            h_want = wall_left[active] * sa
            ha = np.minimum(h_want, cfg.max_env_step)
            dw = ha / sa
            b = np.broadcast_to(np.asarray(drift(za), dtype=float), za.shape)
            s = np.broadcast_to(np.asarray(sigma(za), dtype=float), za.shape)
            za = za + b * ha + s * np.sqrt(ha) * rng.standard_normal(za.shape[0])
            if kappa > 0:
                pj = -np.expm1(-kappa * ha)
                jumping = rng.random(za.shape[0]) < pj
                if jumping.any():
                    sizes = np.asarray(
                        [float(env.jump_law.sample(rng)) for _ in range(int(jumping.sum()))]
                    )
                    za[jumping] += sizes
            za = _fold_batch(env.domain, za)
            z[active] = za
            lam_new = _batch_rates(model.birth_rate, na, za)
            mu_new = np.where(na > 0, _batch_rates(model.death_rate, na, za), 0.0)
            lam_wall[active] += 0.5 * (lam_cur[active] + lam_new) * dw
            mu_wall[active] += 0.5 * (mu_cur[active] + mu_new) * dw
            lam_cur[active] = lam_new
            mu_cur[active] = mu_new
            wall_left[active] = np.where(
                h_want <= cfg.max_env_step, 0.0, wall_left[active] - ha / sa
            )
            still = wall_left > 0.0
            if still.any():
                with np.errstate(over="ignore"):
                    sp = beta[still] * np.exp(-_log_r_batch(model, n[still], z[still]))
                top = float(np.max(sp))
                if not np.isfinite(top) or top > cfg.speed_cap:
                    raise SpeedCap(
                        f"environment speed {top:.3g} exceeds cap "
                        f"{cfg.speed_cap:.3g} at step {step}"
                    )
                speed[still] = sp
        if wall_left is not None:
            if (wall_left > 0.0).any():
                raise SpeedCap(
                    f"{cfg.max_env_substeps} chunks did not close step {step}: the "
                    f"environment clock stayed above ~{cfg.max_env_step / dt:.3g}x "
                    f"wall speed throughout"
                )
            lam = lam_wall / dt
            mu = mu_wall / dt
        worst = float(np.max((lam + mu) * dt))
        if worst > _BD_STEP_BUDGET:
            raise RateTooLargeForStep(
                f"path-averaged (lambda+mu)*dt = {worst:.3g} exceeds "
                f"{_BD_STEP_BUDGET}; shrink dt"
            )

        u = rng.random(R)
        births = u < lam * dt
        deaths = u > 1.0 - mu * dt
        n = n + births.astype(np.int64) - deaths.astype(np.int64)

        if step >= burn_steps:
            if cfg.record == "occupancy":
                rows = np.minimum(n, n_rows)
                level_clips += int((n > n_rows).sum())
                if uniform:
                    cols = np.clip(((z - bin_edges[0]) / width).astype(np.int64), 0, n_bins - 1)
                else:
                    cols = np.clip(np.searchsorted(bin_edges, z, side="right") - 1, 0, n_bins - 1)
                flat = rows * n_bins + cols
                counts.reshape(-1)[:] += np.bincount(flat, minlength=(n_rows + 1) * n_bins)
            elif cfg.record == "path" and (step - burn_steps) % cfg.thin == 0:
                path_t.append((step + 1) * dt)
                path_n.append(int(n[0]))
                path_z.append(float(z[0]))

    if cfg.record == "occupancy":
        total = counts.sum()
        cells = tuple((a, b) for a in range(n_rows + 1) for b in range(n_bins))
        measure = EmpiricalMeasure(
            cells=cells,
            masses=counts.reshape(-1) / total,
            sample_count=int(total),
        )
        return OccupancyResult(
            measure=measure,
            counts=counts,
            bin_edges=bin_edges,
            n_rows=n_rows,
            steps_recorded=steps - burn_steps,
            level_clips=level_clips,
            final_n=n.copy(),
            final_z=z.copy(),
        )
    if cfg.record == "path":
        return PathResult(
            t=np.asarray(path_t), n=np.asarray(path_n, dtype=int), z=np.asarray(path_z)
        )
    return n.copy(), z.copy()


@dataclass(frozen=True)
class HittingSample:
    """First-passage times over replicas; censored entries are NaN."""

    times: np.ndarray
    censored: int
    horizon: float

    @property
    def uncensored(self) -> np.ndarray:
        return self.times[np.isfinite(self.times)]

    @property
    def mean(self) -> float:
        return float(self.uncensored.mean())

    @property
    def stderr(self) -> float:
        u = self.uncensored
        return float(u.std(ddof=1) / math.sqrt(u.size)) if u.size > 1 else math.inf


def _bd_hit_fixed_env(model: ModelSpec, z0, n_start: int, target, horizon: float,
                      rng, rate_cap: float) -> float:
    """Gillespie first passage of the level chain at a frozen environment."""
    rates: dict[int, tuple[float, float]] = {}
    n = int(n_start)
    t = 0.0
    while t < horizon:
        if target(n, z0):
            return t
        pair = rates.get(n)
        if pair is None:
            lam = float(model.birth_rate(n, z0))
            mu = float(model.death_rate(n, z0)) if n > 0 else 0.0
            rates[n] = pair = (lam, mu)
        lam, mu = pair
        total = lam + mu
        if total > rate_cap:
            raise RateExplosion(f"exit rate {total:.3g} exceeds cap at n={n}")
        if total <= 0:
            return math.nan
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            return math.nan
        n += 1 if rng.random() * total < lam else -1
    return math.nan


def hitting_time(model: ModelSpec, env, initial: tuple, target, cfg: SimConfig,
                 replicas: int | None = None, rate_cap: float = 1e9) -> HittingSample:
    """First time target(n, z) holds, over independent replicas.

    env may be None (environment frozen at the initial z), an EnvChainSpec
    (exact-event joint chain), or a DiffusionSpec (fixed-step joint chain).
    Censored replicas are NaN; all-censored raises AllCensored.
    """
    R = int(replicas if replicas is not None else cfg.replicas)
    root = np.random.default_rng(cfg.seed)
    streams = root.spawn(R)
    n0, z0 = initial
    times = np.full(R, math.nan)

    if env is None:
        for i, rng in enumerate(streams):
            times[i] = _bd_hit_fixed_env(
                model, z0, int(n0), target, cfg.horizon, rng, rate_cap
            )
    elif isinstance(env, EnvChainSpec):
        for i, rng in enumerate(streams):
            times[i] = _jump_hit(model, env, (int(n0), z0), target, cfg.horizon,
                                 rng, rate_cap)
    elif isinstance(env, DiffusionSpec):
        for i, rng in enumerate(streams):
            times[i] = _diffusive_hit(model, env, (int(n0), float(z0)), target,
                                      cfg, rng)
    else:
        raise DomainError("env must be None, an EnvChainSpec, or a DiffusionSpec")

    censored = int(np.isnan(times).sum())
    if censored == R:
        raise AllCensored(f"all {R} replicas censored at horizon {cfg.horizon}")
    return HittingSample(times=times, censored=censored, horizon=cfg.horizon)


def _jump_hit(model: ModelSpec, env: EnvChainSpec, initial, target, horizon: float,
              rng, rate_cap: float) -> float:
    n, label = initial
    j = env.index(label)
    m = env.m
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

    t = 0.0
    while True:
        if target(n, env.states[j]):
            return t
        lab = env.states[j]
        lam = float(model.birth_rate(n, lab))
        mu = float(model.death_rate(n, lab)) if n > 0 else 0.0
        inv_r = float(np.exp(-log_r_row(n)[j]))
        Tn = np.asarray(env.generators(n), dtype=float)
        env_rates = np.array([Tn[j, k] * inv_r if k != j else 0.0 for k in range(m)])
        total = lam + mu + float(env_rates.sum())
        if total > rate_cap:
            raise RateExplosion(f"exit rate {total:.3g} exceeds cap at (n={n}, z={lab!r})")
        if total <= 0:
            return math.nan
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            return math.nan
        u = rng.random() * total
        if u < lam:
            n += 1
        elif u < lam + mu:
            n -= 1
        else:
            u -= lam + mu
            acc = 0.0
            for k in range(m):
                acc += env_rates[k]
                if u < acc:
                    j = k
                    break


def _diffusive_hit(model: ModelSpec, env: DiffusionSpec, initial, target,
                   cfg: SimConfig, rng) -> float:
    n, z = initial
    dt = cfg.dt
    steps = int(round(cfg.horizon / dt))
    for step in range(steps):
        if target(n, z):
            return step * dt
        lam = float(model.birth_rate(n, z))
        mu = float(model.death_rate(n, z)) if n > 0 else 0.0
        if (lam + mu) * dt > _BD_STEP_BUDGET:
            raise RateTooLargeForStep("(lambda+mu)*dt too large; shrink dt")
        log_r = 0.0
        for k in range(1, n + 1):
            log_r += math.log(float(model.birth_rate(k - 1, z))) - math.log(
                float(model.death_rate(k, z))
            )
        speed = float(model.variability(n)) * math.exp(-log_r)
        if speed > cfg.speed_cap:
            raise SpeedCap(f"environment speed {speed:.3g} exceeds cap")
        h = dt * speed
        sub = max(1, int(math.ceil(h / cfg.max_env_step)))
        if sub > cfg.max_env_substeps:
            raise SpeedCap(f"one step would need {sub} environment substeps")
        hp = h / sub
        for _ in range(sub):
            b = float(env.drift(z))
            s = float(env.diffusion(z))
            z = z + b * hp + s * math.sqrt(hp) * rng.standard_normal()
            z = float(reflect_into(env.domain, z, n))
        u = rng.random()
        if u < lam * dt:
            n += 1
        elif u > 1.0 - mu * dt:
            n -= 1
    return math.nan
