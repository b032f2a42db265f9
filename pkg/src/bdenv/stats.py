"""Empirical measures, tail fits, and MGF estimation.

Small, dependency-light statistical plumbing shared by the simulators and the
convergence experiments.  Nothing here knows about queues or environments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import CellMismatch, DomainError, InsufficientData

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """A probability measure on a finite list of cells.

    cells are hashable labels (ints, tuples, ...); masses align with them and
    must be nonnegative and sum to 1 within 1e-12.  sample_count records how
    many underlying samples (or effective samples) produced the masses; 0 is
    allowed for analytic measures.
    """

    cells: tuple
    masses: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "cells", tuple(self.cells))
        if len(self.cells) != masses.shape[0]:
            raise DomainError("cells and masses length mismatch")
        if masses.size == 0:
            raise DomainError("empty measure")
        if np.any(masses < -_MASS_TOL):
            raise DomainError("negative mass")
        total = float(masses.sum())
        if abs(total - 1.0) > _MASS_TOL * max(1, masses.size):
            raise DomainError(f"masses sum to {total!r}, not 1")

    @classmethod
    def from_counts(cls, counts: Mapping, sample_count: int | None = None) -> "EmpiricalMeasure":
        """Normalize a cell -> count (or cell -> weight) mapping."""
        items = sorted(counts.items())
        cells = tuple(k for k, _ in items)
        raw = np.array([float(v) for _, v in items])
        total = raw.sum()
        if total <= 0:
            raise DomainError("counts sum to zero")
        n = int(round(total)) if sample_count is None else int(sample_count)
        return cls(cells=cells, masses=raw / total, sample_count=n)

    def as_dict(self) -> dict:
        return dict(zip(self.cells, self.masses.tolist()))


def tv_distance(p: EmpiricalMeasure, q) -> float:
    """Total variation distance (1/2) sum_c |p(c) - q(c)|.

    q may be another EmpiricalMeasure (must carry the identical cell tuple;
    differing layouts raise CellMismatch rather than silently aligning) or a
    mapping cell -> mass, in which case the union of cells is used with zero
    defaults.
    """
    if isinstance(q, EmpiricalMeasure):
        if p.cells != q.cells:
            raise CellMismatch(
                f"cell layouts differ: {len(p.cells)} vs {len(q.cells)} cells"
            )
        return 0.5 * float(np.abs(p.masses - q.masses).sum())
    if isinstance(q, Mapping):
        pd = p.as_dict()
        keys = set(pd) | set(q)
        return 0.5 * sum(abs(pd.get(k, 0.0) - float(q.get(k, 0.0))) for k in keys)
    raise TypeError("q must be an EmpiricalMeasure or a mapping")


def coarsen(measure: EmpiricalMeasure, grouping) -> EmpiricalMeasure:
    """Merge cells under a grouping function cell -> coarse label."""
    out: dict = {}
    for cell, mass in zip(measure.cells, measure.masses):
        key = grouping(cell)
        out[key] = out.get(key, 0.0) + float(mass)
    items = sorted(out.items(), key=lambda kv: repr(kv[0]))
    return EmpiricalMeasure(
        cells=tuple(k for k, _ in items),
        masses=np.array([v for _, v in items]),
        sample_count=measure.sample_count,
    )


@dataclass(frozen=True)
class TailFit:
    """Least-squares fit of a decay law on a curve.

    kind "exponential": log y ~ intercept + slope * x   (rate = -slope)
    kind "power":       log y ~ intercept + slope * log x  (exponent = -slope)
    """

    kind: str
    slope: float
    intercept: float
    r_squared: float
    x_lo: float
    x_hi: float
    n_points: int

    @property
    def rate(self) -> float:
        return -self.slope


def fit_tail(x, y, kind: str = "exponential", fit_range=None,
             min_points: int = 20) -> TailFit:
    """Fit an exponential or power decay to positive curve values.

    Points with y <= 0 (and x <= 0 for power fits) are dropped before
    fitting; fit_range = (lo, hi) restricts to lo <= x <= hi.  Fewer than
    min_points surviving points raises InsufficientData.
    """
    if kind not in ("exponential", "power"):
        raise DomainError(f"unknown fit kind {kind!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = y > 0
    if kind == "power":
        keep &= x > 0
    if fit_range is not None:
        lo, hi = fit_range
        keep &= (x >= lo) & (x <= hi)
    x, y = x[keep], y[keep]
    if x.size < min_points:
        raise InsufficientData(
            f"{x.size} usable points in the fit range, need >= {min_points}"
        )
    u = x if kind == "exponential" else np.log(x)
    w = np.log(y)
    slope, intercept = np.polyfit(u, w, 1)
    resid = w - (intercept + slope * u)
    ss_tot = float(np.sum((w - w.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return TailFit(
        kind=kind,
        slope=float(slope),
        intercept=float(intercept),
        r_squared=r2,
        x_lo=float(x.min()),
        x_hi=float(x.max()),
        n_points=int(x.size),
    )


def survival_curve(samples) -> tuple[np.ndarray, np.ndarray]:
    """Empirical survival function P(X > t) evaluated at the sorted samples.

    Returns (t, s) with strictly increasing t; the final point has s = 0 and
    is retained (log-scale fits drop it on their own).
    """
    samples = np.sort(np.asarray(samples, dtype=float))
    n = samples.size
    if n == 0:
        raise InsufficientData("no samples")
    t, counts = np.unique(samples, return_counts=True)
    below = np.cumsum(counts)
    s = (n - below) / n
    return t, s


@dataclass(frozen=True)
class MgfEstimate:
    """Monte Carlo estimate of E[exp(u X)] with a jackknife standard error.

    top_share is the fraction of the sum carried by the largest 1% of the
    transformed samples; estimates with top_share > 0.5 are flagged unstable
    (the MGF may not exist at this u, or needs far more samples).
    """

    u: float
    mean: float
    stderr: float
    top_share: float
    unstable: bool
    n_samples: int


def mgf_estimate(samples, u: float, top_fraction: float = 0.01,
                 unstable_share: float = 0.5) -> MgfEstimate:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n < 2:
        raise InsufficientData("need at least 2 samples for an MGF estimate")
    with np.errstate(over="ignore"):
        y = np.exp(u * samples)
    if not np.all(np.isfinite(y)):
        return MgfEstimate(u=float(u), mean=np.inf, stderr=np.inf,
                           top_share=1.0, unstable=True, n_samples=int(n))
    total = float(y.sum())
    mean = total / n
    # Jackknife over leave-one-out means; for a plain mean this equals the
    # classical s/sqrt(n), kept in this form so trimmed variants stay drop-in.
    loo = (total - y) / (n - 1)
    var_jack = (n - 1) / n * float(np.sum((loo - loo.mean()) ** 2))
    stderr = float(np.sqrt(var_jack))
    k = max(1, int(np.ceil(top_fraction * n)))
    top = float(np.sort(y)[-k:].sum())
    top_share = top / total if total > 0 else 1.0
    return MgfEstimate(
        u=float(u),
        mean=float(mean),
        stderr=stderr,
        top_share=float(top_share),
        unstable=bool(top_share > unstable_share),
        n_samples=int(n),
    )
