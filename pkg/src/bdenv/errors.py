"""Error taxonomy shared across the package.

Every raised condition that a caller can meaningfully branch on gets its own
class; generic misuse stays ValueError/TypeError.
"""

from __future__ import annotations


class BdEnvError(Exception):
    """Base class for all package-specific errors."""


class DomainError(BdEnvError, ValueError):
    """Argument outside the mathematical domain of a formula."""


class ZeroDeathRate(BdEnvError):
    """A death rate mu_n(z) <= 0 was encountered for some n >= 1."""


class Divergence(BdEnvError):
    """A series of level weights shows no usable geometric tail decay."""


class UnknownModel(BdEnvError):
    """Catalog lookup with an unrecognized model name."""


class MissingParam(BdEnvError):
    """Catalog model instantiated without a required parameter."""


class NoCommonV(BdEnvError):
    """No single environment law balances every probed level generator.

    Attributes carry the first failing level and its residual.
    """

    def __init__(self, message: str, failing_n: int | None = None,
                 residual: float | None = None):
        super().__init__(message)
        self.failing_n = failing_n
        self.residual = residual


class XiDivergent(BdEnvError):
    """The normalizing constant Xi = sum_n int r_n d(nu) is infinite."""


class RateExplosion(BdEnvError):
    """Total exit rate exceeded the configured cap during simulation."""


class SpeedCap(BdEnvError):
    """Environment clock speed exceeded the configured cap."""


class StepRejected(BdEnvError):
    """A reflection/projection step failed to converge."""


class RateTooLargeForStep(BdEnvError):
    """(lambda + mu) * dt too large for the Euler birth-death update."""


class SkewSymmetryFailed(BdEnvError):
    """2 Sigma = R D + D R^T does not hold within tolerance."""


class NegativeEffectiveDrift(BdEnvError):
    """Jump-diffusion net drift c - kappa * mean_jump is not positive."""


class DivergenceSuspected(BdEnvError):
    """An MGF estimate or series shows signs of sitting outside its domain."""


class HorizonExceeded(BdEnvError):
    """Every coupling replica was censored at the horizon."""


class AllCensored(BdEnvError):
    """Every hitting-time replica was censored at the horizon."""


class NotLyapunov(BdEnvError):
    """The candidate V has nonnegative drift somewhere on the checked range."""


class BoundViolated(BdEnvError):
    """A Monte Carlo mean exceeded its certified bound beyond noise.

    Attribute `margin` holds (mc_mean - bound) in stderr units.
    """

    def __init__(self, message: str, margin: float | None = None):
        super().__init__(message)
        self.margin = margin


class InsufficientData(BdEnvError):
    """Too few points or samples for the requested fit."""


class CellMismatch(BdEnvError):
    """Two empirical measures do not share a common cell layout."""


class ConfigError(BdEnvError):
    """A run configuration failed validation; message names the field."""
