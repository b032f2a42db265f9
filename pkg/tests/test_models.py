"""Catalog models, weight recursions, summability checks."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdenv.models import (
    catalog,
    check_summability,
    cumulative_ratio,
    geometric_variability,
    normalized_weights,
)
from bdenv.errors import Divergence, DomainError, MissingParam, UnknownModel, ZeroDeathRate


def test_unknown_model_name():
    with pytest.raises(UnknownModel):
        catalog("mm2", {"lam": 1.0, "mu": 1.0})


def test_missing_param_names_the_parameter():
    with pytest.raises(MissingParam, match="mu"):
        catalog("mm1", {"lam": 1.0})


def test_mm1_rates_constant_in_n():
    m = catalog("mm1", {"lam": 2.0, "mu": 3.0})
    n = np.arange(6)
    assert np.all(m.birth_rate(n, 0.0) == 2.0)
    assert np.all(m.death_rate(n, 0.0) == 3.0)


def test_mminf_death_scales_linearly():
    m = catalog("mminf", {"lam": 1.0, "mu": 0.5})
    assert m.death_rate(4, 0.0) == 2.0
    assert m.death_rate(0, 0.0) == 0.0


def test_mmk_death_saturates_at_k():
    m = catalog("mmk", {"lam": 1.0, "mu": 1.0, "K": 3})
    n = np.arange(8)
    assert list(m.death_rate(n, 0.0)) == [0, 1, 2, 3, 3, 3, 3, 3]


def test_mmk0_gates_births_at_k():
    m = catalog("mmk0", {"lam": 5.0, "mu": 1.0, "K": 2})
    assert m.birth_rate(1, 0.0) == 5.0
    assert m.birth_rate(2, 0.0) == 0.0
    assert m.birth_rate(7, 0.0) == 0.0


def test_mmk_plus_m_abandonment_beyond_k():
    m = catalog("mmk_plus_m", {"lam": 1.0, "mu": 2.0, "K": 2, "gamma": 0.5})
    # n=5: two busy servers plus three waiting customers abandoning
    assert m.death_rate(5, 0.0) == 2 * 2.0 + 3 * 0.5


def test_env_string_routes_rate_through_state():
    m = catalog("mm1", {"lam": "env", "mu": 1.0})
    assert m.birth_rate(0, 0.7) == 0.7
    assert m.birth_rate(0, 1.4) == 1.4


def test_rate_mapping_keyed_by_label():
    m = catalog("mm1", {"lam": {"slow": 0.5, "fast": 2.0}, "mu": 3.0})
    assert m.birth_rate(0, "slow") == 0.5
    assert m.birth_rate(0, "fast") == 2.0


def test_geometric_variability_values():
    beta = geometric_variability(0.5)
    assert beta(0) == 1.0
    assert beta(3) == 0.125


def test_variability_from_params():
    m = catalog("mm1", {"lam": 1.0, "mu": 2.0, "beta": ("geometric", 0.9)})
    assert m.variability(2) == pytest.approx(0.81)
    m2 = catalog("mm1", {"lam": 1.0, "mu": 2.0})
    assert m2.variability(10) == 1.0


def test_cumulative_ratio_matches_direct_product():
    """log r_n must equal the telescoped sum of log(lam_{k-1}/mu_k)."""
    m = catalog("mminf", {"lam": 1.3, "mu": 0.7})
    cr = cumulative_ratio(m, 0.0, 12)
    direct = 0.0
    assert cr.log_values[0] == 0.0
    for n in range(1, 13):
        direct += math.log(m.birth_rate(n - 1, 0.0) / m.death_rate(n, 0.0))
        assert cr.log_values[n] == pytest.approx(direct, rel=1e-12)


@given(lam=st.floats(0.1, 3.0), mu=st.floats(0.1, 3.0))
@settings(max_examples=40, deadline=None)
def test_ratio_recursion_identity(lam, mu):
    m = catalog("mmk", {"lam": lam, "mu": mu, "K": 2})
    cr = cumulative_ratio(m, 0.0, 20)
    for n in range(20):
        step = m.birth_rate(n, 0.0) / m.death_rate(n + 1, 0.0)
        got = math.exp(cr.log_values[n + 1] - cr.log_values[n])
        assert got == pytest.approx(step, rel=1e-9)


def test_zero_death_rate_rejected():
    m = catalog("linear_growth", {"lam": 0.1, "theta": 1.0, "mu": 0.0})
    with pytest.raises(ZeroDeathRate):
        cumulative_ratio(m, 0.0, 5)


def test_normalized_weights_sum_to_one():
    m = catalog("mm1", {"lam": 0.4, "mu": 1.0})
    w = normalized_weights(m, 0.0, 400)
    assert np.sum(w.kappa) == pytest.approx(1.0, abs=1e-12)
    # geometric tail: kappa_n = (1-rho) rho^n
    assert w.kappa[0] == pytest.approx(0.6, abs=1e-10)
    assert w.kappa[3] == pytest.approx(0.6 * 0.4**3, rel=1e-9)


def test_normalized_weights_mmk_rho_one_kappa0():
    # two servers at rho = 1: kappa_0 = 1/3
    m = catalog("mmk", {"lam": 1.0, "mu": 1.0, "K": 2})
    w = normalized_weights(m, 0.0, 200)
    assert abs(w.kappa[0] - 1.0 / 3.0) < 1e-12


def test_normalized_weights_divergent_raises():
    m = catalog("mm1", {"lam": 2.0, "mu": 1.0})
    with pytest.raises(Divergence):
        normalized_weights(m, 0.0, 200)


def test_summability_statuses():
    assert check_summability(catalog("mm1", {"lam": 0.5, "mu": 1.0}), 0.0).summable
    rep = check_summability(catalog("mm1", {"lam": 2.0, "mu": 1.0}), 0.0)
    assert rep.status == "divergent"
    # factorial decay beats any bounded birth rate
    assert check_summability(catalog("mminf", {"lam": 5.0, "mu": 0.1}), 0.0).summable


def test_summability_env_dependent():
    m = catalog("mm1", {"lam": "env", "mu": 1.0})
    assert check_summability(m, 0.5).summable
    assert check_summability(m, 2.0).status == "divergent"


def test_negative_rate_rejected():
    m = catalog("mm1", {"lam": -1.0, "mu": 1.0})
    with pytest.raises(DomainError):
        cumulative_ratio(m, 0.0, 5)
