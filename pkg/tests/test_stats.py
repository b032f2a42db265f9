"""Empirical measures, TV distance, tail fitting, MGF estimation."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdenv.stats import (
    EmpiricalMeasure,
    coarsen,
    fit_tail,
    mgf_estimate,
    survival_curve,
    tv_distance,
)
from bdenv.errors import InsufficientData


def make_measure(masses):
    masses = np.asarray(masses, dtype=float)
    cells = tuple((i,) for i in range(masses.size))
    return EmpiricalMeasure(cells=cells, masses=masses / masses.sum(), sample_count=1000)


def test_tv_identical_is_zero():
    p = make_measure([1, 2, 3])
    assert tv_distance(p, p) == 0.0


def test_tv_disjoint_is_one():
    p = EmpiricalMeasure(cells=((0,),), masses=np.array([1.0]), sample_count=10)
    q = {(1,): 1.0}
    assert tv_distance(p, q) == pytest.approx(1.0)


def test_tv_known_value():
    p = make_measure([0.5, 0.5, 0.0])
    q = {(0,): 0.25, (1,): 0.25, (2,): 0.5}
    assert tv_distance(p, q) == pytest.approx(0.5)


@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8),
       st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_tv_axioms(a, b):
    k = max(len(a), len(b))
    a = a + [0.01] * (k - len(a))
    b = b + [0.01] * (k - len(b))
    p = make_measure(a)
    q = make_measure(b)
    d = tv_distance(p, {c: m for c, m in zip(q.cells, q.masses)})
    d_rev = tv_distance(q, {c: m for c, m in zip(p.cells, p.masses)})
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(d_rev, abs=1e-12)


def test_coarsen_conserves_mass():
    p = make_measure([1, 2, 3, 4])
    merged = coarsen(p, lambda cell: cell[0] // 2)
    assert np.sum(merged.masses) == pytest.approx(1.0)
    assert merged.masses[list(merged.cells).index(0)] == pytest.approx(0.3)


def test_coarsen_contracts_tv():
    """Merging bins can only shrink the distance between two measures."""
    p = make_measure([1, 2, 3, 4])
    q = make_measure([4, 3, 2, 1])
    before = tv_distance(p, q.as_dict())
    pc = coarsen(p, lambda c: c[0] // 2)
    qc = coarsen(q, lambda c: c[0] // 2)
    after = tv_distance(pc, qc.as_dict())
    assert after <= before + 1e-12


def test_fit_tail_exact_exponential():
    x = np.linspace(0, 10, 200)
    y = 3.0 * np.exp(-0.7 * x)
    fit = fit_tail(x, y, kind="exponential")
    assert fit.slope == pytest.approx(-0.7, rel=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-9)


def test_fit_tail_exact_power():
    x = np.geomspace(1, 100, 60)
    y = 5.0 * x**-1.8
    fit = fit_tail(x, y, kind="power")
    assert fit.slope == pytest.approx(-1.8, rel=1e-9)


def test_fit_tail_range_restriction():
    x = np.linspace(0, 10, 100)
    y = np.exp(-x)
    y[:50] = 1.0  # flat head should be excluded by the range
    fit = fit_tail(x, y, kind="exponential", fit_range=(6.0, 10.0), min_points=5)
    assert fit.slope == pytest.approx(-1.0, rel=1e-6)
    assert fit.x_lo >= 6.0


def test_fit_tail_insufficient_points():
    with pytest.raises(InsufficientData):
        fit_tail([1.0, 2.0], [0.5, 0.25], kind="exponential", min_points=20)


def test_survival_curve_monotone():
    rng = np.random.default_rng(1)
    t, s = survival_curve(rng.exponential(1.0, size=500))
    assert np.all(np.diff(t) >= 0)
    assert np.all(np.diff(s) <= 0)
    assert s[0] <= 1.0 and s[-1] >= 0.0


def test_survival_curve_exponential_slope():
    rng = np.random.default_rng(2)
    t, s = survival_curve(rng.exponential(0.5, size=20000))
    keep = s > 1e-3
    fit = fit_tail(t[keep], s[keep], kind="exponential")
    assert fit.slope == pytest.approx(-2.0, rel=0.1)


def test_mgf_estimate_exponential_oracle():
    """E[exp(u X)] = beta/(beta-u) for X ~ Exp(rate beta)."""
    rng = np.random.default_rng(3)
    x = rng.exponential(1.0 / 2.0, size=200000)
    est = mgf_estimate(x, 0.8)
    want = 2.0 / (2.0 - 0.8)
    assert abs(est.mean - want) < 4 * est.stderr
    assert not est.unstable


def test_mgf_estimate_flags_heavy_concentration():
    # u at 95 percent of the rate: the top slice of the sample carries
    # most of the weighted mass, which the estimator must flag
    rng = np.random.default_rng(4)
    x = rng.exponential(1.0, size=5000)
    est = mgf_estimate(x, 0.999)
    assert est.unstable


def test_mgf_estimate_zero_exponent():
    est = mgf_estimate(np.ones(100), 0.0)
    assert est.mean == pytest.approx(1.0)
    assert est.stderr == pytest.approx(0.0, abs=1e-15)
