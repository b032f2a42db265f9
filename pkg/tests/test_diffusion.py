"""Diffusive environments: stationary laws, normalizers, binned product measures."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdenv.models import catalog
from bdenv.diffusion import (
    ExponentialJumps,
    binned_joint_measure,
    compute_xi_diffusive,
    example_process,
    invariant_measure_diffusive,
    simulate_env_path,
    skew_symmetry_check,
    xi_jump_rbm_closed_form,
    xi_rbm_arrival_closed_form,
)
from bdenv.jointsim import default_bin_edges
from bdenv.errors import DomainError, SkewSymmetryFailed, XiDivergent


def test_unknown_example_tag():
    with pytest.raises(DomainError):
        example_process("brownian_bridge", {})


def test_rbm_halfline_law_is_exponential():
    _, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    z = np.linspace(0.0, 5.0, 50)
    assert np.allclose(law.cdf(z), 1.0 - np.exp(-z), atol=1e-12)
    assert law.mean() == pytest.approx(1.0)
    assert law.quantile(law.cdf(0.7)) == pytest.approx(0.7, rel=1e-9)


def test_rbm_shifted_law_offsets_the_exponential():
    _, law = example_process("rbm_shifted", {"c": 0.5, "sigma": 1.0, "mu0": 2.0})
    assert law.cdf(2.0) == pytest.approx(0.0, abs=1e-12)
    assert law.cdf(3.0) == pytest.approx(1.0 - math.exp(-1.0), rel=1e-12)
    assert float(law.domain.lower_bound()) == 2.0


def test_reflected_ou_law_is_half_gaussian():
    _, law = example_process("reflected_ou", {"c": 1.0, "sigma": 2.0**0.5})
    z = np.linspace(0.0, 3.0, 30)
    assert np.allclose(law.cdf(z), [math.erf(v) for v in z], atol=1e-12)


def test_orthant_law_is_product_of_exponentials():
    _, law = example_process(
        "rbm_product_orthant",
        {"c": [1.0, 2.0], "R": [[1.0, 0.0], [0.0, 1.0]],
         "Sigma": [[1.0, 0.0], [0.0, 1.0]], "shifts": [0.0, 0.0]},
    )
    assert law.dim == 2
    # coordinatewise marginals stay exponential
    assert law.marginal_cdf(0, 1.0) == pytest.approx(1.0 - math.exp(-2.0), rel=1e-9)
    assert law.marginal_cdf(1, 1.0) == pytest.approx(1.0 - math.exp(-4.0), rel=1e-9)


def test_skew_symmetry_gate():
    R = np.array([[1.0, 0.5], [0.0, 1.0]])
    D = np.diag([1.0, 1.0])
    Sigma = (R @ D + D @ R.T) / 2.0
    ok, resid = skew_symmetry_check(R, Sigma)
    assert ok and resid < 1e-12
    with pytest.raises(SkewSymmetryFailed):
        example_process(
            "rbm_product_orthant",
            {"c": [1.0, 1.0], "R": [[1.0, 0.9], [0.0, 1.0]],
             "Sigma": [[1.0, 0.3], [0.3, 1.0]], "shifts": [0.0, 0.0]},
        )


def test_jump_rbm_law_mgf_form():
    _, law = example_process("jump_rbm", {"c": 1.0, "sigma": 1.0, "kappa": 0.5,
                                          "jump_law": ExponentialJumps(0.5)})
    # MGF at 0 is 1 and the mean matches -Psi'(0) computed numerically
    assert law.mgf(0.0) == pytest.approx(1.0)
    h = 1e-6
    mean_numeric = (law.mgf(h) - 1.0) / h
    assert law.mean() == pytest.approx(mean_numeric, rel=1e-3)


def test_xi_closed_form_arrival_rbm():
    """Infinite-server model driven by RBM arrivals: Xi = alpha/(alpha - 1/mu)."""
    assert xi_rbm_arrival_closed_form(1.0, 2.0**0.5, 2.0) == pytest.approx(2.0)
    with pytest.raises(XiDivergent):
        xi_rbm_arrival_closed_form(1.0, 2.0**0.5, 1.0)  # alpha = 1/mu exactly


def test_xi_quadrature_matches_closed_form():
    model = catalog("mminf", {"lam": "env", "mu": 2.0})
    _, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    res = compute_xi_diffusive(model, law)
    assert res.value == pytest.approx(2.0, rel=1e-6)


@given(c=st.floats(0.3, 3.0), mu=st.floats(0.3, 3.0))
@settings(max_examples=20, deadline=None)
def test_xi_divergence_boundary(c, mu):
    """Divergence exactly when 2c/sigma^2 <= 1/mu, under either route."""
    sigma = 2.0**0.5
    alpha = 2.0 * c / sigma**2
    model = catalog("mminf", {"lam": "env", "mu": mu})
    _, law = example_process("rbm_halfline", {"c": c, "sigma": sigma})
    if alpha > 1.0 / mu + 0.02:
        v = compute_xi_diffusive(model, law).value
        assert v == pytest.approx(alpha / (alpha - 1.0 / mu), rel=1e-5)
    elif alpha < 1.0 / mu - 0.02:
        with pytest.raises(XiDivergent):
            compute_xi_diffusive(model, law)


def test_xi_jump_rbm_closed_form_consistency():
    _, law = example_process("jump_rbm", {"c": 1.0, "sigma": 1.0, "kappa": 0.5,
                                          "jump_law": ExponentialJumps(0.3)})
    model = catalog("mminf", {"lam": "env", "mu": 2.0})
    want = xi_jump_rbm_closed_form(law, 2.0)
    got = compute_xi_diffusive(model, law)
    assert got.value == pytest.approx(want, rel=1e-6)


def test_invariant_measure_diffusive_weights():
    model = catalog("mminf", {"lam": "env", "mu": 2.0})
    _, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    hyb = invariant_measure_diffusive(model, law)
    assert np.sum(hyb.weights) == pytest.approx(1.0, abs=1e-9)
    assert hyb.Xi == pytest.approx(2.0, rel=1e-6)
    # level weights for this pair telescope to kappa_n = 2^-(n+1)
    assert hyb.weights[0] == pytest.approx(0.5, rel=1e-6)
    assert hyb.weights[3] == pytest.approx(2.0**-4, rel=1e-5)


def test_binned_measure_sums_to_one_and_shape():
    model = catalog("mminf", {"lam": "env", "mu": 2.0})
    _, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    edges = default_bin_edges(law, 10)
    meas = binned_joint_measure(model, law, 4, edges)
    assert sum(meas.masses) == pytest.approx(1.0, abs=1e-8)
    rows = {c[0] for c in meas.cells}
    assert rows == set(range(5))  # 4 exact rows plus the aggregate row


def test_binned_measure_edges_must_start_at_lower():
    model = catalog("mminf", {"lam": "env", "mu": 2.0})
    _, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    with pytest.raises(DomainError):
        binned_joint_measure(model, law, 4, np.array([0.5, 1.0, 2.0]))


def test_binned_measure_refinement_is_consistent():
    """Merging adjacent fine bins reproduces the coarse table."""
    model = catalog("mminf", {"lam": "env", "mu": 2.0})
    _, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    coarse = default_bin_edges(law, 6)
    fine = np.sort(np.unique(np.concatenate([coarse, (coarse[:-1] + coarse[1:]) / 2])))
    mc = binned_joint_measure(model, law, 3, coarse)
    mf = binned_joint_measure(model, law, 3, fine)
    cd = mc.as_dict()
    fd = mf.as_dict()
    for (n, b), mass in cd.items():
        merged = fd.get((n, 2 * b), 0.0) + fd.get((n, 2 * b + 1), 0.0)
        if b == coarse.size - 2:  # last coarse bin swallows the fine remainder
            merged = sum(v for (nn, bb), v in fd.items() if nn == n and bb >= 2 * b)
        assert merged == pytest.approx(mass, abs=1e-9)


def test_env_path_projection_keeps_domain():
    spec, law = example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})
    path = simulate_env_path(spec, 0.5, 1e-3, 20000, seed=4)
    assert np.all(path >= 0.0)


def test_env_path_deterministic_given_seed():
    spec, _ = example_process("reflected_ou", {"c": 1.0, "sigma": 1.0})
    a = simulate_env_path(spec, 0.2, 1e-3, 5000, seed=8)
    b = simulate_env_path(spec, 0.2, 1e-3, 5000, seed=8)
    assert np.array_equal(a, b)


def test_env_path_thinning_and_burn_in():
    spec, _ = example_process("rbm_halfline", {"c": 1.0, "sigma": 1.0})
    path = simulate_env_path(spec, 0.0, 1e-3, 10000, seed=5,
                             burn_in_steps=2000, thin=4)
    assert path.size == (10000 - 2000) // 4


def test_stationary_law_json_dict_is_serializable():
    _, law = example_process("rbm_halfline", {"c": 1.5, "sigma": 1.0})
    d = law.to_json_dict()
    json.dumps(d)  # no callables or arrays may leak through
    assert d["tag"] == "exponential"
    assert d["rate"] == pytest.approx(3.0)
