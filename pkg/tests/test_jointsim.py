"""Hybrid simulation: splitting scheme, binned occupancy, hitting times."""
import numpy as np
import pytest

from bdenv.models import catalog
from bdenv.diffusion import binned_joint_measure, example_process
from bdenv.jumpenv import env_from_matrix
from bdenv.jointsim import (
    SimConfig,
    default_bin_edges,
    hitting_time,
    simulate_joint_diffusive,
)
from bdenv.stats import tv_distance
from bdenv.errors import DomainError, RateTooLargeForStep, SpeedCap

MODEL = catalog("mminf", {"lam": "env", "mu": 2.0, "beta": ("geometric", 0.25)})


def rbm():
    return example_process("rbm_halfline", {"c": 1.0, "sigma": 2.0**0.5})


def test_default_bin_edges_cover_the_law():
    _, law = rbm()
    edges = default_bin_edges(law, 16)
    assert edges.size == 17
    assert edges[0] == float(law.domain.lower_bound())
    assert np.all(np.diff(edges) > 0)
    # the top edge sits at the 99.9 percent quantile
    assert law.cdf(edges[-1]) == pytest.approx(0.999, abs=1e-9)


def test_occupancy_sums_to_one():
    spec, law = rbm()
    cfg = SimConfig(horizon=30.0, dt=1e-3, burn_in=1.0, seed=2, replicas=4)
    res = simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law,
                                   bin_edges=default_bin_edges(law, 8), n_rows=4)
    assert np.sum(res.measure.masses) == pytest.approx(1.0, abs=1e-9)
    assert res.steps_recorded == 29000


def test_occupancy_deterministic_given_seed():
    spec, law = rbm()
    cfg = SimConfig(horizon=10.0, dt=1e-3, burn_in=0.5, seed=7, replicas=2)
    a = simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law,
                                 bin_edges=default_bin_edges(law, 8), n_rows=4)
    b = simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law,
                                 bin_edges=default_bin_edges(law, 8), n_rows=4)
    assert np.array_equal(a.counts, b.counts)
    assert np.array_equal(a.final_n, b.final_n)


def test_dt_halving_consistency():
    """Halving dt must not move the binned occupancy by more than noise."""
    spec, law = rbm()
    edges = default_bin_edges(law, 8)
    out = {}
    for dt in (2e-3, 1e-3):
        cfg = SimConfig(horizon=200.0, dt=dt, burn_in=2.0, seed=11, replicas=8)
        res = simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law,
                                       bin_edges=edges, n_rows=4)
        out[dt] = res.measure
    drift = tv_distance(out[2e-3], out[1e-3].as_dict())
    assert drift < 0.05


def test_occupancy_approaches_product_measure():
    spec, law = rbm()
    edges = default_bin_edges(law, 8)
    cfg = SimConfig(horizon=400.0, dt=1e-3, burn_in=2.0, seed=3, replicas=8)
    res = simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law,
                                   bin_edges=edges, n_rows=4)
    analytic = binned_joint_measure(MODEL, law, 4, edges)
    assert tv_distance(res.measure, analytic) < 0.12


def test_record_path_returns_trajectory():
    spec, law = rbm()
    cfg = SimConfig(horizon=5.0, dt=1e-3, burn_in=0.0, seed=5, record="path")
    res = simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law)
    assert res.t.size == res.n.size == res.z.size == 5001
    assert np.all(res.z >= 0.0)
    assert np.all(np.diff(res.n) <= 1) and np.all(np.diff(res.n) >= -1)


def test_step_budget_guard():
    hot = catalog("mm1", {"lam": 80.0, "mu": 80.0})
    spec, law = rbm()
    cfg = SimConfig(horizon=1.0, dt=1e-3, burn_in=0.0, seed=1)
    with pytest.raises(RateTooLargeForStep):
        simulate_joint_diffusive(hot, spec, cfg, (0, 0.5), law=law)


def test_speed_cap_guard():
    # beta_n growing faster than r_n shrinks makes the clock blow up
    fast = catalog("mminf", {"lam": "env", "mu": 2.0, "beta": lambda n: 100.0**n})
    spec, law = rbm()
    cfg = SimConfig(horizon=50.0, dt=1e-3, burn_in=0.0, seed=6, speed_cap=1e6)
    with pytest.raises(SpeedCap):
        simulate_joint_diffusive(fast, spec, cfg, (0, 0.5), law=law,
                                 bin_edges=default_bin_edges(law, 8), n_rows=4)


def test_burn_in_must_fit_horizon():
    spec, law = rbm()
    cfg = SimConfig(horizon=1.0, dt=1e-3, burn_in=2.0, seed=1)
    with pytest.raises(DomainError):
        simulate_joint_diffusive(MODEL, spec, cfg, (0, 0.5), law=law,
                                 bin_edges=default_bin_edges(law, 8), n_rows=4)


def test_hitting_time_mm1_mean():
    """Busy period of M/M/1 from level 1: mean 1/(mu - lam) = 1."""
    model = catalog("mm1", {"lam": 1.0, "mu": 2.0})
    env = env_from_matrix([0.0], [[0.0]])
    cfg = SimConfig(horizon=400.0, dt=0.0, burn_in=0.0, seed=21)
    sample = hitting_time(model, env, (1, 0.0), 0, cfg, replicas=4000)
    assert sample.censored == 0
    mean = float(np.mean(sample.times))
    se = float(np.std(sample.times) / np.sqrt(sample.times.size))
    assert abs(mean - 1.0) < 3.5 * se


def test_hitting_time_mminf_short_tails():
    model = catalog("mminf", {"lam": 1.0, "mu": 1.0})
    env = env_from_matrix([0.0], [[0.0]])
    cfg = SimConfig(horizon=200.0, dt=0.0, burn_in=0.0, seed=22)
    sample = hitting_time(model, env, (3, 0.0), 0, cfg, replicas=2000)
    assert sample.censored == 0
    # all three initial customers leave quickly; mean well under 5
    assert float(np.mean(sample.times)) < 5.0
