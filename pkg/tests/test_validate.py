import numpy as np
import pytest
from dataclasses import replace

from hawkes_mca.dynamics import CostSpec, ModelSpec
from hawkes_mca.hawkes import HawkesSpec, MarkMeasure
from hawkes_mca.lattice import assemble_transitions, build_lattice
from hawkes_mca.presets import OUCyberParams, lambda_to_sigma, ou_cyber
from hawkes_mca.solver import DIFFUSE, STOP, Policy, backward_solve, terminal_layer
from hawkes_mca.validate import (BRUTE_CAPS, SizeCapError, SweepReport, brute_force_value, chain_path,
                                 h_sweep, L_sweep, push_forward, random_tiny_instance, rollout_policy,
                                 stopping_csv, stopping_study)


def flat_model(L=1.0):
    hk = HawkesSpec(baseline=0.0, weights=[0.0], decays=[1.0], marks=MarkMeasure.dirac(1.0), horizon=1.0)
    return ModelSpec(drift=lambda x: 0 * np.asarray(x, dtype=float),
                     volatility=lambda x, b: 0.1 + 0 * np.asarray(x, dtype=float),
                     jump=lambda x, z, g: 0 * np.asarray(x), hawkes=hk, L=L)


# ---- oracle

def test_oracle_no_layers():
    model, cost, lat = random_tiny_instance(3)
    lat0 = replace(lat, n_steps=0)
    np.testing.assert_array_equal(brute_force_value(model, cost, lat0), terminal_layer(lat0, cost))


def test_oracle_deterministic_chain():
    # zero volatility floor replaced by a tiny one; the payoffs make stopping useless
    model = flat_model()
    cost = CostSpec(stop_payoff=lambda x: -5 + 0 * np.asarray(x), terminal_payoff=lambda x: np.asarray(x, dtype=float) * 0 + 1.0,
                    discount=0.3)
    lat = build_lattice(model, 1 / 3, M=2, horizon=0.1)
    lat = replace(lat, n_steps=3)
    want = np.exp(-0.3 * 3 * lat.dt)
    np.testing.assert_allclose(brute_force_value(model, cost, lat), want, rtol=1e-14)


def test_oracle_size_cap():
    model, cost = ou_cyber()
    lat = build_lattice(model, 0.1, M=3)
    with pytest.raises(SizeCapError):
        brute_force_value(model, cost, lat)


def test_tiny_instances_inside_caps():
    for seed in range(30):
        model, cost, lat = random_tiny_instance(seed)
        assert lat.nx <= BRUTE_CAPS["nx"] and lat.n_sigma <= BRUTE_CAPS["n_sigma"]
        assert 1 <= lat.n_steps <= BRUTE_CAPS["n_steps"] and len(model.control_pairs) == 2


# ---- rollouts

def test_rollout_immediate_stop():
    model, cost = ou_cyber()
    lat = build_lattice(model, 0.1, M=11)
    pol = Policy.constant(lat, STOP)
    res = rollout_policy(pol, model, cost, lat, 500, 0, 0.2, [0.0])
    assert res.mean == pytest.approx(0.3, abs=1e-15) and res.se == 0.0
    assert res.maturity_fraction == 0.0 and res.mean_stop_time == 0.0


def test_rollout_matches_push_forward():
    model, cost = ou_cyber(OUCyberParams(d=0.0, a=0.0))
    lat = build_lattice(model, 0.05, M=11)
    tm = assemble_transitions(model, cost, lat)
    pol = Policy.constant(lat, DIFFUSE)
    res = rollout_policy(pol, model, cost, lat, 10_000, 11, 0.0, [0.0], tm)
    dist = push_forward(model, cost, lat, 0.0, [0.0], transitions=tm)
    G = np.repeat(cost.terminal_payoff(lat.x_grid), lat.n_sigma)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(res.mean - dist @ G) <= 3 * res.se
    assert res.maturity_fraction == 1.0


def test_rollout_reproducible():
    model, cost = ou_cyber()
    lat = build_lattice(model, 0.1, M=11)
    _, pol = backward_solve(model, cost, lat)
    a = rollout_policy(pol, model, cost, lat, 300, 5, 0.0, [0.0])
    b = rollout_policy(pol, model, cost, lat, 300, 5, 0.0, [0.0])
    assert a.payoffs.tobytes() == b.payoffs.tobytes()


def test_rollout_rejects_foreign_policy():
    model, cost = ou_cyber()
    lat = build_lattice(model, 0.1, M=11)
    other = build_lattice(model, 0.05, M=11)
    with pytest.raises(ValueError):
        rollout_policy(Policy.constant(other, STOP), model, cost, lat, 10, 0, 0.0, [0.0])


def test_chain_path_injection():
    model, cost = ou_cyber(OUCyberParams(vol=0.1))
    lat = build_lattice(model, 0.05, M=21)
    t, x, lam = chain_path(model, cost, lat, -0.5, [0.0], seed=3, inject_time=0.5, inject_amount=0.5)
    assert t.size == x.size == lam.size == lat.n_steps + 1
    assert lam[0] == pytest.approx(1.0)
    assert np.all(np.isin(np.round(x / lat.h), np.round(lat.x_grid / lat.h)))


# ---- sweeps

def test_h_sweep_constant_model():
    model = flat_model()
    cost = CostSpec(stop_payoff=lambda x: 0 * np.asarray(x) - 1, terminal_payoff=lambda x: 0 * np.asarray(x) + 2)
    rep = h_sweep(model, cost, [0.5, 0.25, 0.125], [(0.0, 0.0)], lambda l: np.array([0.0]), M=2)
    np.testing.assert_allclose(rep.values, 2.0)
    assert rep.cauchy_ok()


def test_sweep_bookkeeping():
    rep = SweepReport("h", [0.04, 0.02], [(0, 1)], np.array([[1.0], [1.25]]), [0.1, 0.2])
    assert rep.diffs.tolist() == [[0.25]] and rep.cauchy_ok()
    lines = rep.to_csv().splitlines()
    assert lines[0] == "h,x0,lambda0,V0,diff_prev"
    assert lines[1].endswith(",") and lines[2].endswith(",0.25")
    assert "0.1" not in lines[1].split(",")[-1]


def test_h_sweep_requires_descending(ou_preset):
    _, model, cost = ou_preset
    with pytest.raises(ValueError):
        h_sweep(model, cost, [0.02, 0.04], [(0, 1)], lambda l: np.array([l - 1]))


def test_h_sweep_reproducible(ou_preset):
    _, model, cost = ou_preset
    a = h_sweep(model, cost, [0.1, 0.05], [(0, 1)], lambda l: np.array([l - 1]))
    b = h_sweep(model, cost, [0.1, 0.05], [(0, 1)], lambda l: np.array([l - 1]))
    assert a.to_csv() == b.to_csv()


def _L_factory(L):
    p = OUCyberParams(x_min=-L)
    m, c = ou_cyber(p)
    return m, c, lambda l: np.array([lambda_to_sigma(l, p)])


def test_L_sweep_identical_L():
    rep = L_sweep(_L_factory, [1.0], lambda L: 0.1, [(0.0, 1.0)], M=21)
    assert rep.values.shape == (1, 1) and rep.diffs.size == 0


def test_L_sweep_stabilizes():
    rep = L_sweep(_L_factory, [1.0, 2.0, 3.0], lambda L: 0.05, [(0.0, 1.0)], M=21)
    d = rep.diffs[:, 0]
    assert d[1] <= d[0]
    with pytest.raises(ValueError):
        L_sweep(_L_factory, [2.0, 1.0], lambda L: 0.1, [(0.0, 1.0)])


# ---- stopping study

def test_stopping_no_jumps_injection_helps():
    def factory(phi):
        p = OUCyberParams(phi=phi, d=0.0, a=0.0)
        m, c = ou_cyber(p)
        return m, c, lambda l: np.array([0.0])
    rows = stopping_study(factory, [None, 0.01], [0.0], h=0.05, x0=0.0, n_paths=1000, seed=2)
    no_inj, cheap = rows
    assert cheap.maturity_fraction > no_inj.maturity_fraction
    text = stopping_csv(rows)
    assert text.splitlines()[1].startswith("inf,0.0,")
