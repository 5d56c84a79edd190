from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hawkes_mca.dynamics import ModelSpec
from hawkes_mca.hawkes import HawkesSpec, MarkMeasure
from hawkes_mca.lattice import (assemble_transitions, build_lattice, diffusion_probs,
                                jump_cell_masses, jump_cells, lin_split, product_split, time_step,
                                voronoi_weights, _product_split_arrays)
from hawkes_mca.validate import local_consistency_audit, row_moments


def const_model(sigma=1.0, mu=0.0, L=1.0, baseline=0.0, weights=(0.0,)):
    hk = HawkesSpec(baseline=baseline, weights=list(weights), decays=[1.0] * len(weights),
                    marks=MarkMeasure.dirac(1.0), horizon=1.0)
    return ModelSpec(drift=lambda x: mu + 0 * np.asarray(x, dtype=float),
                     volatility=lambda x, b: sigma * b + 0 * np.asarray(x, dtype=float),
                     jump=lambda x, z, g: 0 * np.asarray(x) * z, hawkes=hk, L=L)


# ---- grids and time step

def test_grid_small():
    lat = build_lattice(const_model(), 0.5)
    np.testing.assert_allclose(lat.x_grid, [-1, -0.5, 0, 0.5, 1])


def test_grid_rejects_non_divisor():
    with pytest.raises(ValueError, match="does not divide"):
        build_lattice(const_model(), 0.3)


def test_grid_preset_count(ou_preset):
    _, model, _ = ou_preset
    assert build_lattice(model, 0.05).nx == 41


def test_q_star_preset(ou_preset):
    _, model, _ = ou_preset
    dt, n, q = time_step(model, 0.1, max_jump_prob=np.inf)
    assert q == pytest.approx(0.16, abs=1e-15)
    assert 0.01 / q == pytest.approx(0.0625)
    assert dt == pytest.approx(1 / 16)


def test_time_step_pure_diffusion():
    dt, n, q = time_step(const_model(), 0.1)
    assert dt == pytest.approx(0.01) and n == 100


def test_time_step_jump_cap(ou_preset):
    _, model, _ = ou_preset
    # lambda_max = a + L d = 2, so dt <= 0.05
    dt, _, _ = time_step(model, 0.1)
    assert dt <= 0.05 + 1e-15 and dt <= 0.01 / 0.01


def test_time_step_degenerate():
    with pytest.raises(ValueError, match="floor volatility"):
        time_step(const_model(sigma=0.0), 0.1)


# ---- diffusion probabilities

def test_symmetric_walk():
    pu, pd, p0 = diffusion_probs(const_model(), np.array([0.0]), 1.0, 0.1, 1.0)
    assert (pu[0], pd[0], p0[0]) == pytest.approx((0.5, 0.5, 0.0))


def test_preset_probs_at_zero(ou_preset):
    _, model, _ = ou_preset
    pu, pd, p0 = diffusion_probs(model, np.array([0.0]), 1.0, 0.1, 0.06)
    assert pu[0] == pytest.approx(11 / 12) and pd[0] == pytest.approx(1 / 12) and p0[0] == pytest.approx(0, abs=1e-15)


# ---- splitting

def test_lin_split_examples():
    assert lin_split(0.5, [0.0, 0.5, 1.0]) == [(1, 1.0)]
    assert lin_split(0.25, [0.0, 0.5]) == [(0, 0.5), (1, 0.5)]
    got = lin_split(0.2, [0.0, 0.5, 1.0])
    assert got[0][0] == 0 and got[0][1] == pytest.approx(0.6)
    assert got[1][0] == 1 and got[1][1] == pytest.approx(0.4)


def test_lin_split_clamps():
    assert lin_split(2.0, [0.0, 1.0]) == [(1, 1.0)]
    assert lin_split(-1.0, [0.0, 1.0]) == [(0, 1.0)]


def test_product_split_examples():
    g = [0.0, 0.5, 1.0]
    assert product_split([0.2], [g]) == [((i,), w) for i, w in lin_split(0.2, g)]
    four = product_split([0.25, 0.25], [[0.0, 0.5], [0.0, 0.5]])
    assert [w for _, w in four] == pytest.approx([0.25] * 4)
    got = dict(product_split([0.2, 0.25], [g, g]))
    want = {(0, 0): 0.3, (0, 1): 0.3, (1, 0): 0.2, (1, 1): 0.2}
    assert got.keys() == want.keys()
    for k in want:
        assert got[k] == pytest.approx(want[k])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=3), st.integers(2, 9))
def test_product_split_preserves_mean(target, m):
    grids = [np.sort(np.r_[0.0, np.linspace(0, 1, m)[1:-1] ** 1.3, 1.0])] * len(target)
    idx, w = _product_split_arrays(np.array([target]), grids)
    shape = tuple(g.size for g in grids)
    coords = np.stack([g[i] for g, i in zip(grids, np.unravel_index(idx[0], shape))], axis=1)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1, abs=1e-15)
    np.testing.assert_allclose(w[0] @ coords, target, atol=1e-12)


# ---- marks and jump cells

def test_voronoi_single_site():
    sites, w = voronoi_weights(MarkMeasure.uniform(0.0, 1.0), 1)
    assert w.tolist() == [1.0] and sites[0] == pytest.approx(0.5)


def test_voronoi_uniform_two():
    sites, w = voronoi_weights(MarkMeasure.uniform(0.0, 1.0), 2)
    np.testing.assert_allclose(sites, [0.25, 0.75])
    np.testing.assert_allclose(w, [0.5, 0.5])


def test_voronoi_dirac():
    sites, w = voronoi_weights(MarkMeasure.dirac(0.7), 8)
    assert sites.tolist() == [0.7] and w.tolist() == [1.0]


def test_voronoi_density_mass():
    m = MarkMeasure.from_density([0.0, 1.0], [2.0, 0.0])
    sites, w = voronoi_weights(m, 5)
    assert w.sum() == pytest.approx(1.0) and np.all(np.diff(sites) > 0)


def test_jump_cells_null():
    m = const_model()
    lat = build_lattice(m, 0.5)
    assert jump_cells(m, lat.x_grid, 0.0, lat)[:, 0].tolist() == list(range(5))


def test_jump_cells_preset(ou_preset):
    _, model, _ = ou_preset
    lat = build_lattice(model, 0.5)
    masses = jump_cell_masses(model, 0.0, 0.0, lat)
    assert masses == {0: 1.0} and lat.x_grid[0] == -1.0
    # overshoot from -0.5 lands on the wall
    assert jump_cell_masses(model, -0.5, 0.0, lat) == {0: 1.0}


# ---- assembly

def test_rows_no_jump_reduce_to_diffusion():
    m = const_model()
    lat = build_lattice(m, 0.25, M=3, sigma_grids=[np.array([0.0, 1.0])])
    tm = assemble_transitions(m, None, lat)
    s = lat.locate(0.0, [0.0])
    idx, p = tm.row(0, s)
    assert tm.p_jump[s] == 0
    to = {lat.x_grid[i // lat.n_sigma]: v for i, v in zip(idx, p)}
    want = {-0.25: tm.p_down[0, 4], 0.0: tm.p_stay[0, 4], 0.25: tm.p_up[0, 4]}
    assert to == pytest.approx({k: v for k, v in want.items() if v > 0})
    assert all(i % lat.n_sigma == 0 for i in idx)


def test_inject_row_and_reflect(ou_preset):
    _, model, cost = ou_preset
    lat = build_lattice(model, 0.25, M=5)
    tm = assemble_transitions(model, cost, lat)
    s = lat.locate(0.75, [1.5])
    assert tm.inject_to[s] == lat.locate(1.0, [1.5])
    assert tm.inject_to[lat.locate(1.0, [1.5])] == -1
    frm, to = tm.reflect["-"]
    assert np.all(to == frm - lat.n_sigma)


def test_stochastic_rows_preset(ou_preset):
    _, model, cost = ou_preset
    lat = build_lattice(model, 0.05, M=21, n_marks=8)
    tm = assemble_transitions(model, cost, lat)
    P = tm.diffuse[0]
    assert np.max(np.abs(np.asarray(P.sum(axis=1)).ravel() - 1)) <= 1e-12
    assert P.data.min() >= 0


def test_small_normalizer_rejected():
    m = const_model()
    lat = replace(build_lattice(m, 0.25, M=3), q_eff=build_lattice(m, 0.25, M=3).q_eff / 4)
    with pytest.raises(ValueError, match="normalizer"):
        assemble_transitions(m, None, lat)


def test_conditional_mean_of_rows(ou_preset):
    _, model, cost = ou_preset
    lat = build_lattice(model, 0.05, M=21, n_marks=8)
    tm = assemble_transitions(model, cost, lat)
    m1, _ = row_moments(tm, lat)
    ns = lat.n_sigma
    xs = np.repeat(lat.x_grid, ns)
    interior = (xs > lat.x_grid[1] + 1e-9) & (xs < lat.x_grid[-1] - 1e-9)
    mu = 0.5 - xs
    p1 = tm.p_jump
    # chi = -1 exactly on grid, so the jump part is exact away from the lower wall
    away = interior & (xs >= 0)
    want = mu * lat.dt * (1 - p1) + p1 * (-1.0)
    np.testing.assert_allclose(m1[away], want[away], atol=1e-12)


def test_local_consistency(ou_preset):
    _, model, cost = ou_preset
    for h in (0.1, 0.04, 0.02):
        lat = build_lattice(model, h, M=11)
        a = local_consistency_audit(assemble_transitions(model, cost, lat), model, lat)
        assert a["mean_error"] <= 1e-12
        assert a["variance_error"] <= a["variance_bound"]


def test_degenerate_variance_error():
    # sigma == 0: variance error is exactly h mu dt - (mu dt)^2
    m = const_model(sigma=0.0, mu=0.5)
    lat = build_lattice(m, 0.1, M=3)
    a = local_consistency_audit(assemble_transitions(m, None, lat), m, lat)
    mdt = 0.5 * lat.dt
    assert a["variance_error"] == pytest.approx(0.1 * mdt - mdt ** 2, rel=1e-12)


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_jump_frequency(lam):
    m = const_model(baseline=lam)
    lat = build_lattice(m, 0.05, M=3)
    tm = assemble_transitions(m, None, lat)
    rate = tm.p_jump[0] / lat.dt
    assert abs(rate - lam) / lam <= 2 * lam * lat.dt


def test_lattice_hash_stable(ou_preset):
    _, model, _ = ou_preset
    a = build_lattice(model, 0.1, M=5)
    b = build_lattice(model, 0.1, M=5)
    c = build_lattice(model, 0.1, M=6)
    assert a.hash == b.hash != c.hash


def test_locate_requires_node(ou_preset):
    _, model, _ = ou_preset
    lat = build_lattice(model, 0.1, M=21)
    with pytest.raises(ValueError):
        lat.locate(0.05, [0.0])
    with pytest.raises(ValueError):
        lat.locate(0.1, [0.3])
