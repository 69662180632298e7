import math

import numpy as np
import pytest

from evomeasure.lab import (
    chapman_kolmogorov_check,
    choose_pairs,
    cip_probability,
    cip_trend,
    default_k_grid,
    evolution_defect,
    feller_probe,
    limit_stability_experiment,
)
from evomeasure.measures import default_panel, evolution_family
from evomeasure.model import ModelParams, ParameterError, basis_state, zero_state

DT = 1e-2


@pytest.fixture
def p_quarter(small_params):
    return small_params.with_epsilon(0.25)


def test_k_grid_shape(params):
    grid = default_k_grid(params, 16, seed=0)
    assert len(grid) == 16
    assert not grid[0].any()
    assert all(np.linalg.norm(x) <= 2.0 + 1e-12 for x in grid)
    assert all(np.array_equal(a, b) for a, b in zip(grid, default_k_grid(params, 16, seed=0)))


def test_cip_zero_at_same_epsilon(p_quarter):
    grid = default_k_grid(p_quarter, 6, seed=1)
    for seed in (0, 1):
        est = cip_probability(p_quarter, 0.25, 0.0, 1.0, 0.1, grid, 50, DT, seed)
        assert est.estimate == 0.0 and not est.per_point.any()
        est = cip_probability(p_quarter, 0.25, 0.0, 1.0, 0.1, grid, 50, DT, seed, uniform_in_t=True)
        assert est.estimate == 0.0


def test_cip_huge_threshold(p_quarter):
    grid = default_k_grid(p_quarter, 4, seed=1)
    assert cip_probability(p_quarter, 0.5, 0.0, 1.0, 1e9, grid, 50, DT, seed=3).estimate == 0.0


def test_cip_swap_symmetry(p_quarter):
    grid = default_k_grid(p_quarter, 4, seed=1)
    a = cip_probability(p_quarter, 0.35, 0.0, 1.0, 0.05, grid, 100, DT, seed=4)
    b = cip_probability(p_quarter.with_epsilon(0.35), 0.25, 0.0, 1.0, 0.05, grid, 100, DT, seed=4)
    assert np.array_equal(a.per_point, b.per_point)
    assert 0.0 <= a.ci_lo <= a.estimate <= a.ci_hi <= 1.0


def test_cip_uniform_in_t_dominates(p_quarter):
    grid = default_k_grid(p_quarter, 4, seed=1)
    end = cip_probability(p_quarter, 0.35, 0.0, 1.0, 0.05, grid, 100, DT, seed=4)
    sup = cip_probability(p_quarter, 0.35, 0.0, 1.0, 0.05, grid, 100, DT, seed=4, uniform_in_t=True)
    assert np.all(sup.per_point >= end.per_point)


def test_cip_trend_small(p_quarter):
    grid = default_k_grid(p_quarter, 6, seed=2)
    rep = cip_trend(p_quarter, [0.1, 0.05, 0.025], 0.0, 1.0, 0.1, grid, 200, DT, seed=5)
    assert rep.meta["offsets"] == [0.1, 0.05, 0.025, 0.0]
    assert rep.get("exact_zero_at_offset_0").passed
    assert rep.passed
    with pytest.raises(ParameterError):
        cip_probability(p_quarter, 0.25, 0.0, 1.0, 0.1, [], 10, DT, seed=0)


def test_feller_identical_points_exact_zero(p_quarter):
    x = basis_state(p_quarter, 0)
    rep = feller_probe(p_quarter, 0.0, 1.0, [(x, x.copy())], 50, DT, seed=1)
    assert rep.criteria[0].value == 0.0
    assert all(g == 0.0 for g in rep.meta["gaps"][0])


def test_feller_noise_free_lipschitz_bound():
    p = ModelParams(epsilon=0.0, trunc_radius=6)
    x = basis_state(p, 0)
    pairs = [(x, x + basis_state(p, 1, h)) for h in (0.2, 0.1, 0.05, 0.025)]
    rep = feller_probe(p, 0.0, 1.0, pairs, 10, DT, seed=0)
    lip = max(phi.lipschitz for phi in default_panel(6))
    for crit, (a, b) in zip(rep.criteria, pairs):
        # the flow contracts at rate lam
        assert crit.value <= lip * np.linalg.norm(a - b) * math.exp(-p.lam * 1.0) * (1 + 1e-3)
    assert rep.passed


def test_feller_halving_trend(p_quarter):
    x = basis_state(p_quarter, 0)
    pairs = [(x, x + basis_state(p_quarter, 0, h)) for h in (0.4, 0.2, 0.1, 0.05)]
    rep = feller_probe(p_quarter, 0.0, 1.0, pairs, 200, DT, seed=2)
    assert rep.get("defect_nonincreasing_as_|x-x'|_shrinks").passed


def test_defect_trivial_cases(small_params):
    fam = evolution_family(small_params, 2, 4, [-2.0, 0.0], DT, 4, seed=0)
    rep = evolution_defect(fam, 1, 1, DT, seed=0, n_perm=99)
    assert rep.criteria[0].value == 0.0 and rep.criteria[0].passed
    z = ModelParams(epsilon=0.0, trunc_radius=6)
    fam = evolution_family(z, 2, 4, [-2.0, 0.0, 1.0], DT, 4, seed=0)
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        rep = evolution_defect(fam, i, j, DT, seed=i, n_perm=99)
        assert rep.criteria[0].value == 0.0 and rep.passed
    with pytest.raises(ParameterError):
        evolution_defect(fam, 2, 1, DT, seed=0)


def test_defect_small_family(small_params):
    fam = evolution_family(small_params, 2, 8, [-2.0, -1.0, 0.5], DT, 10, seed=3)
    for i, j in [(0, 2), (1, 2)]:
        assert evolution_defect(fam, i, j, DT, seed=7 + i, n_perm=199).passed


def test_ck_trivial_cases(small_params):
    z = small_params.with_epsilon(0.0)
    rep = chapman_kolmogorov_check(z, 0.0, 0.4, 1.0, basis_state(z, 0), 100, DT, seed=0, n_perm=99)
    assert rep.get("exact_flow_composition").passed
    assert rep.get("exact_flow_composition").value == 0.0
    for r in (0.0, 1.0):
        rep = chapman_kolmogorov_check(small_params, 0.0, r, 1.0, basis_state(small_params, 0), 300, DT, seed=1,
                                       n_perm=199)
        assert rep.passed
    with pytest.raises(ParameterError):
        chapman_kolmogorov_check(small_params, 0.0, 2.0, 1.0, zero_state(small_params), 10, DT, seed=0)


def test_choose_pairs():
    pairs = choose_pairs(3, 3, seed=0)
    assert pairs == [(0, 1), (0, 2), (1, 2)]
    pairs = choose_pairs(5, 3, seed=1)
    assert len(set(pairs)) == 3 and all(i < j for i, j in pairs)
    assert choose_pairs(1, 3, seed=0) == []


def test_limit_stability_constant_sequence(small_params):
    rep = limit_stability_experiment(small_params, [0.5, 0.5, 0.5], 2, 4, [-2.0, 0.0], DT, 4, seed=2,
                                     n_defect_pairs=1, n_perm=99)
    assert all(v["energy"] == 0.0 and v["w1_sq_norm"] == 0.0 for v in rep.distances.values())
    # equal distances are not strictly decreasing
    assert not rep.get("energy_decreasing@t=-2").passed


def test_limit_stability_defects_independent_of_sequence(small_params):
    kw = dict(m=2, k=4, times=[-2.0, 0.0, 1.0], dt=DT, M=4, seed=9, n_defect_pairs=2, n_perm=99)
    a = limit_stability_experiment(small_params, [0.25, 0.375], **kw)
    b = limit_stability_experiment(small_params, [0.1, 0.3, 0.45], **kw)
    assert a.defects == b.defects
    assert set(a.distances) == {f"{e:g}@{t:g}" for e in (0.25, 0.375) for t in (-2, 0, 1)}
    assert all(v["energy"] >= 0 for v in a.distances.values())


def test_limit_stability_noise_free_collapse():
    z = ModelParams(epsilon=0.0, trunc_radius=6)
    rep = limit_stability_experiment(z, [0.0, 0.0], 2, 4, [-2.0, 0.0], DT, 4, seed=0, n_defect_pairs=1, n_perm=99)
    assert all(v["energy"] == 0.0 for v in rep.distances.values())
    assert rep.get("defect[-2->0]:energy").passed


def test_limit_stability_rejects_out_of_range(small_params):
    with pytest.raises(ParameterError):
        limit_stability_experiment(small_params, [0.6], 2, 4, [-2.0], DT, 4, seed=0)
