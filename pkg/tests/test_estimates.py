import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evomeasure.estimates import (
    CompactSetSpec,
    calibrate_compact_set,
    default_epsilon_grid,
    distance_to_level,
    moment_bound_check,
    outside_compact,
    past_weighted_quad,
    tail_average_check,
    tightness_mass,
    time_average_bound_check,
)
from evomeasure.measures import EmpiricalMeasure, kb_measure
from evomeasure.model import ForcingSpec, ModelParams, ParameterError, basis_state, zero_state


def projected_gradient_distance(u, n, R, iters=400):
    """Brute-force distance to {v : v_i = 0 for |i| > n, |v| <= R}."""
    I = (len(u) - 1) // 2
    keep = np.abs(np.arange(-I, I + 1)) <= n

    def project(v):
        v = np.where(keep, v, 0.0)
        norm = np.linalg.norm(v)
        return v if norm <= R else v * (R / norm)

    v = project(np.zeros_like(u))
    for _ in range(iters):
        v = project(v - 0.5 * (v - u))
    return np.linalg.norm(u - v)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.floats(0.0, 5.0))
def test_distance_matches_projected_gradient(seed, n, R):
    u = np.random.default_rng(seed).normal(scale=2.0, size=9)
    assert float(distance_to_level(u, n, R)) == pytest.approx(projected_gradient_distance(u, n, R), rel=1e-9, abs=1e-12)


def test_tightness_examples():
    spec = CompactSetSpec(0.05, 1.0, [0, 1, 2])
    zero = EmpiricalMeasure.point_mass(np.zeros(9))
    assert tightness_mass(zero, spec) == 0.0
    far = np.zeros(9)
    far[4] = spec.radius(1) + 2.0
    assert tightness_mass(EmpiricalMeasure.point_mass(far), spec) == 1.0
    # a state just inside the first ball, supported on n_1 = 0
    near = np.zeros(9)
    near[4] = spec.radius(1) + 0.4
    assert not outside_compact(near, spec)[0]
    mixed = EmpiricalMeasure(np.stack([np.zeros(9), far]), [0.75, 0.25])
    assert tightness_mass(mixed, spec) == 0.25


def test_radius_scaling():
    a = CompactSetSpec(0.2, 3.0, [1, 2, 3])
    b = CompactSetSpec(0.05, 3.0, [1, 2, 3])
    for l in (1, 2, 3):
        assert b.radius(l) == pytest.approx(2 * a.radius(l))
        assert a.radius(l) == pytest.approx(2**l * math.sqrt(3.0 / 0.2))
    with pytest.raises(ParameterError):
        CompactSetSpec(0.1, 1.0, [2, 1])


def test_moment_bound_trivial_cases():
    p = ModelParams(epsilon=0.3)
    rep = moment_bound_check(p, zero_state(p), 0.0, [1.0, 5.0], 1e-2, 50, seed=0)
    assert rep.passed
    assert all(r.lhs == 0.0 and r.rhs == 0.0 for r in rep.rows)


def test_moment_bound_deterministic_decay():
    p = ModelParams(epsilon=0.0)
    rep = moment_bound_check(p, basis_state(p, 0), 0.0, [1.0, 3.0], 1e-3, 50, seed=0, slack=0.0)
    assert rep.meta["M"] == 1
    for t in (1.0, 3.0):
        row = rep.row(f"second_moment@t={t:g}")
        assert row.rhs == pytest.approx(math.exp(-t))
        assert row.lhs == row.lhs_ci_hi
        assert row.lhs <= row.rhs
        assert rep.row(f"energy@t={t:g}").passed


def test_moment_bound_rhs_cross_checked(params):
    rep = moment_bound_check(params, zero_state(params), -3.0, [-2.0, 0.0], 1e-2, 200, seed=1)
    for entry in rep.meta["rhs_check"].values():
        assert entry["forcing_closed_form"] == pytest.approx(entry["forcing_quadrature"], rel=1e-8)
    assert rep.constants["c"] == pytest.approx(0.5)


def test_epsilon_outside_range_rejected(params):
    with pytest.raises(ParameterError):
        ModelParams(epsilon=0.5, delta=1.5)
    with pytest.raises(ParameterError):
        time_average_bound_check(params, zero_state(params), 0.0, [2.0], 1e-2, 5, seed=0, eps_grid=[0.0, 0.6])


@pytest.mark.parametrize("family", ["gaussian_decay", "exp_past_decay"])
@pytest.mark.parametrize("t", [-4.0, 0.0, 3.0])
def test_past_weighted_quad_agrees(family, t):
    g = ForcingSpec(family, {"a": 1.0, "b": 0.05, "r": 3} if family == "gaussian_decay" else {"a": 0.6, "c": -0.2, "r": 2})
    p = ModelParams(epsilon=0.5, g=g)
    for n in (0, 2, 3):
        assert past_weighted_quad(p, t, n) == pytest.approx(g.past_weighted_integral(t, 1.0, 20, n), rel=1e-8)


def test_time_average_trivial():
    p = ModelParams(epsilon=0.5)
    rep = time_average_bound_check(p, zero_state(p), 0.0, [2.0, 4.0], 1e-2, 10, seed=0)
    assert rep.passed
    assert all(r.lhs == 0.0 and r.rhs == 0.0 for r in rep.rows)
    with pytest.raises(ParameterError):
        time_average_bound_check(p, zero_state(p), -3.0, [2.0], 1e-2, 10, seed=0)


def test_time_average_decays_in_k():
    p = ModelParams(epsilon=0.0, trunc_radius=5)
    rep = time_average_bound_check(p, basis_state(p, 0, 2.0), 0.0, [5.0, 10.0, 20.0], 1e-2, 10, seed=0, eps_grid=[0.0])
    lhs = [rep.row(f"avg@eps=0,k={k:g}").lhs for k in (5, 10, 20)]
    assert lhs[0] > lhs[1] > lhs[2]
    # transient part scales like 1/(k + t)
    assert lhs[0] / lhs[2] == pytest.approx(4.0, rel=0.05)
    assert rep.passed


def test_time_average_epsilon_grid(params):
    rep = time_average_bound_check(params, zero_state(params), 0.0, [4.0], 1e-2, 30, seed=2)
    assert rep.meta["eps_grid"] == default_epsilon_grid(params) == [0.0, 0.25, 0.5]
    assert rep.passed
    assert rep.meta["forcing_closed_form"] == pytest.approx(rep.meta["forcing_quadrature"], rel=1e-8)


def test_tail_beyond_truncation_is_zero(small_params):
    rep = tail_average_check(small_params, [zero_state(small_params)], 0.0, [2, 7], 3.0, 1e-2, 10, seed=0,
                             eps_grid=[0.5])
    row = rep.row("tail@eps=0.5,u0=0,k=3,n=7")
    assert row.lhs == 0.0 and row.passed


def test_tail_decays_in_n_deterministic():
    p = ModelParams(epsilon=0.0, trunc_radius=8)
    rep = tail_average_check(p, [basis_state(p, 0)], 0.0, [1, 2, 3, 4], 20.0, 1e-2, 10, seed=0, eps_grid=[0.0])
    lhs = [r.lhs for r in rep.rows]
    assert all(b < a for a, b in zip(lhs, lhs[1:]))
    assert rep.passed


def test_tail_decays_beyond_forcing_support(small_params):
    rep = tail_average_check(small_params, [zero_state(small_params)], 0.0, [2, 3, 4, 5], 6.0, 1e-2, 40, seed=1,
                             eps_grid=[0.5])
    lhs = [r.lhs for r in rep.rows]
    assert all(b < a for a, b in zip(lhs, lhs[1:]))
    assert rep.passed
    with pytest.raises(ParameterError):
        tail_average_check(small_params, [zero_state(small_params)], 0.0, [3, 2], 6.0, 1e-2, 4, seed=1)


def test_calibrate_trivial_levels():
    p = ModelParams(epsilon=0.0)
    spec = calibrate_compact_set(p, 0.05, 6, 2, 1e-2, 5, seed=0, eps_grid=[0.0], max_level=4)
    assert spec.C == 0.0
    assert spec.n_levels == [0, 0, 0, 0]
    assert all(R == 0.0 for _, _, R in spec.levels)
    assert tightness_mass(kb_measure(p, 6, 2, 5, 1e-2, seed=1), spec) == 0.0
    with pytest.raises(ParameterError):
        calibrate_compact_set(p, 1.5, 6, 2, 1e-2, 5, seed=0)


def test_calibrate_reports_unreachable_budget(small_params):
    with pytest.raises(ParameterError, match="smallest achievable delta"):
        calibrate_compact_set(small_params, 0.05, 4, 2, 1e-2, 10, seed=0, eps_grid=[0.5], max_level=3, n_max=1)
