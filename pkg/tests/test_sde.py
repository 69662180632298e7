import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from evomeasure.model import ForcingSpec, ModelParams, ParameterError, basis_state, diffusion, drift, zero_state
from evomeasure.sde import (
    IntegratorBlowup,
    WienerPath,
    derive_seed,
    integrate,
    run_ensemble,
    simulate,
    simulate_coupled,
    step_tamed_em,
)
from evomeasure.stats import bootstrap_mean_ci


def test_step_fixed_point():
    p = ModelParams(epsilon=0.5)
    for dW in (-3.0, 0.0, 0.7):
        assert np.array_equal(step_tamed_em(zero_state(p), 0.0, 0.01, dW, p), zero_state(p))


def test_step_hand_example():
    # f(e0) = (1, -4, 1) on the centre triple, |f| = sqrt(18)
    p = ModelParams(epsilon=0.0, trunc_radius=5)
    out = step_tamed_em(basis_state(p, 0), 0.0, 0.1, 0.4, p)
    tame = 1.0 + 0.1 * math.sqrt(18.0)
    assert out[5] == pytest.approx(1.0 - 0.4 / tame, abs=1e-12)
    assert out[4] == out[6] == pytest.approx(0.1 / tame, abs=1e-12)
    # rounded hand values
    assert out[5] == pytest.approx(0.719155, abs=1e-5)
    assert out[4] == pytest.approx(0.0702112, abs=1e-5)
    assert np.count_nonzero(out) == 3


@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_step_matches_euler_to_second_order(dt, rng):
    p = ModelParams(epsilon=0.0, trunc_radius=5)
    u = rng.normal(size=p.size)
    f = drift(u, 0.0, p)
    gap = np.linalg.norm(step_tamed_em(u, 0.0, dt, 0.0, p) - (u + dt * f))
    # |dt f - dt f/(1 + dt|f|)| = dt^2 |f|^2 / (1 + dt|f|)
    nf = np.linalg.norm(f)
    assert gap == pytest.approx(dt * dt * nf * nf / (1 + dt * nf), rel=1e-9)
    assert gap <= dt * dt * nf * nf


def test_step_rejects_bad_dt(params):
    with pytest.raises(ParameterError):
        step_tamed_em(zero_state(params), 0.0, 0.0, 0.0, params)


def test_kernel_matches_reference_step(small_params):
    p = small_params
    u0 = basis_state(p, 1, 1.5) - basis_state(p, -2, 0.5)
    traj = simulate(u0, -1.0, 0.0, 0.01, p, seed=5, stream_id=3)
    dW = np.diff(WienerPath.generate(5, 3, -1.0, 0.01, 100).values())
    u = u0.copy()
    for k in range(100):
        u = step_tamed_em(u, -1.0 + k * 0.01, 0.01, dW[k], p)
        assert np.allclose(traj.states[k + 1], u, rtol=1e-12, atol=1e-14)


def test_wiener_path_reproducible_and_scaled():
    a = WienerPath.generate(11, 4, 0.0, 0.01, 100_000)
    b = WienerPath.generate(11, 4, 0.0, 0.01, 100_000)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, WienerPath.generate(11, 5, 0.0, 0.01, 100_000).increments)
    assert np.var(a.increments) == pytest.approx(0.01, rel=0.05)
    assert a.values()[0] == 0.0 and len(a.values()) == 100_001


def test_wiener_path_prefix_stable():
    long = WienerPath.generate(3, 0, 0.0, 0.1, 500)
    short = WienerPath.generate(3, 0, 0.0, 0.1, 200)
    assert np.array_equal(long.increments[:200], short.increments)


def test_derive_seed():
    assert derive_seed(1, "kb") == derive_seed(1, "kb")
    assert derive_seed(1, "kb") != derive_seed(1, "push")
    assert derive_seed(1, "kb") != derive_seed(2, "kb")
    assert 0 <= derive_seed(7, "a", 3) < 2**64


def test_simulate_zero_solution():
    p = ModelParams(epsilon=0.0)
    traj = simulate(zero_state(p), -2.0, 1.0, 0.01, p, seed=1)
    assert not traj.states.any()
    assert len(traj.times) == 301
    assert np.allclose(np.diff(traj.times), 0.01)


def test_simulate_determinism(params):
    u0 = basis_state(params, 0)
    a = simulate(u0, 0.0, 1.0, 1e-3, params, seed=9, stream_id=2)
    b = simulate(u0, 0.0, 1.0, 1e-3, params, seed=9, stream_id=2)
    assert np.array_equal(a.states, b.states)
    c = simulate(u0, 0.0, 1.0, 1e-3, params, seed=9, stream_id=3)
    assert not np.array_equal(a.final, c.final)


def test_simulate_snaps_negative_grid():
    p = ModelParams(epsilon=0.0, trunc_radius=3)
    traj = simulate(basis_state(p, 0), -1.05, 0.0, 0.1, p, seed=0)
    # 10.5 steps rounds to the nearest grid point
    assert len(traj.times) in (11, 12)
    assert traj.times[0] == -1.05


def test_simulate_against_reference_ode():
    p = ModelParams(nu=1e-9, p=4.0, epsilon=0.0, trunc_radius=4)
    u0 = basis_state(p, 0)
    traj = simulate(u0, 0.0, 3.0, 1e-4, p, seed=0)
    ref = solve_ivp(lambda t, y: drift(y, t, p), (0.0, 3.0), u0, method="DOP853",
                    t_eval=traj.times[::1000], rtol=1e-12, atol=1e-14)
    err = np.linalg.norm(traj.states[::1000] - ref.y.T, axis=1)
    assert err.max() < 1e-4
    norms = np.linalg.norm(traj.states, axis=1)
    assert np.all(norms <= np.exp(-p.lam * traj.times) * 1.0 + 1e-4)


def test_coupled_same_epsilon_identical(params):
    u0 = basis_state(params, 0)
    a, b = simulate_coupled(u0, 0.0, 1.0, 1e-2, params, params.with_epsilon(0.5), seed=4)
    assert np.array_equal(a.states, b.states)
    z = params.with_epsilon(0.0)
    a, b = simulate_coupled(u0, 0.0, 1.0, 1e-2, z, z, seed=4)
    assert np.max(np.abs(a.states - b.states)) == 0.0


def test_coupled_rejects_other_differences(params):
    with pytest.raises(ParameterError):
        simulate_coupled(zero_state(params), 0.0, 1.0, 1e-2, params, params.with_forcing(ForcingSpec()), seed=0)


def test_coupled_distance_shrinks_with_offset(params):
    u0 = basis_state(params, 0)
    base = params.with_epsilon(0.25)
    gaps = []
    for off in (0.1, 0.05, 0.025):
        sup = []
        for sid in range(40):
            a, b = simulate_coupled(u0, 0.0, 1.0, 1e-2, base, base.with_epsilon(0.25 + off), seed=8, stream_id=sid)
            sup.append(np.max(np.linalg.norm(a.states - b.states, axis=1)))
        gaps.append(np.mean(sup))
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_ensemble_single_member_equals_simulate(params):
    u0 = basis_state(params, 0)
    final = run_ensemble(u0, 0.0, 1.0, 1e-3, params, 1, master_seed=21)
    traj = simulate(u0, 0.0, 1.0, 1e-3, params, seed=21, stream_id=0)
    assert np.array_equal(final[0], traj.final)


def test_ensemble_deterministic_noise_free():
    p = ModelParams(epsilon=0.0, g=ForcingSpec("gaussian_decay", {"a": 1.0, "b": 0.1, "r": 2}))
    final = run_ensemble(basis_state(p, 0), 0.0, 1.0, 1e-3, p, 50, master_seed=3)
    assert np.all(final == final[0])


def test_ensemble_sampler_forms(small_params):
    p = small_params
    u0 = np.stack([basis_state(p, 0, float(j)) for j in range(5)])
    a = run_ensemble(u0, 0.0, 0.5, 1e-2, p, 5, master_seed=1)
    b = run_ensemble(lambda j: basis_state(p, 0, float(j)), 0.0, 0.5, 1e-2, p, 5, master_seed=1)
    assert np.array_equal(a, b)
    res = run_ensemble(u0, 0.0, 0.5, 1e-2, p, 5, master_seed=1, trajectories=True)
    assert res.snaps.shape == (5, 51, p.size)
    assert np.array_equal(res.snaps[:, -1], a)
    with pytest.raises(ParameterError):
        run_ensemble(u0, 0.0, 0.5, 1e-2, p, 0, master_seed=1)


def test_thread_count_does_not_change_results(params):
    u0 = basis_state(params, 0)
    a = run_ensemble(u0, 0.0, 0.5, 1e-3, params, 600, master_seed=2, threads=1)
    b = run_ensemble(u0, 0.0, 0.5, 1e-3, params, 600, master_seed=2, threads=4)
    assert np.array_equal(a, b)


def test_rows_independent_of_batch_layout(params):
    u0 = basis_state(params, 0)
    big = run_ensemble(u0, 0.0, 0.5, 1e-3, params, 300, master_seed=2)
    sub = integrate(np.tile(u0, (3, 1)), 0.0, 0.5, 1e-3, params, 2, stream_ids=[0, 299, 150]).final
    assert np.array_equal(sub, big[[0, 299, 150]])


def test_bootstrap_ci_shrinks_like_root_m(params):
    u0 = basis_state(params, 0)
    widths = []
    for M in (100, 400, 1600):
        final = run_ensemble(u0, 0.0, 1.0, 1e-2, params, M, master_seed=17)
        _, lo, hi = bootstrap_mean_ci(np.sum(final**2, axis=1), seed=1)
        widths.append(hi - lo)
    for w0, w1 in zip(widths, widths[1:]):
        assert 1.5 < w0 / w1 < 2.7


def test_blowup_is_reported():
    p = ModelParams(epsilon=0.0, trunc_radius=3)
    with pytest.raises(IntegratorBlowup) as info:
        simulate(basis_state(p, 0, 1e200), 0.0, 1.0, 1e-2, p, seed=0)
    assert info.value.failures[0][0] == 0
    with pytest.raises(IntegratorBlowup):
        step_tamed_em(basis_state(p, 0, 1e200), 0.0, 1e-2, 0.0, p)


def test_strong_order_half_step_ratio():
    """Mean-square gap between dt and dt/2 runs shrinks by about sqrt(2) per halving."""
    p = ModelParams(epsilon=0.5, trunc_radius=3, g=ForcingSpec("gaussian_decay", {"a": 1.0, "b": 0.05, "r": 1}))
    M, T, n_fine = 400, 1.0, 512
    dW_fine = np.random.default_rng(7).standard_normal((M, n_fine)) * math.sqrt(T / n_fine)

    def run(n):
        dt = T / n
        dW = dW_fine.reshape(M, n, n_fine // n).sum(axis=2)
        u = np.tile(basis_state(p, 0, 2.0), (M, 1))
        for k in range(n):
            f = drift(u, k * dt, p)
            tame = 1.0 + dt * np.linalg.norm(f, axis=1)[:, None]
            u = u + dt * f / tame + diffusion(u, k * dt, p) * dW[:, k : k + 1]
        return u

    finals = {n: run(n) for n in (64, 128, 256, 512)}
    gaps = [math.sqrt(np.mean(np.sum((finals[n] - finals[2 * n]) ** 2, axis=1))) for n in (64, 128, 256)]
    ratio = math.sqrt(gaps[0] / gaps[2])
    assert 1.25 < ratio < 1.75
