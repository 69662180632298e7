"""Monte Carlo checks of the second-moment, time-average and tail estimates,
and the compact-set construction behind tightness of time-averaged laws.

Every bound carries an explicit constant obtained from Ito's formula with the
growth bound ``|sigma_i(t, s)| <= delta |s| + g_i(t)``: for
``epsilon <= sqrt(lambda) / (2 delta)``

    d/dt E|u|^2 <= -(3/2) lambda E|u|^2 + 2 epsilon^2 |g(t)|^2,

so the integrated forms use ``c = 2 epsilon^2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import quad

from .measures import EmpiricalMeasure, kb_measure
from .model import ModelParams, ParameterError, as_state, sq_norm, tail_sq_norm, truncation_split
from .sde import derive_seed, integrate
from .stats import bootstrap_mean_ci

__all__ = [
    "BoundRow",
    "BoundReport",
    "CompactSetSpec",
    "default_epsilon_grid",
    "moment_bound_check",
    "time_average_bound_check",
    "tail_average_check",
    "distance_to_level",
    "tightness_mass",
    "calibrate_compact_set",
    "past_weighted_quad",
]

DEFAULT_SLACK = 0.1


@dataclass
class BoundRow:
    quantity: str
    lhs: float
    lhs_ci_lo: float
    lhs_ci_hi: float
    rhs: float
    passed: bool

    def as_tuple(self):
        return (self.quantity, self.lhs, self.lhs_ci_lo, self.lhs_ci_hi, self.rhs, self.passed)


@dataclass
class BoundReport:
    rows: list[BoundRow]
    params: dict
    constants: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def row(self, quantity: str) -> BoundRow:
        for r in self.rows:
            if r.quantity == quantity:
                return r
        raise KeyError(quantity)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "params": self.params,
            "constants": self.constants,
            "meta": self.meta,
            "rows": [dict(zip(("quantity", "lhs", "lhs_ci_lo", "lhs_ci_hi", "rhs", "pass"), r.as_tuple())) for r in self.rows],
        }


def _passes(hi: float, rhs: float, slack: float) -> bool:
    return bool(hi <= rhs * (1.0 + slack))


def default_epsilon_grid(params: ModelParams) -> list[float]:
    top = params.epsilon_max
    return [0.0, 0.5 * top, top]


def _check_range(params: ModelParams, eps: float):
    if not 0 <= eps <= params.epsilon_max * (1 + 1e-12):
        raise ParameterError(f"epsilon={eps} outside [0, {params.epsilon_max}]")


def past_weighted_quad(params: ModelParams, t: float, n: int = 0) -> float:
    """``int_{-inf}^t e^{lam (r-t)} sum_{|i|>=n} g_i(r)^2 dr`` by adaptive quadrature."""
    g, lam, I = params.g, params.lam, params.trunc_radius
    if g.family == "exp_past_decay":
        # merge the exponents so e^{2cr} cannot overflow when c < 0
        c, w = g.params["c"], g.site_count(I, n) * g.amplitude**2
        f = lambda r: w * math.exp(lam * (r - t) + 2.0 * c * r)  # noqa: E731
        lo = t - 60.0 / (lam + 2.0 * c)
    else:
        f = lambda r: math.exp(lam * (r - t)) * float(g.sq_norm(r, I, n))  # noqa: E731
        # finite window first: the integrand is negligible beyond ~60/lam in the past
        lo = t - 60.0 / lam
    if g.family == "gaussian_decay":
        lo = min(lo, -abs(t) - 10.0 / math.sqrt(g.params["b"]))
    val, _ = quad(f, lo, t, epsabs=0.0, epsrel=1e-12, limit=400,
                  points=[0.0] if lo < 0.0 < t else None)
    tail, _ = quad(f, -np.inf, lo, epsabs=0.0, epsrel=1e-12, limit=200)
    return val + tail


def _row_integrals(rec_times, sq_hist, starts, sq0, final_sq, t, lam):
    """Per-row trapezoid of ``e^{lam (r - t)} |u(r)|^2`` over ``[start_j, t]``."""
    out = np.empty(len(starts))
    for s in np.unique(starts):
        rows = np.flatnonzero(starts == s)
        inside = (rec_times > s + 1e-12) & (rec_times < t - 1e-12)
        x = np.concatenate([[s], rec_times[inside], [t]])
        y = np.column_stack([sq0[rows], sq_hist[rows][:, inside], final_sq[rows]])
        y = y * np.exp(lam * (x - t))[None, :]
        out[rows] = np.sum(0.5 * (y[:, 1:] + y[:, :-1]) * np.diff(x)[None, :], axis=1)
    return out


def _record_every(dt: float, record_dt: float) -> int:
    return max(1, int(round(record_dt / dt)))


def moment_bound_check(
    params: ModelParams,
    u0,
    tau: float,
    t: float | Sequence[float],
    dt: float,
    M: int,
    seed: int,
    slack: float = DEFAULT_SLACK,
    record_dt: float = 0.01,
    threads: int = 1,
) -> BoundReport:
    """Check the integrated second-moment inequality at each time in ``t``.

    Rows ``energy@t`` compare ``E|u(t)|^2 + (lam/2) int_tau^t e^{lam(r-t)} E|u(r)|^2 dr``
    with ``e^{lam(tau-t)} E|u0|^2 + 2 eps^2 int_{-inf}^t e^{lam(s-t)} |g(s)|^2 ds``;
    rows ``second_moment@t`` compare ``E|u(t)|^2`` with the same right side.
    """
    _check_range(params, params.epsilon)
    u0 = as_state(u0, params)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(times < tau):
        raise ParameterError("evaluation times must be >= tau")
    rows_n = 1 if params.epsilon == 0 and u0.ndim == 1 else M
    x0 = np.broadcast_to(u0, (rows_n, params.size)) if u0.ndim == 1 else u0
    sq0_mean = float(np.mean(sq_norm(x0)))
    c = 2.0 * params.epsilon**2
    rows = []
    extra = {}
    ev = _record_every(dt, record_dt)
    res = integrate(x0, tau, times.max(), dt, params, seed, np.arange(rows_n), record_every=ev,
                    snap_times=np.unique(times) if times.max() > tau else None, threads=threads)
    for tt in times:
        if tt > tau:
            s = int(np.argmin(np.abs(res.snap_times - tt)))
            uf = res.snaps[:, s, :]
            t_grid = float(res.snap_times[s])
        else:
            uf, t_grid = x0, tau
        final_sq = sq_norm(uf)
        integ = _row_integrals(res.record_times, res.sq_hist, np.full(rows_n, tau), sq_norm(x0), final_sq, t_grid, params.lam)
        energy = final_sq + 0.5 * params.lam * integ
        forcing = params.g.past_weighted_integral(t_grid, params.lam, params.trunc_radius)
        rhs = math.exp(params.lam * (tau - t_grid)) * sq0_mean + c * forcing
        extra[f"{t_grid:g}"] = {"forcing_closed_form": forcing, "forcing_quadrature": past_weighted_quad(params, t_grid)}
        for name, vals in (("energy", energy), ("second_moment", final_sq)):
            est, lo, hi = bootstrap_mean_ci(vals, seed=derive_seed(seed, name, tt))
            rows.append(BoundRow(f"{name}@t={t_grid:g}", float(est), float(lo), float(hi), rhs, _passes(float(hi), rhs, slack)))
    return BoundReport(
        rows,
        params.to_dict(),
        {"c": c, "slack": slack},
        {"tau": tau, "M": rows_n, "dt": dt, "seed": int(seed), "rhs_check": extra},
    )


def _mean_ci(x, deterministic: bool, seed: int):
    # with epsilon = 0 the node average is an exact quadrature, not a sample mean
    if deterministic:
        est = np.mean(x, axis=0)
        return est, est, est
    return bootstrap_mean_ci(x, seed=seed)


def _average_nodes(lower: float, t: float, tau_step: float, dt: float) -> np.ndarray:
    n = max(1, int(round((t - lower) / tau_step)))
    h = (t - lower) / n
    nodes = lower + h * (np.arange(n) + 0.5)
    return np.rint(nodes / dt) * dt


def _time_average_run(params, u0, t, k_values, dt, M, seed, tau_step, record_every, threads):
    """One ensemble covering every tau-node needed for the windows ``[-k, t]``."""
    node_sets = {k: _average_nodes(-k, t, tau_step, dt) for k in k_values}
    nodes = np.unique(np.concatenate(list(node_sets.values())))
    per = 1 if params.epsilon == 0 else M
    starts = np.repeat(nodes, per)
    x0 = np.broadcast_to(u0, (starts.size, params.size))
    res = integrate(x0, starts, t, dt, params, seed, np.arange(starts.size), record_every=record_every, threads=threads)
    return node_sets, starts, res


def time_average_bound_check(
    params: ModelParams,
    u0,
    t: float,
    k_list: Sequence[float],
    dt: float,
    M: int,
    seed: int,
    eps_grid: Sequence[float] | None = None,
    tau_step: float = 0.25,
    slack: float = DEFAULT_SLACK,
    record_dt: float = 0.025,
    threads: int = 1,
) -> BoundReport:
    """Time-averaged moment bound over ``tau in [-k, t]`` for each ``k`` and ``epsilon``.

    The left side is ``(1/(k+t)) int [E|u(t,tau,u0)|^2 + int_tau^t e^{lam(r-t)} E|u(r,tau,u0)|^2 dr] dtau``
    (midpoint rule in ``tau``, ``M`` samples per node).  Integrating the
    second-moment inequality in ``tau`` gives the right side
    ``K (|u0|^2 (1 - e^{-lam(k+t)}) / (lam (k+t)) + 2 eps^2 G(t))`` with
    ``K = max(1, 2/lam)`` and ``G`` the past-weighted forcing integral.
    Rows ``sup@k`` take the maximum over the epsilon grid against the bound
    at the largest epsilon.
    """
    u0 = as_state(u0, params)
    if u0.ndim != 1:
        raise ParameterError("u0 must be a single state")
    k_list = [float(k) for k in k_list]
    if any(k + t <= 0 for k in k_list):
        raise ParameterError("every k must satisfy k + t > 0")
    eps_grid = default_epsilon_grid(params) if eps_grid is None else list(eps_grid)
    for e in eps_grid:
        _check_range(params, e)
    K = max(1.0, 2.0 / params.lam)
    G = params.g.past_weighted_integral(t, params.lam, params.trunc_radius)
    u0_sq = float(sq_norm(u0))
    ev = _record_every(dt, record_dt)
    rows = []
    table = {}
    for e in eps_grid:
        p = params.with_epsilon(e)
        node_sets, starts, res = _time_average_run(p, u0, t, k_list, dt, M, derive_seed(seed, "eps", e), tau_step, ev, threads)
        final_sq = sq_norm(res.final)
        integ = _row_integrals(res.record_times, res.sq_hist, starts, np.full(starts.size, u0_sq), final_sq, res.t_end, p.lam)
        per_row = final_sq + integ
        for k in k_list:
            sel = np.isin(starts, node_sets[k])
            est, lo, hi = _mean_ci(per_row[sel], e == 0, derive_seed(seed, "boot", e, k))
            rhs = K * (u0_sq * (1 - math.exp(-p.lam * (k + t))) / (p.lam * (k + t)) + 2 * e * e * G)
            table[(e, k)] = (float(est), float(lo), float(hi), rhs)
            rows.append(BoundRow(f"avg@eps={e:g},k={k:g}", float(est), float(lo), float(hi), rhs, _passes(float(hi), rhs, slack)))
    e_top = max(eps_grid)
    for k in k_list:
        best = max((table[(e, k)] for e in eps_grid), key=lambda r: r[2])
        rhs = table[(e_top, k)][3]
        rows.append(BoundRow(f"sup@k={k:g}", best[0], best[1], best[2], rhs, _passes(best[2], rhs, slack)))
    return BoundReport(
        rows,
        params.to_dict(),
        {"K": K, "c_u0": K / params.lam, "c_forcing": f"2*eps^2*{K:g}", "slack": slack},
        {"t": t, "k_list": k_list, "eps_grid": eps_grid, "M_per_node": M, "tau_step": tau_step, "dt": dt,
         "seed": int(seed), "forcing_closed_form": G, "forcing_quadrature": past_weighted_quad(params, t)},
    )


def tail_average_check(
    params: ModelParams,
    u0_set: Sequence,
    t: float,
    n_list: Sequence[int],
    k: float | Sequence[float],
    dt: float,
    M: int,
    seed: int,
    eps_grid: Sequence[float] | None = None,
    tau_step: float = 0.25,
    threads: int = 1,
) -> BoundReport:
    """Time-averaged tail moments ``(1/(k+t)) int_{-k}^t E sum_{|i|>=n} |u_i(t,tau,u0)|^2 dtau``.

    For each ``(epsilon, u0, k)`` the table lists one row per ``n``.  The
    ``rhs`` column holds the average at the previous cut-off (the full second
    moment for the first one) and a row passes when the drop from that level
    is strictly positive with 95% paired-bootstrap confidence.  Cut-offs
    beyond the truncation radius must give exactly zero.
    """
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ParameterError("n_list must be strictly increasing")
    k_values = [float(x) for x in np.atleast_1d(k)]
    if any(kk + t <= 0 for kk in k_values):
        raise ParameterError("every k must satisfy k + t > 0")
    eps_grid = default_epsilon_grid(params) if eps_grid is None else list(eps_grid)
    I = params.trunc_radius
    levels = [0] + n_list
    rows = []
    for e in eps_grid:
        _check_range(params, e)
        p = params.with_epsilon(e)
        for a, u0 in enumerate(u0_set):
            u0 = as_state(u0, p)
            node_sets, starts, res = _time_average_run(
                p, u0, t, k_values, dt, M, derive_seed(seed, "tail", e, a), tau_step, 0, threads
            )
            tails = np.column_stack([tail_sq_norm(res.final, n) for n in levels])
            for kk in k_values:
                sel = np.isin(starts, node_sets[kk])
                x = tails[sel]
                est, lo, hi = _mean_ci(x, e == 0, derive_seed(seed, "tb", e, a, kk))
                _, dlo, _ = _mean_ci(x[:, :-1] - x[:, 1:], e == 0, derive_seed(seed, "tb", e, a, kk))
                for j, n in enumerate(levels[1:], start=1):
                    name = f"tail@eps={e:g},u0={a},k={kk:g},n={n}"
                    if n > I:
                        ok = bool(est[j] == 0.0)
                    else:
                        ok = bool(dlo[j - 1] > 0.0)
                    rows.append(BoundRow(name, float(est[j]), float(lo[j]), float(hi[j]), float(est[j - 1]), ok))
    return BoundReport(
        rows,
        params.to_dict(),
        {"pass_rule": "paired bootstrap lower CI of (tail[n_prev] - tail[n]) > 0; exactly 0 beyond trunc_radius"},
        {"t": t, "k": k_values, "n_list": n_list, "eps_grid": eps_grid, "M_per_node": M, "tau_step": tau_step,
         "dt": dt, "seed": int(seed), "n_u0": len(u0_set)},
    )


# -- compact sets --------------------------------------------------------------------


@dataclass
class CompactSetSpec:
    """Levels ``Y_l = {u : u_i = 0 for |i| > n_l, |u| <= R_l}`` with ``R_l = 2^l sqrt(C/delta)``.

    ``Z_l`` is the closed ``2^-l`` neighbourhood of ``Y_l``; the compact set is
    the intersection of ``Z_l`` for ``l = 1..L``.
    """

    delta: float
    C: float
    n_levels: list[int]
    margins: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.delta:
            raise ParameterError("delta must be positive")
        if any(b < a for a, b in zip(self.n_levels, self.n_levels[1:])):
            raise ParameterError("n_l must be nondecreasing")

    @property
    def max_level(self) -> int:
        return len(self.n_levels)

    def radius(self, level: int) -> float:
        return 2.0**level * math.sqrt(self.C) / math.sqrt(self.delta)

    @property
    def levels(self) -> list[tuple[int, int, float]]:
        return [(l, n, self.radius(l)) for l, n in enumerate(self.n_levels, start=1)]

    def to_dict(self) -> dict:
        return {"delta": self.delta, "C": self.C, "n_levels": list(self.n_levels),
                "levels": [list(x) for x in self.levels], "margins": self.margins, "meta": self.meta}


def distance_to_level(u, n: int, R: float) -> np.ndarray:
    """Distance from ``u`` to ``{v : v_i = 0 for |i| > n, |v| <= R}``."""
    inner, outer = truncation_split(u, n)
    excess = np.maximum(0.0, np.sqrt(sq_norm(inner)) - R)
    return np.sqrt(sq_norm(outer) + excess**2)


def outside_compact(atoms, spec: CompactSetSpec) -> np.ndarray:
    atoms = np.atleast_2d(atoms)
    out = np.zeros(atoms.shape[0], dtype=bool)
    for l, n, R in spec.levels:
        out |= distance_to_level(atoms, n, R) > 2.0**-l
    return out


def tightness_mass(mu: EmpiricalMeasure, spec: CompactSetSpec) -> float:
    """Mass of ``mu`` outside the intersection of the ``Z_l``."""
    return mu.mass(lambda x: outside_compact(x, spec))


def calibrate_compact_set(
    params: ModelParams,
    delta: float,
    k: float,
    m: float,
    dt: float,
    M: int,
    seed: int,
    t: float | None = None,
    eps_grid: Sequence[float] | None = None,
    max_level: int = 8,
    tau_step: float = 0.25,
    n_max: int | None = None,
    threads: int = 1,
) -> CompactSetSpec:
    """Pick ``C`` and ``n_l`` from measured time-averaged laws.

    ``C`` is the largest upper 95% bound of the mean ``|u|^2`` over the
    epsilon grid; ``n_l`` is the smallest cut-off whose averaged outer mass
    ``E sum_{|i|>n} u_i^2`` has upper bound below ``delta / 2^(4l)``.
    """
    if not 0 < delta < 1:
        raise ParameterError("delta must lie in (0, 1)")
    I = params.trunc_radius
    n_max = I if n_max is None else min(int(n_max), I)
    eps_grid = default_epsilon_grid(params) if eps_grid is None else list(eps_grid)
    C = 0.0
    tail_hi = np.zeros(n_max + 1)
    for e in eps_grid:
        _check_range(params, e)
        eta = kb_measure(params.with_epsilon(e), k, m, M, dt, derive_seed(seed, "cal", e), tau_step=tau_step,
                         t_eval=t, threads=threads)
        # outer part beyond n: sites |i| > n, i.e. tail from n + 1
        cols = np.column_stack([sq_norm(eta.atoms)] + [tail_sq_norm(eta.atoms, n + 1) for n in range(n_max + 1)])
        _, _, hi = bootstrap_mean_ci(cols, seed=derive_seed(seed, "calboot", e))
        C = max(C, float(hi[0]))
        tail_hi = np.maximum(tail_hi, hi[1:])
    n_levels, margins = [], []
    for l in range(1, max_level + 1):
        budget = delta / 2.0 ** (4 * l)
        ok = np.flatnonzero(tail_hi < budget)
        if ok.size == 0:
            achievable = float(tail_hi[-1] * 2.0 ** (4 * l))
            raise ParameterError(
                f"tail budget at level {l} not reached within n <= {n_max}; smallest achievable delta ~ {achievable:.3g}"
            )
        n_l = int(ok[0])
        if n_levels and n_l < n_levels[-1]:
            n_l = n_levels[-1]
        n_levels.append(n_l)
        margins.append({"level": l, "n": n_l, "tail_upper": float(tail_hi[n_l]), "budget": budget,
                        "chebyshev_bound": delta / 2.0 ** (2 * l - 1)})
    return CompactSetSpec(delta, C, n_levels, margins,
                          {"k": k, "m": m, "M_per_node": M, "dt": dt, "seed": int(seed), "eps_grid": eps_grid})
