"""Experiments on noise-intensity continuity and the evolution property.

Coupled comparisons drive both noise intensities with the same Brownian
path.  Distribution comparisons use energy-distance permutation tests at
``alpha = 0.01`` unless told otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measures import (
    EmpiricalMeasure,
    EvolutionFamily,
    default_panel,
    energy_distance,
    energy_test,
    evolution_family,
    push_forward,
    test_function_pairing,
    w1_functional,
)
from .model import ModelParams, ParameterError, as_state, basis_state
from .sde import derive_seed, integrate
from .stats import one_sided_increase_z, wilson_ci

__all__ = [
    "ALPHA",
    "Criterion",
    "CipEstimate",
    "StabilityReport",
    "default_k_grid",
    "cip_probability",
    "cip_trend",
    "feller_probe",
    "evolution_defect",
    "chapman_kolmogorov_check",
    "limit_stability_experiment",
]

ALPHA = 0.01
N_PERM = 999


@dataclass
class Criterion:
    """One line of a lab report: ``criterion,value,ci_lo,ci_hi,pass``."""

    criterion: str
    value: float
    ci_lo: float
    ci_hi: float
    passed: bool

    def as_tuple(self):
        return (self.criterion, self.value, self.ci_lo, self.ci_hi, self.passed)


@dataclass
class LabReport:
    criteria: list[Criterion]
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def get(self, name: str) -> Criterion:
        for c in self.criteria:
            if c.criterion == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "meta": self.meta,
            "criteria": [dict(zip(("criterion", "value", "ci_lo", "ci_hi", "pass"), c.as_tuple())) for c in self.criteria],
        }


@dataclass
class CipEstimate:
    epsilon: float
    epsilon0: float
    tau: float
    t: float
    threshold: float
    n_grid: int
    M: int
    estimate: float
    ci_lo: float
    ci_hi: float
    per_point: np.ndarray
    argmax: int
    uniform_in_t: bool = False

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("epsilon", "epsilon0", "tau", "t", "threshold", "n_grid", "M", "estimate", "ci_lo", "ci_hi", "argmax", "uniform_in_t")}
        d["per_point"] = self.per_point.tolist()
        return d


@dataclass
class StabilityReport(LabReport):
    epsilons: list[float] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    distances: dict = field(default_factory=dict)
    defects: list[dict] = field(default_factory=list)


def default_k_grid(params: ModelParams, n_points: int = 16, seed: int = 0, radius: float = 2.0) -> list[np.ndarray]:
    """Scaled basis vectors near the centre plus random states of norm <= ``radius``."""
    grid = [basis_state(params, 0, 0.0)]
    for site, scale in ((0, 1.0), (0, 2.0), (1, 1.0), (-1, 1.0), (2, 1.5), (-2, -1.5), (0, -1.0)):
        if abs(site) <= params.trunc_radius:
            grid.append(basis_state(params, site, scale))
    rng = np.random.default_rng(derive_seed(seed, "K"))
    while len(grid) < n_points:
        v = rng.standard_normal(params.size) * np.exp(-0.3 * np.abs(np.arange(params.size) - params.trunc_radius))
        grid.append(v / np.linalg.norm(v) * radius * rng.uniform() ** (1.0 / 3.0))
    return grid[:n_points]


# -- convergence in probability ------------------------------------------------------


def cip_probability(
    params0: ModelParams,
    epsilon: float,
    tau: float,
    t: float,
    threshold: float,
    K_grid: Sequence,
    M: int,
    dt: float,
    seed: int,
    uniform_in_t: bool = False,
    record_dt: float = 0.01,
    threads: int = 1,
) -> CipEstimate:
    """Estimate ``sup_x P(|u^eps(t,tau,x) - u^eps0(t,tau,x)| >= threshold)`` over the grid.

    With ``uniform_in_t`` the event uses the supremum of the distance over the
    window ``[tau, t]``, sampled every ``record_dt``.
    """
    if not K_grid:
        raise ParameterError("K_grid must be nonempty")
    p_eps = params0.with_epsilon(epsilon)
    if t < tau:
        raise ParameterError("t must be >= tau")
    snap_times = None
    if uniform_in_t and t > tau:
        n = max(1, int(round((t - tau) / record_dt)))
        snap_times = tau + (t - tau) * np.arange(1, n + 1) / n
        snap_times = tau + np.rint((snap_times - tau) / dt) * dt
        snap_times = np.unique(snap_times)
    counts = np.zeros(len(K_grid), dtype=np.int64)
    for a, x in enumerate(K_grid):
        x = as_state(x, params0)
        ra, rb = integrate(np.broadcast_to(x, (M, x.size)), tau, t, dt, [p_eps, params0], seed, np.arange(M),
                           snap_times=snap_times, threads=threads)
        if uniform_in_t and snap_times is not None:
            dist = np.sqrt(np.max(np.sum((ra.snaps - rb.snaps) ** 2, axis=2), axis=1))
        else:
            dist = np.sqrt(np.sum((ra.final - rb.final) ** 2, axis=1))
        counts[a] = np.count_nonzero(dist >= threshold)
    per_point = counts / M
    j = int(np.argmax(per_point))
    lo, hi = wilson_ci(int(counts[j]), M)
    return CipEstimate(float(epsilon), params0.epsilon, tau, t, threshold, len(K_grid), M, float(per_point[j]),
                       lo, hi, per_point, j, uniform_in_t)


def cip_trend(
    params0: ModelParams,
    offsets: Sequence[float],
    tau: float,
    t: float,
    threshold: float,
    K_grid: Sequence,
    M: int,
    dt: float,
    seed: int,
    level: float = 0.95,
    uniform_in_t: bool = False,
    threads: int = 1,
) -> LabReport:
    """CIP estimates for ``epsilon0 + offset`` over decreasing offsets, then offset 0.

    The trend passes when no step toward ``epsilon0`` shows a significant
    increase (one-sided two-proportion test at ``level``) and the zero offset
    gives exactly 0.
    """
    offsets = sorted((float(o) for o in offsets), key=abs, reverse=True)
    if 0.0 not in offsets:
        offsets.append(0.0)
    ests = [cip_probability(params0, params0.epsilon + o, tau, t, threshold, K_grid, M, dt, seed,
                            uniform_in_t=uniform_in_t, threads=threads) for o in offsets]
    crit = [Criterion(f"cip@offset={o:g}", e.estimate, e.ci_lo, e.ci_hi, True) for o, e in zip(offsets, ests)]
    alpha = 1.0 - level
    steps_ok = True
    for (o1, e1), (o2, e2) in zip(zip(offsets, ests), zip(offsets[1:], ests[1:])):
        pval = one_sided_increase_z(e1.estimate, e1.M, e2.estimate, e2.M)
        ok = pval >= alpha
        steps_ok &= ok
        crit.append(Criterion(f"nonincreasing {o1:g}->{o2:g}", e2.estimate - e1.estimate, pval, pval, ok))
    zero = ests[offsets.index(0.0)].estimate
    crit.append(Criterion("exact_zero_at_offset_0", zero, zero, zero, zero == 0.0))
    return LabReport(crit, {"offsets": offsets, "estimates": [e.to_dict() for e in ests], "threshold": threshold,
                            "tau": tau, "t": t, "M": M, "dt": dt, "seed": int(seed), "trend_ok": bool(steps_ok)})


# -- Feller probe ---------------------------------------------------------------------


def feller_probe(params: ModelParams, tau: float, t: float, x_pairs: Sequence, M: int, dt: float, seed: int,
                 panel=None, threads: int = 1) -> LabReport:
    """``|E phi(u(t,tau,x)) - E phi(u(t,tau,x'))|`` per panel function, with shared paths."""
    panel = default_panel(params.trunc_radius) if panel is None else panel
    rows = []
    gaps = []
    for a, (x, y) in enumerate(x_pairs):
        x, y = as_state(x, params), as_state(y, params)
        n = 1 if params.epsilon == 0 else M
        u0 = np.vstack([np.broadcast_to(x, (n, x.size)), np.broadcast_to(y, (n, y.size))])
        ids = np.concatenate([np.arange(n), np.arange(n)])
        res = integrate(u0, tau, t, dt, params, seed, ids, threads=threads)
        ex = test_function_pairing(EmpiricalMeasure.uniform(res.final[:n]), panel)
        ey = test_function_pairing(EmpiricalMeasure.uniform(res.final[n:]), panel)
        gap = np.abs(ex - ey)
        gaps.append(gap)
        dist = float(np.linalg.norm(x - y))
        worst = float(gap.max())
        lip = max(phi.lipschitz for phi in panel)
        rows.append(Criterion(f"pair{a}:|x-x'|={dist:.4g}", worst, 0.0, lip * dist, True))
    dists = [float(np.linalg.norm(as_state(x) - as_state(y))) for x, y in x_pairs]
    order = np.argsort(dists)[::-1]
    worst = [float(np.max(gaps[j])) for j in order]
    trend = all(b <= a + 1e-12 for a, b in zip(worst, worst[1:]))
    rows.append(Criterion("defect_nonincreasing_as_|x-x'|_shrinks", float(worst[-1]), 0.0, float(worst[0]), trend))
    return LabReport(rows, {"tau": tau, "t": t, "M": M, "dt": dt, "seed": int(seed),
                            "panel": [phi.name for phi in panel], "gaps": [g.tolist() for g in gaps], "distances": dists})


# -- evolution property and Chapman-Kolmogorov ---------------------------------------


def _panel_gaps(a: EmpiricalMeasure, b: EmpiricalMeasure, panel):
    va = np.column_stack([phi(a.atoms) for phi in panel])
    vb = np.column_stack([phi(b.atoms) for phi in panel])
    ma, mb = a.weights @ va, b.weights @ vb
    se = np.sqrt(a.weights @ (va - ma) ** 2 / a.size + b.weights @ (vb - mb) ** 2 / b.size)
    return ma - mb, 1.96 * se


def compare_measures(a: EmpiricalMeasure, b: EmpiricalMeasure, label: str, seed: int, alpha: float = ALPHA,
                     n_perm: int = N_PERM) -> tuple[list[Criterion], dict]:
    """Energy permutation test plus panel gaps between two sample clouds."""
    panel = default_panel(a.trunc_radius)
    if np.array_equal(a.atoms, b.atoms) and np.array_equal(a.weights, b.weights):
        stat, pvalue = 0.0, 1.0
    else:
        stat, pvalue = energy_test(a, b, n_perm=n_perm, seed=seed)
    gap, half = _panel_gaps(a, b, panel)
    crit = [Criterion(f"{label}:energy", stat, pvalue, pvalue, pvalue >= alpha)]
    z = np.divide(np.abs(gap), half, out=np.zeros_like(gap), where=half > 0)
    worst = int(np.argmax(z))
    crit.append(Criterion(f"{label}:panel_max_gap[{panel[worst].name}]", float(gap[worst]),
                          float(gap[worst] - half[worst]), float(gap[worst] + half[worst]), True))
    info = {"energy": stat, "pvalue": pvalue, "panel_gap": gap.tolist(), "panel_halfwidth": half.tolist(),
            "w1_sq_norm": w1_functional(a, b, "sq_norm")}
    return crit, info


def evolution_defect(family: EvolutionFamily, tau_index: int, t_index: int, dt: float, seed: int, R: int = 1,
                     alpha: float = ALPHA, n_perm: int = N_PERM, threads: int = 1) -> LabReport:
    """Compare ``push_forward(mu_tau, tau, t)`` (fresh noise) with ``mu_t`` from the family."""
    if not 0 <= tau_index <= t_index < len(family.times):
        raise ParameterError("need 0 <= tau_index <= t_index < len(times)")
    tau, t = float(family.times[tau_index]), float(family.times[t_index])
    pushed = push_forward(family.measures[tau_index], tau, t, family.params, dt, seed, replicas=R, threads=threads)
    crit, info = compare_measures(pushed, family.measures[t_index], f"defect[{tau:g}->{t:g}]",
                                  derive_seed(seed, "perm"), alpha, n_perm)
    return LabReport(crit, {"tau": tau, "t": t, "R": R, "seed": int(seed), **info})


def chapman_kolmogorov_check(params: ModelParams, tau: float, r: float, t: float, u0, M: int, dt: float, seed: int,
                             alpha: float = ALPHA, n_perm: int = N_PERM, threads: int = 1) -> LabReport:
    """One-leg ``tau -> t`` versus two-leg ``tau -> r -> t`` with independent noise on each leg."""
    if not tau <= r <= t:
        raise ParameterError("need tau <= r <= t")
    u0 = as_state(u0, params)
    n = 1 if params.epsilon == 0 else M
    x0 = np.broadcast_to(u0, (n, params.size))
    direct = integrate(x0, tau, t, dt, params, derive_seed(seed, "direct"), np.arange(n), threads=threads).final
    mid = integrate(x0, tau, r, dt, params, derive_seed(seed, "leg1"), np.arange(n), threads=threads).final
    composed = integrate(mid, r, t, dt, params, derive_seed(seed, "leg2"), np.arange(n), threads=threads).final
    a, b = EmpiricalMeasure.uniform(direct), EmpiricalMeasure.uniform(composed)
    crit, info = compare_measures(a, b, f"ck[{tau:g}->{r:g}->{t:g}]", derive_seed(seed, "perm"), alpha, n_perm)
    if params.epsilon == 0:
        same = bool(np.array_equal(direct, composed))
        crit.append(Criterion("exact_flow_composition", float(np.max(np.abs(direct - composed))), 0.0, 0.0, same))
    return LabReport(crit, {"tau": tau, "r": r, "t": t, "M": n, "dt": dt, "seed": int(seed), **info})


# -- limit stability ------------------------------------------------------------------


def choose_pairs(n_times: int, n_pairs: int, seed: int) -> list[tuple[int, int]]:
    """Distinct index pairs ``i < j`` drawn without replacement."""
    allp = [(i, j) for i in range(n_times) for j in range(i + 1, n_times)]
    if not allp:
        return []
    rng = np.random.default_rng(derive_seed(seed, "pairs"))
    pick = rng.choice(len(allp), size=min(n_pairs, len(allp)), replace=False)
    return [allp[k] for k in sorted(pick)]


def limit_stability_experiment(
    params0: ModelParams,
    epsilon_seq: Sequence[float],
    m: float,
    k: float,
    times: Sequence[float],
    dt: float,
    M: int,
    seed: int,
    tau_step: float = 0.25,
    n_defect_pairs: int = 3,
    R: int = 1,
    alpha: float = ALPHA,
    n_perm: int = N_PERM,
    hypotheses: dict | None = None,
    threads: int = 1,
) -> StabilityReport:
    """Families at each ``epsilon_n`` against the family at ``epsilon0 = params0.epsilon``.

    All families are built from the same seed, so the constructions share
    Brownian paths and differ only through the noise intensity.  Criteria:
    the energy distance to the ``epsilon0`` family decreases strictly along
    the sequence at every time, and the ``epsilon0`` family passes the
    evolution-defect test at ``n_defect_pairs`` random time pairs.  When
    ``hypotheses`` is given (keys ``cip`` and ``feller`` holding keyword
    arguments) the CIP trend and Feller probe at ``epsilon0`` are run and
    reported too.
    """
    eps_seq = [float(e) for e in epsilon_seq]
    for e in eps_seq + [params0.epsilon]:
        if not 0 <= e <= params0.epsilon_max * (1 + 1e-12):
            raise ParameterError(f"epsilon={e} outside the admissible range")
    times = sorted(float(t) for t in times)
    fam0 = evolution_family(params0, m, k, times, dt, M, seed, tau_step=tau_step, threads=threads)
    crit: list[Criterion] = []
    dist = {}
    for e in eps_seq:
        fam = evolution_family(params0.with_epsilon(e), m, k, times, dt, M, seed, tau_step=tau_step, threads=threads)
        for t, a, b in zip(fam.times, fam.measures, fam0.measures):
            dist[(e, float(t))] = {
                "energy": energy_distance(a, b),
                "w1_sq_norm": w1_functional(a, b, "sq_norm"),
                "w1_u0": w1_functional(a, b, ("coordinate", 0)),
                "panel_max_gap": float(np.max(np.abs(test_function_pairing(a) - test_function_pairing(b)))),
            }
    for t in fam0.times:
        seq = [dist[(e, float(t))]["energy"] for e in eps_seq]
        decreasing = all(b < a for a, b in zip(seq, seq[1:]))
        crit.append(Criterion(f"energy_decreasing@t={t:g}", seq[-1], min(seq), max(seq), decreasing))
    defects = []
    for i, j in choose_pairs(len(fam0.times), n_defect_pairs, seed):
        rep = evolution_defect(fam0, i, j, dt, derive_seed(seed, "defect", i, j), R=R, alpha=alpha, n_perm=n_perm,
                               threads=threads)
        defects.append(rep.to_dict())
        crit.extend(rep.criteria)
    if hypotheses:
        if "cip" in hypotheses:
            cip = cip_trend(params0, seed=derive_seed(seed, "cip"), threads=threads, **hypotheses["cip"])
            crit.append(Criterion("hypothesis:cip_trend", cip.get("exact_zero_at_offset_0").value, 0.0, 0.0,
                                  cip.passed))
        if "feller" in hypotheses:
            fel = feller_probe(params0, seed=derive_seed(seed, "feller"), threads=threads, **hypotheses["feller"])
            crit.append(Criterion("hypothesis:feller_probe", fel.criteria[-1].value, 0.0, fel.criteria[-1].ci_hi,
                                  fel.passed))
    return StabilityReport(
        crit,
        {"epsilon0": params0.epsilon, "m": m, "k": k, "M": M, "dt": dt, "seed": int(seed), "tau_step": tau_step},
        epsilons=eps_seq,
        times=[float(t) for t in fam0.times],
        distances={f"{e:g}@{t:g}": v for (e, t), v in dist.items()},
        defects=defects,
    )
