"""Empirical measures, time-averaged (Krylov-Bogolyubov) constructions and distances.

Weak convergence is not decidable from samples, so comparisons go through
three computable proxies: the energy distance on the truncated state, exact
1-D Wasserstein-1 on scalar functionals, and a fixed panel of bounded
Lipschitz test functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .model import ModelParams, ParameterError, sq_norm, tail_sq_norm
from .sde import derive_seed, integrate

__all__ = [
    "EmpiricalMeasure",
    "EvolutionFamily",
    "TestFunction",
    "default_panel",
    "kb_tau_nodes",
    "kb_measure",
    "push_forward",
    "evolution_family",
    "scalar_functional",
    "w1_functional",
    "energy_distance",
    "energy_test",
    "test_function_pairing",
]


@dataclass(frozen=True)
class EmpiricalMeasure:
    atoms: np.ndarray
    weights: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.shape[0] == 0:
            raise ParameterError("empirical measure needs at least one atom")
        if weights.shape != (atoms.shape[0],):
            raise ParameterError("one weight per atom is required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be nonnegative and sum to 1")
        if atoms.shape[1] % 2 != 1 or not np.all(np.isfinite(atoms)):
            raise ParameterError("atoms must be finite states of odd length 2I+1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms, provenance: dict | None = None) -> "EmpiricalMeasure":
        atoms = np.atleast_2d(atoms)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n), provenance or {})

    @classmethod
    def point_mass(cls, x, provenance: dict | None = None) -> "EmpiricalMeasure":
        return cls(np.atleast_2d(x), np.ones(1), provenance or {})

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def trunc_radius(self) -> int:
        return (self.atoms.shape[1] - 1) // 2

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        """Weighted mean of ``fn`` applied row-wise to the atoms."""
        return float(self.weights @ np.asarray(fn(self.atoms), dtype=float))

    def mass(self, predicate: Callable[[np.ndarray], np.ndarray]) -> float:
        """Mass of the event given by a boolean row predicate; clipped to [0, 1]."""
        m = float(self.weights @ np.asarray(predicate(self.atoms), dtype=float))
        return min(1.0, max(0.0, m))


@dataclass
class EvolutionFamily:
    times: np.ndarray
    measures: list[EmpiricalMeasure]
    params: ModelParams
    construction: dict

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.measures):
            raise ParameterError("one measure per time is required")
        if np.any(np.diff(self.times) <= 0):
            raise ParameterError("family times must be strictly increasing")

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[k], t):
            raise KeyError(f"time {t} not in family")
        return k

    def at(self, t: float) -> EmpiricalMeasure:
        return self.measures[self.index_of(t)]


# -- test-function panel --------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    bound: float
    lipschitz: float

    def __call__(self, atoms):
        return self.fn(np.atleast_2d(atoms))


def _col(radius: int, site: int) -> int:
    return min(max(site, -radius), radius) + radius


def default_panel(trunc_radius: int) -> list[TestFunction]:
    """Twelve bounded Lipschitz functions: coordinate squashes, norm cut-offs and squashed products."""
    c = lambda site: _col(trunc_radius, site)  # noqa: E731

    def squashed_product(a, b):
        def fn(x):
            u, v = x[:, c(a)], x[:, c(b)]
            return u * v / (1.0 + u * u + v * v)

        return fn

    centre = [c(s) for s in range(-2, 3)]
    return [
        TestFunction("one", lambda x: np.ones(x.shape[0]), 1.0, 0.0),
        TestFunction("tanh_u0", lambda x: np.tanh(x[:, c(0)]), 1.0, 1.0),
        TestFunction("tanh_u1", lambda x: np.tanh(x[:, c(1)]), 1.0, 1.0),
        TestFunction("tanh_um1", lambda x: np.tanh(x[:, c(-1)]), 1.0, 1.0),
        TestFunction("tanh_u2", lambda x: np.tanh(x[:, c(2)]), 1.0, 1.0),
        TestFunction("tanh_centre_sum", lambda x: np.tanh(x[:, centre].sum(axis=1)), 1.0, np.sqrt(5.0)),
        TestFunction("norm_cutoff", lambda x: np.minimum(np.sqrt(sq_norm(x)), 1.0), 1.0, 1.0),
        TestFunction("gauss_norm", lambda x: np.exp(-sq_norm(x)), 1.0, np.sqrt(2.0 / np.e)),
        TestFunction("tail2_cutoff", lambda x: np.minimum(np.sqrt(tail_sq_norm(x, 2)), 1.0), 1.0, 1.0),
        TestFunction("prod_u0_u1", squashed_product(0, 1), 0.5, 1.0),
        TestFunction("prod_u0_um1", squashed_product(0, -1), 0.5, 1.0),
        TestFunction("prod_um1_u1", squashed_product(-1, 1), 0.5, 1.0),
    ]


def test_function_pairing(mu: EmpiricalMeasure, panel: Sequence[TestFunction] | None = None) -> np.ndarray:
    """``(integral of phi d mu)`` for each ``phi`` in the panel."""
    panel = default_panel(mu.trunc_radius) if panel is None else panel
    if not panel:
        raise ParameterError("test-function panel is empty")
    return np.array([mu.weights @ phi(mu.atoms) for phi in panel])


test_function_pairing.__test__ = False


def _pairing_samples(mu: EmpiricalMeasure, panel) -> np.ndarray:
    return np.column_stack([phi(mu.atoms) for phi in panel])


# -- constructions ----------------------------------------------------------------


def kb_tau_nodes(k: float, m: float, tau_step: float, dt: float) -> np.ndarray:
    """Midpoint nodes of ``[-k, -m]`` with spacing ``tau_step``, snapped to the ``dt`` grid."""
    if not k > m:
        raise ParameterError("time-average window needs k > m")
    n = int(round((k - m) / tau_step))
    if n < 1:
        raise ParameterError("empty tau-grid: tau_step exceeds the window k - m")
    h = (k - m) / n
    nodes = -k + h * (np.arange(n) + 0.5)
    return -k + np.rint((nodes + k) / dt) * dt


def kb_measure(
    params: ModelParams,
    k: float,
    m: float,
    M: int,
    dt: float,
    seed: int,
    tau_step: float = 0.25,
    t_eval: float | None = None,
    threads: int = 1,
) -> EmpiricalMeasure:
    """Time average over ``tau in [-k, -m]`` of the laws of ``u(t_eval, tau, 0)``.

    The tau-integral is a midpoint rule; each node contributes ``M``
    equally weighted samples (one when ``epsilon = 0``, where the solution is
    deterministic).  ``t_eval`` defaults to ``-m``.
    """
    if M < 1:
        raise ParameterError("M per tau node must be >= 1")
    t_eval = -m if t_eval is None else t_eval
    if t_eval < -m:
        raise ParameterError("t_eval must be >= -m")
    nodes = kb_tau_nodes(k, m, tau_step, dt)
    per_node = 1 if params.epsilon == 0 else M
    starts = np.repeat(nodes, per_node)
    u0 = np.zeros((starts.size, params.size))
    res = integrate(u0, starts, t_eval, dt, params, seed, np.arange(starts.size), threads=threads)
    prov = {
        "kind": "kb_measure",
        "t": float(res.t_end),
        "k": k,
        "m": m,
        "tau_step": tau_step,
        "tau_nodes": nodes.tolist(),
        "M_per_node": per_node,
        "dt": dt,
        "seed": int(seed),
        "epsilon": params.epsilon,
    }
    return EmpiricalMeasure.uniform(res.final, prov)


def push_forward(
    mu: EmpiricalMeasure,
    tau: float,
    t: float,
    params: ModelParams,
    dt: float,
    seed: int,
    replicas: int = 1,
    threads: int = 1,
) -> EmpiricalMeasure:
    """Move every atom along the dynamics from ``tau`` to ``t`` with fresh noise.

    Each atom is replicated ``replicas`` times (once if ``epsilon = 0``) and
    its weight split evenly among the copies.
    """
    if t < tau:
        raise ParameterError("push_forward needs t >= tau")
    if mu.atoms.shape[1] != params.size:
        raise ParameterError("measure and parameters disagree on the truncation radius")
    if t - tau < 0.5 * dt:
        return mu
    R = 1 if params.epsilon == 0 else int(replicas)
    if R < 1:
        raise ParameterError("replicas must be >= 1")
    u0 = np.repeat(mu.atoms, R, axis=0)
    w = np.repeat(mu.weights / R, R)
    res = integrate(u0, tau, t, dt, params, seed, np.arange(u0.shape[0]), threads=threads)
    prov = dict(mu.provenance)
    prov.update({"kind": "push_forward", "from": float(tau), "t": float(res.t_end), "replicas": R, "push_seed": int(seed)})
    return EmpiricalMeasure(res.final, w / w.sum(), prov)


def evolution_family(
    params: ModelParams,
    m: float,
    k: float,
    times: Sequence[float],
    dt: float,
    M: int,
    seed: int,
    tau_step: float = 0.25,
    threads: int = 1,
) -> EvolutionFamily:
    """``mu_t = Q_{-m, t} eta_{k, m}`` for each requested ``t >= -m``."""
    times = np.asarray(sorted(times), dtype=float)
    if times.size == 0 or times[0] < -m - 1e-12:
        raise ParameterError("family times must be nonempty and >= -m")
    eta = kb_measure(params, k, m, M, dt, derive_seed(seed, "kb"), tau_step=tau_step, threads=threads)
    measures = []
    if times[-1] - (-m) < 0.5 * dt:
        measures = [eta for _ in times]
    else:
        res = integrate(
            eta.atoms, -m, times[-1], dt, params, derive_seed(seed, "push"), np.arange(eta.size),
            snap_times=times, threads=threads,
        )
        for s, t in enumerate(res.snap_times):
            prov = dict(eta.provenance)
            prov.update({"kind": "evolution_family", "t": float(t), "from": float(-m)})
            measures.append(EmpiricalMeasure(res.snaps[:, s, :], eta.weights, prov))
    construction = {"m": m, "k": k, "tau_step": tau_step, "M": M, "dt": dt, "seed": int(seed)}
    return EvolutionFamily(times, measures, params, construction)


# -- distances ----------------------------------------------------------------------


def scalar_functional(functional) -> Callable[[np.ndarray], np.ndarray]:
    """Resolve ``"sq_norm"``, ``("coordinate", i)``, ``("tail", n)`` or a callable."""
    if callable(functional):
        return functional
    if functional == "sq_norm":
        return sq_norm
    kind, arg = functional
    if kind == "coordinate":
        return lambda x: x[:, arg + (x.shape[1] - 1) // 2]
    if kind == "tail":
        return lambda x: tail_sq_norm(x, arg)
    raise ParameterError(f"unknown functional {functional!r}")


def _w1_1d(xa, wa, xb, wb) -> float:
    # integral of |F_a - F_b| over the merged support
    vals = np.concatenate([xa, xb])
    order = np.argsort(vals, kind="mergesort")
    vals = vals[order]
    jumps = np.concatenate([wa, -np.asarray(wb)])[order]
    cdf_gap = np.cumsum(jumps)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(vals)))


def w1_functional(a: EmpiricalMeasure, b: EmpiricalMeasure, functional="sq_norm") -> float:
    """Exact Wasserstein-1 between the laws of a scalar functional under ``a`` and ``b``."""
    fn = scalar_functional(functional)
    return _w1_1d(np.asarray(fn(a.atoms), float), a.weights, np.asarray(fn(b.atoms), float), b.weights)


def energy_distance(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Weighted V-statistic ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` (Euclidean norm on the truncation)."""
    if a.atoms.shape[1] != b.atoms.shape[1]:
        raise ParameterError("measures live on different truncations")
    xy = a.weights @ cdist(a.atoms, b.atoms) @ b.weights
    xx = a.weights @ cdist(a.atoms, a.atoms) @ a.weights
    yy = b.weights @ cdist(b.atoms, b.atoms) @ b.weights
    return max(0.0, float(2.0 * xy - xx - yy))


def energy_test(a: EmpiricalMeasure, b: EmpiricalMeasure, n_perm: int = 999, seed: int = 0) -> tuple[float, float]:
    """Energy distance and its permutation p-value (equal-weight samples only)."""
    if not (a.is_uniform and b.is_uniform):
        raise ParameterError("permutation test needs equally weighted atoms")
    n, m = a.size, b.size
    pooled = np.vstack([a.atoms, b.atoms])
    D = cdist(pooled, pooled)
    rowsum = D.sum(axis=1)
    total = rowsum.sum()

    def stats(Z):
        # Z: (n+m, P) indicators of the first sample
        zdz = np.einsum("ip,ip->p", Z, D @ Z)
        zr = rowsum @ Z
        s_xx = zdz
        s_xy = zr - zdz
        s_yy = total - 2.0 * zr + zdz
        return 2.0 * s_xy / (n * m) - s_xx / (n * n) - s_yy / (m * m)

    z0 = np.zeros((n + m, 1))
    z0[:n] = 1.0
    observed = float(stats(z0)[0])
    rng = np.random.default_rng(seed)
    null = []
    batch = 128
    for start in range(0, n_perm, batch):
        P = min(batch, n_perm - start)
        Z = np.zeros((n + m, P))
        for p in range(P):
            Z[rng.permutation(n + m)[:n], p] = 1.0
        null.append(stats(Z))
    null = np.concatenate(null)
    tol = 1e-12 * max(1.0, abs(total) / (n + m) ** 2)
    pvalue = float((1 + np.count_nonzero(null >= observed - tol)) / (n_perm + 1))
    return max(0.0, observed), pvalue
