"""Tamed Euler-Maruyama integration of the lattice system.

A single scalar Brownian path drives all sites of one trajectory.  Paths are
drawn from Philox keyed by ``(seed, stream_id)``, so trajectory ``j`` of an
ensemble depends only on its own key and never on how the ensemble was split
across workers.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .model import ModelParams, ParameterError, as_state, diffusion, drift

__all__ = [
    "IntegratorBlowup",
    "WienerPath",
    "Trajectory",
    "EnsembleResult",
    "derive_seed",
    "path_generator",
    "step_tamed_em",
    "integrate",
    "simulate",
    "simulate_coupled",
    "run_ensemble",
]

MASK64 = (1 << 64) - 1
BLOCK_ROWS = 256
CHUNK_STEPS = 2048

_SIGMA_CODES = {"zero": 0, "tanh_bounded": 1, "linear_saturated": 2}


class IntegratorBlowup(RuntimeError):
    """A trajectory produced non-finite values.

    ``failures`` lists ``(stream_id, t, norm)`` for every blown-up row.
    """

    def __init__(self, failures):
        self.failures = list(failures)
        sid, t, norm = self.failures[0]
        super().__init__(
            f"{len(self.failures)} trajectory(ies) blew up; first: stream {sid} at t={t:.6g} (|u|={norm:.3g})"
        )


def derive_seed(master_seed: int, *labels) -> int:
    """Deterministic 64-bit child seed for a labelled sub-task."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed) & MASK64).encode())
    for label in labels:
        h.update(b"\x1f" + str(label).encode())
    return int.from_bytes(h.digest(), "little")


def path_generator(seed: int, stream_id: int) -> np.random.Generator:
    key = np.array([int(stream_id) & MASK64, int(seed) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class WienerPath:
    t0: float
    dt: float
    increments: np.ndarray
    seed: int
    stream_id: int

    @classmethod
    def generate(cls, seed: int, stream_id: int, t0: float, dt: float, n: int) -> "WienerPath":
        if not dt > 0:
            raise ParameterError("dt must be > 0")
        dw = path_generator(seed, stream_id).standard_normal(n) * math.sqrt(dt)
        return cls(float(t0), float(dt), dw, int(seed), int(stream_id))

    def values(self) -> np.ndarray:
        """``W(t0 + k dt) - W(t0)`` for ``k = 0..n``."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    params: ModelParams
    seed: int
    stream_id: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class EnsembleResult:
    """Output of :func:`integrate` for a batch of rows.

    ``sq_hist[j, r]`` is ``|u_j|^2`` at ``record_times[r]``; before a row's
    start time it holds the initial value.  ``snaps[j, s]`` is the state at
    ``snap_times[s]``.
    """

    final: np.ndarray
    start_times: np.ndarray
    t_end: float
    stream_ids: np.ndarray
    record_times: np.ndarray | None = None
    sq_hist: np.ndarray | None = None
    snap_times: np.ndarray | None = None
    snaps: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@numba.njit(cache=True, nogil=True)
def _advance(u, start, s0, s1, t0, dt, dW, lam, nu, pexp, eps, delta, sig_code, g_amp, g_mask,
             rec_every, sq_hist, snap_slot, snaps, blown):
    B, N = u.shape
    f = np.empty(N)
    for j in range(B):
        if blown[j] >= 0:
            continue
        for s in range(max(s0, start[j]), s1):
            ga = g_amp[s - s0]
            fn = 0.0
            for i in range(N):
                x = u[j, i]
                left = u[j, i - 1] if i > 0 else 0.0
                right = u[j, i + 1] if i < N - 1 else 0.0
                if pexp == 2.0:
                    nl = x * abs(x)
                elif x == 0.0:
                    nl = 0.0
                else:
                    nl = math.copysign(abs(x) ** pexp, x)
                fi = -lam * x + nu * (left - 2.0 * x + right) - nl
                f[i] = fi
                fn += fi * fi
            scale = dt / (1.0 + dt * math.sqrt(fn))
            w = dW[j, s - s0]
            sq = 0.0
            for i in range(N):
                x = u[j, i]
                if sig_code == 0 or eps == 0.0:
                    noise = 0.0
                else:
                    gi = ga if g_mask[i] else 0.0
                    if sig_code == 1:
                        # tanh via expm1; libm tanh is the hot spot here
                        e = math.expm1(-2.0 * abs(x))
                        sg = delta * math.copysign(-e / (2.0 + e), x) + gi
                    else:
                        sg = delta * x / (1.0 + x * x) + gi
                    noise = eps * sg * w
                y = x + scale * f[i] + noise
                u[j, i] = y
                sq += y * y
            if not math.isfinite(sq):
                blown[j] = s + 1
                break
            k = s + 1
            if rec_every > 0 and k % rec_every == 0:
                sq_hist[j, k // rec_every] = sq
            slot = snap_slot[k]
            if slot >= 0:
                for i in range(N):
                    snaps[j, slot, i] = u[j, i]


def _kernel_args(params: ModelParams):
    g = params.g
    return dict(
        lam=float(params.lam),
        nu=float(params.nu),
        pexp=float(params.p - 1.0),
        eps=float(params.epsilon),
        delta=float(params.delta),
        sig_code=_SIGMA_CODES[params.sigma.family],
        g_mask=g.support_mask(params.trunc_radius),
    )


def step_tamed_em(u, t: float, dt: float, dW: float, params: ModelParams) -> np.ndarray:
    """One tamed step ``u + dt f / (1 + dt |f|) + eps sigma(t, u) dW``."""
    if not dt > 0:
        raise ParameterError("dt must be > 0")
    u = as_state(u, params)
    with np.errstate(over="ignore", invalid="ignore"):
        f = drift(u, t, params)
        out = u + dt * f / (1.0 + dt * np.linalg.norm(f)) + diffusion(u, t, params) * dW
    if not np.all(np.isfinite(out)):
        raise IntegratorBlowup([(-1, t + dt, float(np.linalg.norm(u)))])
    return out


def _grid_steps(origin: float, times, dt: float) -> np.ndarray:
    return np.rint((np.asarray(times, dtype=float) - origin) / dt).astype(np.int64)


def _fill_noise(dW, gens, start, c0, c1, sqdt):
    for j, gen in enumerate(gens):
        a = max(c0, int(start[j]))
        if a < c1:
            dW[j, a - c0 : c1 - c0] = gen.standard_normal(c1 - a) * sqdt


def _run_block(u, start, n_steps, origin, dt, params_list, seed, stream_ids, rec_every, n_rec, snap_slot, n_snap):
    """Advance one row block under each parameter set in ``params_list`` with shared noise."""
    B, N = u.shape
    gens = [path_generator(seed, sid) for sid in stream_ids]
    sqdt = math.sqrt(dt)
    outs = []
    for _ in params_list:
        uu = u.copy()
        sq_hist = np.empty((B, n_rec)) if rec_every > 0 else np.empty((B, 0))
        if rec_every > 0:
            sq_hist[:] = np.sum(u * u, axis=1)[:, None]
        snaps = np.empty((B, n_snap, N))
        if n_snap:
            snaps[:] = u[:, None, :]
        outs.append((uu, sq_hist, snaps, np.full(B, -1, dtype=np.int64)))
    kargs = [_kernel_args(p) for p in params_list]
    for c0 in range(0, n_steps, CHUNK_STEPS):
        c1 = min(n_steps, c0 + CHUNK_STEPS)
        dW = np.zeros((B, c1 - c0))
        _fill_noise(dW, gens, start, c0, c1, sqdt)
        times = origin + np.arange(c0, c1) * dt
        for p, ka, (uu, sq_hist, snaps, blown) in zip(params_list, kargs, outs):
            g_amp = p.g.amplitude * p.g.time_factor(times) if p.g.family != "zero" else np.zeros(c1 - c0)
            _advance(uu, start, c0, c1, origin, dt, dW, ka["lam"], ka["nu"], ka["pexp"], ka["eps"],
                     ka["delta"], ka["sig_code"], np.ascontiguousarray(g_amp, dtype=float), ka["g_mask"],
                     rec_every, sq_hist, snap_slot, snaps, blown)
    return outs


def integrate(
    u0,
    start_times,
    t_end: float,
    dt: float,
    params: ModelParams | Sequence[ModelParams],
    seed: int,
    stream_ids=None,
    record_every: int = 0,
    snap_times=None,
    threads: int = 1,
):
    """Integrate a batch of rows, each from its own start time to ``t_end``.

    All rows share the grid ``origin + k dt`` with ``origin = min(start_times)``.
    Row ``j`` holds ``u0[j]`` until its start step and is then driven by the
    Brownian path keyed ``(seed, stream_ids[j])``.  If ``params`` is a sequence
    every parameter set is integrated against the same paths and a list of
    results is returned.
    """
    if not dt > 0:
        raise ParameterError("dt must be > 0")
    multi = not isinstance(params, ModelParams)
    params_list = list(params) if multi else [params]
    p0 = params_list[0]
    for p in params_list[1:]:
        if p.size != p0.size:
            raise ParameterError("coupled parameter sets must share trunc_radius")
    u0 = as_state(u0, p0)
    if u0.ndim == 1:
        u0 = u0[None, :]
    B = u0.shape[0]
    start_times = np.broadcast_to(np.asarray(start_times, dtype=float), (B,)).copy()
    origin = float(start_times.min())
    if t_end < start_times.max() - 0.5 * dt:
        raise ParameterError("t_end precedes a start time")
    start = _grid_steps(origin, start_times, dt)
    n_steps = int(_grid_steps(origin, t_end, dt))
    if stream_ids is None:
        stream_ids = np.arange(B)
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    if stream_ids.shape != (B,):
        raise ParameterError("one stream id per row is required")

    n_rec = n_steps // record_every + 1 if record_every > 0 else 0
    snap_slot = np.full(n_steps + 1, -1, dtype=np.int64)
    snap_steps = np.empty(0, dtype=np.int64)
    if snap_times is not None:
        snap_steps = _grid_steps(origin, snap_times, dt)
        if np.any(snap_steps < 0) or np.any(snap_steps > n_steps):
            raise ParameterError("snapshot times outside the integration window")
        if np.any(np.diff(snap_steps) <= 0):
            raise ParameterError("snapshot times must be strictly increasing on the grid")
        snap_slot[snap_steps] = np.arange(len(snap_steps))
    n_snap = len(snap_steps)

    blocks = [(a, min(B, a + BLOCK_ROWS)) for a in range(0, B, BLOCK_ROWS)]

    def work(block):
        a, b = block
        return _run_block(
            u0[a:b].copy(), start[a:b], n_steps, origin, dt, params_list, seed,
            [int(s) for s in stream_ids[a:b]], record_every, n_rec, snap_slot, n_snap,
        )

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    results = []
    for v, p in enumerate(params_list):
        final = np.concatenate([part[v][0] for part in parts])
        sq_hist = np.concatenate([part[v][1] for part in parts])
        snaps = np.concatenate([part[v][2] for part in parts])
        blown = np.concatenate([part[v][3] for part in parts])
        if np.any(blown >= 0):
            bad = np.flatnonzero(blown >= 0)
            raise IntegratorBlowup(
                [(int(stream_ids[j]), origin + blown[j] * dt, float("inf")) for j in bad]
            )
        results.append(
            EnsembleResult(
                final=final,
                start_times=origin + start * dt,
                t_end=origin + n_steps * dt,
                stream_ids=stream_ids,
                record_times=origin + np.arange(n_rec) * record_every * dt if record_every > 0 else None,
                sq_hist=sq_hist if record_every > 0 else None,
                snap_times=origin + snap_steps * dt if n_snap else None,
                snaps=snaps if n_snap else None,
                meta={"seed": int(seed), "dt": float(dt), "origin": origin, "n_steps": n_steps, "params": p},
            )
        )
    return results if multi else results[0]


def simulate(u0, tau: float, t_end: float, dt: float, params: ModelParams, seed: int, stream_id: int = 0) -> Trajectory:
    """Full trajectory on the grid ``tau + k dt`` up to the snapped ``t_end``."""
    if t_end < tau:
        raise ParameterError("t_end must be >= tau")
    n = int(_grid_steps(tau, t_end, dt))
    times = tau + np.arange(n + 1) * dt
    res = integrate(u0, tau, t_end, dt, params, seed, [stream_id], snap_times=times)
    return Trajectory(times, res.snaps[0], params, int(seed), int(stream_id))


def simulate_coupled(u0, tau, t_end, dt, params_a: ModelParams, params_b: ModelParams, seed: int, stream_id: int = 0):
    """Two trajectories that differ only in ``epsilon`` and share one Brownian path."""
    if not params_a.same_except_epsilon(params_b):
        raise ParameterError("coupled parameter sets may differ only in epsilon")
    return simulate(u0, tau, t_end, dt, params_a, seed, stream_id), simulate(u0, tau, t_end, dt, params_b, seed, stream_id)


def run_ensemble(
    u0_sampler: np.ndarray | Callable[[int], np.ndarray],
    tau: float,
    t_end: float,
    dt: float,
    params: ModelParams,
    M: int,
    master_seed: int,
    threads: int = 1,
    trajectories: bool = False,
):
    """``M`` independent runs with stream ids ``0..M-1``.

    ``u0_sampler`` is a fixed state, an ``(M, N)`` array, or a callable
    mapping a stream id to its initial state.  Returns the ``(M, N)`` final
    states, or the full :class:`EnsembleResult` with every grid state when
    ``trajectories`` is set.
    """
    if M < 1:
        raise ParameterError("ensemble size M must be >= 1")
    if callable(u0_sampler):
        u0 = np.stack([np.asarray(u0_sampler(j), dtype=float) for j in range(M)])
    else:
        u0 = np.broadcast_to(np.asarray(u0_sampler, dtype=float), (M, params.size)).copy()
    snap_times = None
    if trajectories:
        n = int(_grid_steps(tau, t_end, dt))
        snap_times = tau + np.arange(n + 1) * dt
    res = integrate(u0, tau, t_end, dt, params, master_seed, np.arange(M), snap_times=snap_times, threads=threads)
    return res if trajectories else res.final
