"""Configured experiment runs with manifests that replay bit-exactly."""
from __future__ import annotations

import copy
import logging
import math
import os
import platform
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import estimates, lab, measures, sde
from .io import (
    read_json,
    sha256_file,
    write_csv,
    write_frame,
    write_json,
    write_measure_csv,
    write_trajectory_csv,
    load_toml,
)
from .model import ModelParams, ParameterError, basis_state, param_violations, DiffusionSpec, ForcingSpec

log = logging.getLogger(__name__)

__all__ = [
    "KINDS",
    "EXIT_PASS",
    "EXIT_FAIL",
    "EXIT_CONFIG",
    "EXIT_NUMERIC",
    "ExperimentConfig",
    "RunManifest",
    "ReplayMismatch",
    "default_config",
    "load_config",
    "validate",
    "run",
    "replay",
]

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "EVOMEASURE_OUT"
MANIFEST_NAME = "manifest.json"
MAX_SEED = 1 << 64

KINDS = (
    "simulate",
    "kb_measure",
    "moment_check",
    "time_average_check",
    "tail_check",
    "tightness",
    "cip",
    "feller",
    "ck_check",
    "limit_stability",
)

DEFAULT_PARAMS = {
    "lambda": 1.0,
    "nu": 1.0,
    "p": 3.0,
    "delta": 1.0,
    "epsilon": 0.5,
    "trunc_radius": 20,
    "sigma": {"family": "tanh_bounded", "params": {}},
    "g": {"family": "gaussian_decay", "params": {"a": 1.0, "b": 0.05, "r": 3}},
}

DEFAULT_NUMERICS = {"dt": 1e-3, "M": 2000, "k": 20, "m": 2, "tau_step": 0.25}

# kind-specific options; every key here may be overridden under [experiment]
DEFAULT_EXPERIMENT: dict[str, dict[str, Any]] = {
    "simulate": {"u0": {"basis": 0, "value": 1.0}, "tau": 0.0, "t_end": 5.0, "stream_id": 0},
    "kb_measure": {"M_per_node": 28},
    "moment_check": {"u0": {"basis": 0, "value": 1.0}, "tau": -5.0, "offsets": [1.0, 5.0, 10.0],
                     "eps_fractions": [0.0, 0.5, 1.0], "slack": 0.1},
    "time_average_check": {"u0": {"basis": 0, "value": 1.0}, "t": 0.0, "k_list": [5, 10, 20], "M_per_node": 25,
                           "eps_fractions": [0.0, 0.5, 1.0], "slack": 0.1},
    "tail_check": {"t": 0.0, "k": [10], "n_list": [4, 8, 12, 16, 21], "M_per_node": 25,
                   "eps_fractions": [0.0, 0.5, 1.0], "u0_set": "default"},
    "tightness": {"delta": 0.05, "max_level": 8, "M_per_node": 28, "eps_fractions": [0.0, 0.5, 1.0]},
    "cip": {"epsilon0": 0.25, "offsets": [0.1, 0.05, 0.025], "tau": 0.0, "t": 1.0, "threshold": 0.1,
            "n_grid": 16, "uniform_in_t": False, "M": 1000},
    "feller": {"tau": 0.0, "t": 1.0, "base": {"basis": 0, "value": 1.0}, "h_list": [0.4, 0.2, 0.1, 0.05, 0.0]},
    "ck_check": {"tau": 0.0, "r": 0.5, "t": 1.5, "u0": {"basis": 0, "value": 1.0}},
    "limit_stability": {"n_max": 4, "times_offsets": [0.0, 2.0, 5.0], "M_per_node": 28, "defect_pairs": 3,
                        "replicas": 1},
}


def default_config(kind: str, seed: int = 20240521) -> dict:
    if kind not in KINDS:
        raise ParameterError(f"unknown experiment kind {kind!r}")
    return {
        "kind": kind,
        "seed": seed,
        "params": copy.deepcopy(DEFAULT_PARAMS),
        "numerics": dict(DEFAULT_NUMERICS),
        "experiment": copy.deepcopy(DEFAULT_EXPERIMENT[kind]),
    }


@dataclass
class ExperimentConfig:
    kind: str
    params: ModelParams
    numerics: dict
    experiment: dict
    seed: int
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.numerics["dt"])

    @property
    def M(self) -> int:
        return int(self.numerics["M"])


def _merged(cfg: dict) -> dict:
    kind = cfg.get("kind")
    out = default_config(kind) if kind in KINDS else {"kind": kind, "params": {}, "numerics": {}, "experiment": {}}
    for key in ("seed", "output_dir"):
        if key in cfg:
            out[key] = cfg[key]
    params = cfg.get("params", {})
    for key, val in params.items():
        if key in ("sigma", "g") and isinstance(val, dict):
            out["params"][key] = {"family": val.get("family", out["params"].get(key, {}).get("family")),
                                  "params": dict(val.get("params", {}))}
        else:
            out["params"][key] = val
    out["numerics"].update(cfg.get("numerics", {}))
    out["experiment"].update(cfg.get("experiment", {}))
    return out


def _seed_value(seed) -> int | None:
    try:
        s = int(seed)
    except (TypeError, ValueError):
        return None
    return s if 0 <= s < MAX_SEED else None


def validate(cfg: dict) -> list[str]:
    """All configuration problems; an empty list means the config is runnable."""
    out = []
    if cfg.get("kind") not in KINDS:
        return [f"kind must be one of {', '.join(KINDS)}; got {cfg.get('kind')!r}"]
    full = _merged(cfg)
    if _seed_value(full.get("seed")) is None:
        out.append("seed must be an unsigned 64-bit integer")
    p = full["params"]
    missing = [k for k in ("lambda", "nu", "p", "delta", "epsilon", "trunc_radius") if k not in p]
    if missing:
        return out + [f"params missing {', '.join(missing)}"]
    try:
        sigma = DiffusionSpec(p["sigma"]["family"], p["sigma"].get("params", {}))
        g = ForcingSpec(p["g"]["family"], p["g"].get("params", {}))
    except (ParameterError, KeyError, TypeError) as exc:
        return out + [f"bad sigma/g spec: {exc}"]
    try:
        lam, nu, pp, delta, eps = (float(p[k]) for k in ("lambda", "nu", "p", "delta", "epsilon"))
    except (TypeError, ValueError):
        return out + ["lambda, nu, p, delta, epsilon must be numbers"]
    radius = p["trunc_radius"]
    out += param_violations(lam, nu, pp, delta, eps, radius, sigma, g)
    num = full["numerics"]
    if not float(num.get("dt", 0)) > 0:
        out.append("numerics.dt must be > 0")
    if not int(num.get("M", 0)) >= 1:
        out.append("numerics.M must be >= 1")
    if not float(num.get("k", 0)) > float(num.get("m", 0)) >= 0:
        out.append("numerics need k > m >= 0")
    if not float(num.get("tau_step", 0)) > 0:
        out.append("numerics.tau_step must be > 0")
    ex = full["experiment"]
    kind = full["kind"]
    top = math.sqrt(lam) / (2 * delta) if lam > 0 and delta > 0 else float("nan")
    if kind == "simulate" and float(ex["t_end"]) < float(ex["tau"]):
        out.append("experiment.t_end must be >= experiment.tau")
    if kind == "cip":
        for e in [float(ex["epsilon0"])] + [float(ex["epsilon0"]) + float(o) for o in ex["offsets"]]:
            if not 0 <= e <= top * (1 + 1e-12):
                out.append(f"cip noise intensity {e:g} outside the admissible range [0, sqrt(lambda)/(2 delta)]")
    if kind == "ck_check" and not float(ex["tau"]) <= float(ex["r"]) <= float(ex["t"]):
        out.append("ck_check needs tau <= r <= t")
    if kind == "tail_check" and any(int(n) < 0 for n in ex["n_list"]):
        out.append("tail_check n_list must be nonnegative")
    if kind == "tightness" and not 0 < float(ex["delta"]) < 1:
        out.append("tightness delta must lie in (0, 1)")
    if kind == "limit_stability" and int(ex["n_max"]) < 2:
        out.append("limit_stability needs n_max >= 2")
    return out


def load_config(source) -> ExperimentConfig:
    """Parse a TOML file (or an already-loaded dict) into a validated config."""
    cfg = load_toml(source) if not isinstance(source, dict) else source
    problems = validate(cfg)
    if problems:
        raise ParameterError("; ".join(problems))
    full = _merged(cfg)
    return ExperimentConfig(
        kind=full["kind"],
        params=ModelParams.from_dict(full["params"]),
        numerics=full["numerics"],
        experiment=full["experiment"],
        seed=int(full["seed"]),
        raw=full,
    )


# -- experiment runners ---------------------------------------------------------------


def _state(spec, params: ModelParams) -> np.ndarray:
    if spec in ("zero", None):
        return np.zeros(params.size)
    if isinstance(spec, dict):
        return basis_state(params, int(spec.get("basis", 0)), float(spec.get("value", 1.0)))
    arr = np.asarray(spec, dtype=float)
    if arr.shape != (params.size,):
        raise ParameterError("explicit u0 must list 2I+1 values")
    return arr


def _eps_grid(params: ModelParams, fractions) -> list[float]:
    return [float(f) * params.epsilon_max for f in fractions]


def _bound_files(out: Path, report: estimates.BoundReport) -> list[Path]:
    return [
        write_csv(out / "report.csv", ("quantity", "lhs", "lhs_ci_lo", "lhs_ci_hi", "rhs", "pass"),
                  (r.as_tuple() for r in report.rows)),
        write_json(out / "report.json", report.to_dict()),
    ]


def _lab_files(out: Path, report: lab.LabReport, extra: dict | None = None) -> list[Path]:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    return [
        write_csv(out / "report.csv", ("criterion", "value", "ci_lo", "ci_hi", "pass"),
                  (c.as_tuple() for c in report.criteria)),
        write_json(out / "report.json", payload),
    ]


def _run_simulate(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    u0 = _state(ex["u0"], cfg.params)
    traj = sde.simulate(u0, float(ex["tau"]), float(ex["t_end"]), cfg.dt, cfg.params, cfg.seed, int(ex["stream_id"]))
    files = [write_trajectory_csv(out / "trajectory.csv", traj.times, traj.states),
             write_frame(out / "trajectory.bin", traj.states)]
    rep = lab.LabReport([lab.Criterion("final_sq_norm", float(np.sum(traj.final**2)), 0.0, 0.0, True)])
    return files + _lab_files(out, rep), True


def _run_kb(cfg: ExperimentConfig, out: Path, threads: int):
    n = cfg.numerics
    mu = measures.kb_measure(cfg.params, n["k"], n["m"], int(cfg.experiment["M_per_node"]), cfg.dt, cfg.seed,
                             tau_step=n["tau_step"], threads=threads)
    files = [write_measure_csv(out / "measure.csv", mu), out / "measure.provenance.json"]
    second = mu.expect(lambda x: np.sum(x * x, axis=1))
    rep = lab.LabReport([lab.Criterion("atoms", float(mu.size), 0.0, 0.0, True),
                         lab.Criterion("mean_sq_norm", second, 0.0, 0.0, True)])
    return files + _lab_files(out, rep), True


def _run_moment(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    u0 = _state(ex["u0"], cfg.params)
    tau = float(ex["tau"])
    rows, passed = [], True
    payload = []
    for e in _eps_grid(cfg.params, ex["eps_fractions"]):
        rep = estimates.moment_bound_check(cfg.params.with_epsilon(e), u0, tau, [tau + o for o in ex["offsets"]],
                                           cfg.dt, cfg.M, sde.derive_seed(cfg.seed, "moment", e),
                                           slack=float(ex["slack"]), threads=threads)
        for r in rep.rows:
            r.quantity = f"{r.quantity},eps={e:g}"
        rows.extend(rep.rows)
        payload.append(rep.to_dict())
        passed &= rep.passed
    merged = estimates.BoundReport(rows, cfg.params.to_dict(), {"c": "2*eps^2"}, {"per_epsilon": payload})
    return _bound_files(out, merged), passed


def _run_time_average(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    rep = estimates.time_average_bound_check(
        cfg.params, _state(ex["u0"], cfg.params), float(ex["t"]), ex["k_list"], cfg.dt, int(ex["M_per_node"]),
        cfg.seed, eps_grid=_eps_grid(cfg.params, ex["eps_fractions"]), tau_step=cfg.numerics["tau_step"],
        slack=float(ex["slack"]), threads=threads)
    return _bound_files(out, rep), rep.passed


def default_u0_set(params: ModelParams) -> list[np.ndarray]:
    """Four points of a compact set: basis vectors and a spread-out profile."""
    spread = np.exp(-0.5 * np.abs(np.arange(params.size) - params.trunc_radius))
    return [
        basis_state(params, 0, 1.0),
        basis_state(params, 0, 2.0),
        basis_state(params, 0, 0.5) + basis_state(params, 2, -0.5),
        spread / np.linalg.norm(spread),
    ]


def _run_tail(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    u0_set = default_u0_set(cfg.params) if ex["u0_set"] == "default" else [_state(s, cfg.params) for s in ex["u0_set"]]
    rep = estimates.tail_average_check(cfg.params, u0_set, float(ex["t"]), ex["n_list"], ex["k"], cfg.dt,
                                       int(ex["M_per_node"]), cfg.seed,
                                       eps_grid=_eps_grid(cfg.params, ex["eps_fractions"]),
                                       tau_step=cfg.numerics["tau_step"], threads=threads)
    return _bound_files(out, rep), rep.passed


def _run_tightness(cfg: ExperimentConfig, out: Path, threads: int):
    ex, n = cfg.experiment, cfg.numerics
    delta = float(ex["delta"])
    spec = estimates.calibrate_compact_set(cfg.params, delta, n["k"], n["m"], cfg.dt, int(ex["M_per_node"]),
                                           sde.derive_seed(cfg.seed, "calibrate"), max_level=int(ex["max_level"]),
                                           eps_grid=_eps_grid(cfg.params, ex["eps_fractions"]),
                                           tau_step=n["tau_step"], threads=threads)
    holdout = measures.kb_measure(cfg.params, n["k"], n["m"], int(ex["M_per_node"]), cfg.dt,
                                  sde.derive_seed(cfg.seed, "holdout"), tau_step=n["tau_step"], threads=threads)
    mass = estimates.tightness_mass(holdout, spec)
    rep = lab.LabReport([lab.Criterion("mass_outside_compact", mass, 0.0, delta, mass < delta)],
                        {"epsilon": cfg.params.epsilon})
    files = [write_json(out / "compact_set.json", spec.to_dict())]
    return files + _lab_files(out, rep), rep.passed


def _run_cip(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    p0 = cfg.params.with_epsilon(float(ex["epsilon0"]))
    grid = lab.default_k_grid(p0, int(ex["n_grid"]), seed=cfg.seed)
    rep = lab.cip_trend(p0, ex["offsets"], float(ex["tau"]), float(ex["t"]), float(ex["threshold"]), grid,
                        int(ex["M"]), cfg.dt, cfg.seed, uniform_in_t=bool(ex["uniform_in_t"]), threads=threads)
    return _lab_files(out, rep), rep.passed


def _run_feller(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    x = _state(ex["base"], cfg.params)
    direction = basis_state(cfg.params, 1, 1.0)
    pairs = [(x, x + h * direction) for h in ex["h_list"]]
    rep = lab.feller_probe(cfg.params, float(ex["tau"]), float(ex["t"]), pairs, cfg.M, cfg.dt, cfg.seed,
                           threads=threads)
    return _lab_files(out, rep), rep.passed


def _run_ck(cfg: ExperimentConfig, out: Path, threads: int):
    ex = cfg.experiment
    rep = lab.chapman_kolmogorov_check(cfg.params, float(ex["tau"]), float(ex["r"]), float(ex["t"]),
                                       _state(ex["u0"], cfg.params), cfg.M, cfg.dt, cfg.seed, threads=threads)
    return _lab_files(out, rep), rep.passed


def _run_limit(cfg: ExperimentConfig, out: Path, threads: int):
    ex, n = cfg.experiment, cfg.numerics
    eps0 = cfg.params.epsilon
    orders = list(range(1, int(ex["n_max"]) + 1))
    eps_seq = [eps0 * (1 - 2.0**-j) for j in orders]
    times = [-float(n["m"]) + float(o) for o in ex["times_offsets"]]
    rep = lab.limit_stability_experiment(cfg.params, eps_seq, n["m"], n["k"], times, cfg.dt, int(ex["M_per_node"]),
                                         cfg.seed, tau_step=n["tau_step"], n_defect_pairs=int(ex["defect_pairs"]),
                                         R=int(ex["replicas"]), threads=threads)
    header = ["n", "epsilon"] + [f"energy@t={t:g}" for t in rep.times]
    table = [[j, e] + [rep.distances[f"{e:g}@{t:g}"]["energy"] for t in rep.times] for j, e in zip(orders, eps_seq)]
    long_rows = [(j, e, t, d["energy"], d["w1_sq_norm"], d["w1_u0"], d["panel_max_gap"])
                 for j, e in zip(orders, eps_seq) for t in rep.times for d in [rep.distances[f"{e:g}@{t:g}"]]]
    files = [
        write_csv(out / "distances.csv", header, table),
        write_csv(out / "distances_long.csv", ("n", "epsilon", "t", "energy", "w1_sq_norm", "w1_u0", "panel_max_gap"),
                  long_rows),
    ]
    extra = {"epsilons": rep.epsilons, "times": rep.times, "distances": rep.distances, "defects": rep.defects}
    return files + _lab_files(out, rep, extra), rep.passed


RUNNERS: dict[str, Callable] = {
    "simulate": _run_simulate,
    "kb_measure": _run_kb,
    "moment_check": _run_moment,
    "time_average_check": _run_time_average,
    "tail_check": _run_tail,
    "tightness": _run_tightness,
    "cip": _run_cip,
    "feller": _run_feller,
    "ck_check": _run_ck,
    "limit_stability": _run_limit,
}


# -- manifests -------------------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    outputs: list[dict]
    exit_code: int
    status: str
    timing: dict = field(default_factory=dict)
    tool: dict = field(default_factory=dict)
    path: Path | None = None

    def to_dict(self) -> dict:
        return {"config": self.config, "outputs": self.outputs, "exit_code": self.exit_code, "status": self.status,
                "timing": self.timing, "tool": self.tool}

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = read_json(path)
        return cls(d["config"], d["outputs"], d["exit_code"], d["status"], d.get("timing", {}), d.get("tool", {}),
                   Path(path))

    def checksums(self) -> dict[str, str]:
        return {o["path"]: o["sha256"] for o in self.outputs}


class ReplayMismatch(RuntimeError):
    def __init__(self, mismatches):
        self.mismatches = mismatches
        super().__init__("replay differs from manifest: " + ", ".join(mismatches))


def default_output_dir(kind: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "evomeasure-out")) / kind


def run(config: ExperimentConfig | dict, out_dir=None, threads: int = 1) -> RunManifest:
    """Execute one experiment, write its data files and ``manifest.json``.

    Numerical blow-ups are recorded in the manifest with exit code 3 instead
    of propagating.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir) if out_dir is not None else Path(cfg.raw.get("output_dir") or default_output_dir(cfg.kind))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        files, passed = RUNNERS[cfg.kind](cfg, out, max(1, int(threads)))
        code = EXIT_PASS if passed else EXIT_FAIL
        status = "pass" if passed else "criteria_failed"
    except sde.IntegratorBlowup as exc:
        log.error("numerical failure: %s", exc)
        files = sorted(p for p in out.iterdir() if p.name != MANIFEST_NAME)
        code, status = EXIT_NUMERIC, f"numerical_failure (partial outputs): {exc}"
    outputs = [{"path": Path(f).name, "sha256": sha256_file(f), "bytes": Path(f).stat().st_size}
               for f in sorted(set(map(Path, files)))]
    manifest = RunManifest(
        config=cfg.raw,
        outputs=outputs,
        exit_code=code,
        status=status,
        timing={"started": started, "seconds": time.perf_counter() - t0, "threads": int(threads)},
        tool={"name": "evomeasure", "version": __version__, "python": platform.python_version(),
              "numpy": np.__version__},
    )
    manifest.path = write_json(out / MANIFEST_NAME, manifest.to_dict())
    return manifest


def replay(manifest_path, out_dir=None, threads: int = 1) -> RunManifest:
    """Re-run the embedded config and require identical checksums for every output."""
    original = RunManifest.load(manifest_path)
    tmp = None
    if out_dir is None:
        tmp = tempfile.mkdtemp(prefix="evomeasure-replay-")
        out_dir = tmp
    try:
        fresh = run(original.config, out_dir, threads=threads)
        old, new = original.checksums(), fresh.checksums()
        bad = sorted(k for k in old.keys() | new.keys() if old.get(k) != new.get(k))
        if bad:
            raise ReplayMismatch(bad)
        return fresh
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
