"""Lattice reaction-diffusion model: parameters, drift, diffusion and norms.

States are plain float64 arrays of length ``2I + 1``; entry ``j`` is the
value at lattice site ``i = j - I``.  Leading batch axes are allowed
everywhere except where noted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.special import erfc, erfcx

__all__ = [
    "ParameterError",
    "ForcingSpec",
    "DiffusionSpec",
    "ModelParams",
    "param_violations",
    "as_state",
    "zero_state",
    "basis_state",
    "site_indices",
    "drift",
    "diffusion",
    "sq_norm",
    "tail_sq_norm",
    "truncation_split",
]


class ParameterError(ValueError):
    """Raised for invalid model parameters or malformed states."""


FORCING_FAMILIES = ("zero", "gaussian_decay", "exp_past_decay")
DIFFUSION_FAMILIES = ("zero", "tanh_bounded", "linear_saturated")


@dataclass(frozen=True)
class ForcingSpec:
    """Site-localized time forcing ``g_i(t) = a * h(t) * 1{|i| <= r}``.

    ``gaussian_decay`` uses ``h(t) = exp(-b t^2)`` and ``exp_past_decay``
    uses ``h(t) = exp(c t)``.
    """

    family: str = "zero"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        problems = self.violations()
        if problems:
            raise ParameterError("; ".join(problems))

    def violations(self, lam: float | None = None) -> list[str]:
        out = []
        if self.family not in FORCING_FAMILIES:
            return [f"unknown forcing family {self.family!r}"]
        if self.family == "zero":
            return out
        need = {"gaussian_decay": ("a", "b", "r"), "exp_past_decay": ("a", "c", "r")}[self.family]
        missing = [k for k in need if k not in self.params]
        if missing:
            return [f"g.params missing {', '.join(missing)}"]
        if self.params["a"] < 0:
            out.append("g.params.a must be >= 0")
        r = self.params["r"]
        if r < 0 or int(r) != r:
            out.append("g.params.r must be a nonnegative integer")
        if self.family == "gaussian_decay" and self.params["b"] <= 0:
            out.append("g.params.b must be > 0")
        if self.family == "exp_past_decay" and lam is not None and not lam + 2 * self.params["c"] > 0:
            out.append("g.params.c must exceed -lambda/2 for the past-weighted integral to be finite")
        return out

    @property
    def amplitude(self) -> float:
        return float(self.params.get("a", 0.0))

    @property
    def support(self) -> int:
        return int(self.params.get("r", 0))

    def time_factor(self, t):
        """``h(t)``, vectorized over ``t``."""
        t = np.asarray(t, dtype=float)
        if self.family == "gaussian_decay":
            return np.exp(-self.params["b"] * t * t)
        if self.family == "exp_past_decay":
            return np.exp(self.params["c"] * t)
        return np.zeros_like(t)

    def support_mask(self, trunc_radius: int) -> np.ndarray:
        i = site_indices(trunc_radius)
        if self.family == "zero":
            return np.zeros(i.shape, dtype=bool)
        return np.abs(i) <= self.support

    def profile(self, t: float, trunc_radius: int) -> np.ndarray:
        """The vector ``(g_i(t))_i`` on the truncated lattice."""
        return self.amplitude * float(self.time_factor(t)) * self.support_mask(trunc_radius)

    def site_count(self, trunc_radius: int, n: int = 0) -> int:
        """Number of supported sites with ``|i| >= n``."""
        if self.family == "zero" or self.amplitude == 0.0:
            return 0
        r = min(self.support, trunc_radius)
        if n <= 0:
            return 2 * r + 1
        return 2 * max(0, r - n + 1)

    def sq_norm(self, t, trunc_radius: int, n: int = 0):
        """``sum_{|i| >= n} g_i(t)^2``."""
        return self.site_count(trunc_radius, n) * self.amplitude**2 * self.time_factor(t) ** 2

    def _past_weighted_factor(self, t: float, lam: float) -> float:
        # int_{-inf}^t exp(lam (r - t)) h(r)^2 dr
        if self.family == "zero":
            return 0.0
        if self.family == "exp_past_decay":
            c = self.params["c"]
            return math.exp(2 * c * t) / (lam + 2 * c)
        b = self.params["b"]
        mu = lam / (4 * b)
        z = -math.sqrt(2 * b) * (t - mu)
        scale = 0.5 * math.sqrt(math.pi / (2 * b))
        if z > 0:
            return scale * float(erfcx(z)) * math.exp(-2 * b * t * t)
        return scale * float(erfc(z)) * math.exp(-lam * t + lam * lam / (8 * b))

    def past_weighted_integral(self, t: float, lam: float, trunc_radius: int, n: int = 0) -> float:
        """Closed form of ``int_{-inf}^t e^{lam (r-t)} sum_{|i|>=n} g_i(r)^2 dr``."""
        count = self.site_count(trunc_radius, n)
        if count == 0:
            return 0.0
        return count * self.amplitude**2 * self._past_weighted_factor(t, lam)

    def window_weighted_integral(self, tau: float, t: float, lam: float, trunc_radius: int, n: int = 0) -> float:
        """Closed form of ``int_tau^t e^{lam (r-t)} sum_{|i|>=n} g_i(r)^2 dr``."""
        full = self.past_weighted_integral(t, lam, trunc_radius, n)
        head = self.past_weighted_integral(tau, lam, trunc_radius, n)
        return full - math.exp(lam * (tau - t)) * head

    def hypothesis_integral(self, t: float, lam: float, trunc_radius: int) -> float:
        """``int_{-inf}^t e^{lam r} ||g(r)||^2 dr``; finite for every valid spec."""
        if self.family == "exp_past_decay":
            c = self.params["c"]
            count = self.site_count(trunc_radius)
            return count * self.amplitude**2 * math.exp((lam + 2 * c) * t) / (lam + 2 * c)
        return math.exp(lam * t) * self.past_weighted_integral(t, lam, trunc_radius)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "params": dict(self.params)}


@dataclass(frozen=True)
class DiffusionSpec:
    """Per-site noise coefficient ``sigma_i(t, s)``.

    ``tanh_bounded``: ``delta * tanh(s) + g_i(t)``;
    ``linear_saturated``: ``delta * s / (1 + s^2) + g_i(t)``; ``zero``: 0.
    Both nonzero families satisfy ``|sigma_i(t, s)| <= delta |s| + g_i(t)``.
    """

    family: str = "tanh_bounded"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        if self.family not in DIFFUSION_FAMILIES:
            raise ParameterError(f"unknown diffusion family {self.family!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "params": dict(self.params)}


def max_epsilon(lam: float, delta: float) -> float:
    return math.sqrt(lam) / (2.0 * delta)


def param_violations(
    lam, nu, p, delta, epsilon, trunc_radius, sigma: DiffusionSpec | None = None, g: ForcingSpec | None = None
) -> list[str]:
    """Every violated range constraint, as human-readable messages."""
    out = []
    if not lam > 0:
        out.append("lambda must be > 0")
    if not nu > 0:
        out.append("nu must be > 0")
    if not p > 2:
        out.append("p must be > 2 (superlinear nonlinearity |u|^(p-2) u)")
    if not delta > 0:
        out.append("delta must be > 0")
    if not (isinstance(trunc_radius, (int, np.integer)) and trunc_radius > 0):
        out.append("trunc_radius must be a positive integer")
    if lam > 0 and delta > 0:
        top = max_epsilon(lam, delta)
        if not 0 <= epsilon <= top * (1 + 1e-12):
            out.append(
                f"epsilon={epsilon} outside the admissible noise range [0, sqrt(lambda)/(2 delta)] = [0, {top:.6g}]"
            )
    if g is not None:
        out.extend(g.violations(lam if lam > 0 else None))
        if g.family != "zero" and isinstance(trunc_radius, (int, np.integer)) and g.support > trunc_radius:
            out.append("g.params.r must not exceed trunc_radius")
    return out


@dataclass(frozen=True)
class ModelParams:
    lam: float = 1.0
    nu: float = 1.0
    p: float = 3.0
    delta: float = 1.0
    epsilon: float = 0.0
    sigma: DiffusionSpec = field(default_factory=DiffusionSpec)
    g: ForcingSpec = field(default_factory=ForcingSpec)
    trunc_radius: int = 20

    def __post_init__(self):
        problems = param_violations(
            self.lam, self.nu, self.p, self.delta, self.epsilon, self.trunc_radius, self.sigma, self.g
        )
        if problems:
            raise ParameterError("; ".join(problems))

    @property
    def size(self) -> int:
        return 2 * self.trunc_radius + 1

    @property
    def epsilon_max(self) -> float:
        return max_epsilon(self.lam, self.delta)

    def with_epsilon(self, epsilon: float) -> "ModelParams":
        return _replace(self, epsilon=float(epsilon))

    def with_forcing(self, g: ForcingSpec) -> "ModelParams":
        return _replace(self, g=g)

    def same_except_epsilon(self, other: "ModelParams") -> bool:
        return self.to_dict() | {"epsilon": 0} == other.to_dict() | {"epsilon": 0}

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "nu": self.nu,
            "p": self.p,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "trunc_radius": self.trunc_radius,
            "sigma": self.sigma.to_dict(),
            "g": self.g.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelParams":
        sigma = d.get("sigma", {})
        g = d.get("g", {})
        return cls(
            lam=float(d["lambda"]),
            nu=float(d["nu"]),
            p=float(d["p"]),
            delta=float(d["delta"]),
            epsilon=float(d["epsilon"]),
            trunc_radius=int(d["trunc_radius"]),
            sigma=DiffusionSpec(sigma.get("family", "tanh_bounded"), sigma.get("params", {})),
            g=ForcingSpec(g.get("family", "zero"), g.get("params", {})),
        )


def _replace(params: ModelParams, **changes) -> ModelParams:
    from dataclasses import replace

    return replace(params, **changes)


def site_indices(trunc_radius: int) -> np.ndarray:
    return np.arange(-trunc_radius, trunc_radius + 1)


def zero_state(params: ModelParams) -> np.ndarray:
    return np.zeros(params.size)


def basis_state(params: ModelParams, site: int, value: float = 1.0) -> np.ndarray:
    """``value * e_site``."""
    if abs(site) > params.trunc_radius:
        raise ParameterError(f"site {site} outside [-{params.trunc_radius}, {params.trunc_radius}]")
    u = zero_state(params)
    u[site + params.trunc_radius] = value
    return u


def as_state(u, params: ModelParams | None = None) -> np.ndarray:
    """Validate and return ``u`` as a float array (batch axes allowed)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        raise ParameterError("state must be at least one-dimensional")
    if params is not None and u.shape[-1] != params.size:
        raise ParameterError(f"state length {u.shape[-1]} does not match 2I+1 = {params.size}")
    if u.shape[-1] % 2 != 1:
        raise ParameterError("state length must be odd (sites -I..I)")
    if not np.all(np.isfinite(u)):
        raise ParameterError("state has non-finite entries")
    return u


def _radius(u: np.ndarray) -> int:
    return (u.shape[-1] - 1) // 2


def drift(u, t: float, params: ModelParams) -> np.ndarray:
    """``-lam u_i + nu (u_{i-1} - 2 u_i + u_{i+1}) - |u_i|^(p-2) u_i`` with zero padding."""
    u = as_state(u, params)
    lap = -2.0 * u
    lap[..., 1:] += u[..., :-1]
    lap[..., :-1] += u[..., 1:]
    return -params.lam * u + params.nu * lap - np.sign(u) * np.abs(u) ** (params.p - 1.0)


def sigma_values(u, t: float, params: ModelParams) -> np.ndarray:
    u = as_state(u, params)
    fam = params.sigma.family
    if fam == "zero":
        return np.zeros_like(u)
    g = params.g.profile(t, params.trunc_radius)
    if fam == "tanh_bounded":
        return params.delta * np.tanh(u) + g
    return params.delta * u / (1.0 + u * u) + g


def diffusion(u, t: float, params: ModelParams) -> np.ndarray:
    """Noise coefficient ``epsilon * sigma_i(t, u_i)`` multiplying the scalar ``dW``."""
    return params.epsilon * sigma_values(u, t, params)


def sq_norm(u) -> np.ndarray | float:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ParameterError("state has non-finite entries")
    return np.sum(u * u, axis=-1)


def tail_sq_norm(u, n: int):
    """``sum_{|i| >= n} u_i^2``."""
    if n < 0:
        raise ParameterError("tail index n must be >= 0")
    u = np.asarray(u, dtype=float)
    mask = np.abs(site_indices(_radius(u))) >= n
    return sq_norm(u[..., mask])


def truncation_split(u, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(inner, outer)`` with ``inner = u * 1{|i| <= n}`` and ``outer = u - inner``."""
    if n < 0:
        raise ParameterError("cut-off n must be >= 0")
    u = np.asarray(u, dtype=float)
    keep = np.abs(site_indices(_radius(u))) <= n
    inner = np.where(keep, u, 0.0)
    return inner, u - inner
