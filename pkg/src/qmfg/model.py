"""Problem description: coefficient functions, jump measure, scenarios.

Coefficients are scalar functions of ``(t, s, q, a)`` where ``s`` is the
agent state, ``q`` the current conditional quantile and ``a`` the control.
They must broadcast over numpy arrays in ``s`` and ``a``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np
from scipy import special

Coef = Callable[..., Any]
Policy = Callable[[float, Any, float], Any]

FD_REL_STEP = 1e-5
DERIVATIVE_TOL = 1e-5
QUAD_NODES = 256

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(n: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to ``[lo, hi]``."""
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    x, w = _GL_CACHE[n]
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def central_difference(fn: Callable[[Any], Any], s: Any) -> Any:
    s = np.asarray(s, dtype=float)
    h = FD_REL_STEP * (1.0 + np.abs(s))
    return (np.asarray(fn(s + h)) - np.asarray(fn(s - h))) / (2.0 * h)


# ---------------------------------------------------------------------------
# jump mark laws


class MarkLaw:
    """Probability law of jump marks (the normalized Levy density)."""

    kind = "abstract"
    discrete = False

    def pdf(self, theta):
        raise NotImplementedError

    def cdf(self, theta):
        raise NotImplementedError

    def ppf(self, u):
        raise NotImplementedError

    @property
    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    @property
    def symmetric(self) -> bool:
        raise NotImplementedError

    def std(self) -> float:
        nodes, w = self.quadrature()
        mean = np.sum(w * nodes)
        return float(np.sqrt(np.sum(w * (nodes - mean) ** 2)))

    def quadrature(self, n: int = QUAD_NODES) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and probability weights for integrals against the law."""
        lo, hi = self.support
        x, w = gauss_legendre(n, lo, hi)
        return x, w * self.pdf(x)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformMarks(MarkLaw):
    low: float = -1.0
    high: float = 1.0
    kind = "uniform"

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError("uniform marks need high > low")

    def pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        inside = (theta >= self.low) & (theta <= self.high)
        return np.where(inside, 1.0 / (self.high - self.low), 0.0)

    def cdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.clip((theta - self.low) / (self.high - self.low), 0.0, 1.0)

    def ppf(self, u):
        return self.low + (self.high - self.low) * np.asarray(u, dtype=float)

    @property
    def support(self):
        return (self.low, self.high)

    @property
    def symmetric(self):
        return math.isclose(self.low, -self.high, rel_tol=0.0, abs_tol=1e-15)

    def to_dict(self):
        return {"law": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class NormalMarks(MarkLaw):
    mean: float = 0.0
    std_dev: float = 1.0
    kind = "normal"

    def __post_init__(self):
        if not self.std_dev > 0:
            raise ValueError("normal marks need std_dev > 0")

    def pdf(self, theta):
        z = (np.asarray(theta, dtype=float) - self.mean) / self.std_dev
        return np.exp(-0.5 * z * z) / (self.std_dev * math.sqrt(2.0 * math.pi))

    def cdf(self, theta):
        z = (np.asarray(theta, dtype=float) - self.mean) / self.std_dev
        return special.ndtr(z)

    def ppf(self, u):
        from .quantile import inv_norm_cdf

        return self.mean + self.std_dev * inv_norm_cdf(u)

    @property
    def support(self):
        # beyond 10 sd the tail mass is below 2e-23
        return (self.mean - 10.0 * self.std_dev, self.mean + 10.0 * self.std_dev)

    @property
    def symmetric(self):
        return self.mean == 0.0

    def to_dict(self):
        return {"law": "normal", "mean": self.mean, "std": self.std_dev}


@dataclass(frozen=True)
class PointMarks(MarkLaw):
    value: float = 1.0
    kind = "point"
    discrete = True

    def pdf(self, theta):
        raise TypeError("point marks have no density")

    def cdf(self, theta):
        return np.where(np.asarray(theta, dtype=float) >= self.value, 1.0, 0.0)

    def ppf(self, u):
        return np.full(np.shape(u), self.value, dtype=float)

    @property
    def support(self):
        return (self.value, self.value)

    @property
    def symmetric(self):
        return self.value == 0.0

    def quadrature(self, n: int = QUAD_NODES):
        return np.array([self.value]), np.array([1.0])

    def std(self):
        return 0.0

    def to_dict(self):
        return {"law": "point", "value": self.value}


class TabulatedMarks(MarkLaw):
    """Mark law given by a density tabulated on a uniform grid (renormalized)."""

    kind = "tabulated"

    def __init__(self, theta: np.ndarray, density: np.ndarray, symmetric: bool = False):
        theta = np.asarray(theta, dtype=float)
        density = np.clip(np.asarray(density, dtype=float), 0.0, None)
        if theta.ndim != 1 or theta.size < 3 or np.any(np.diff(theta) <= 0):
            raise ValueError("tabulated marks need an increasing grid of >= 3 nodes")
        mass = np.trapezoid(density, theta)
        if not mass > 0:
            raise ValueError("tabulated mark density has no mass")
        self.theta = theta
        self.density = density / mass
        steps = 0.5 * (self.density[1:] + self.density[:-1]) * np.diff(theta)
        self._cdf = np.concatenate([[0.0], np.cumsum(steps)])
        self._cdf /= self._cdf[-1]
        self._symmetric = symmetric

    def pdf(self, theta):
        return np.interp(theta, self.theta, self.density, left=0.0, right=0.0)

    def cdf(self, theta):
        return np.interp(theta, self.theta, self._cdf, left=0.0, right=1.0)

    def ppf(self, u):
        return np.interp(u, self._cdf, self.theta)

    @property
    def support(self):
        return (float(self.theta[0]), float(self.theta[-1]))

    @property
    def symmetric(self):
        return self._symmetric

    def to_dict(self):
        return {"law": "tabulated", "theta": self.theta.tolist(), "density": self.density.tolist()}


def mark_law_from_dict(d: dict) -> MarkLaw:
    law = d.get("law")
    if law == "uniform":
        return UniformMarks(float(d.get("low", -1.0)), float(d.get("high", 1.0)))
    if law == "normal":
        return NormalMarks(float(d.get("mean", 0.0)), float(d.get("std", 1.0)))
    if law == "point":
        return PointMarks(float(d["value"]))
    if law == "tabulated":
        return TabulatedMarks(np.asarray(d["theta"]), np.asarray(d["density"]), bool(d.get("symmetric", False)))
    raise ValueError(f"unknown mark law {law!r}")


@dataclass(frozen=True)
class LevySpec:
    """Finite-activity Levy measure mu(d theta) = intensity * marks.pdf(theta) d theta."""

    intensity: float = 0.0
    marks: MarkLaw = field(default_factory=lambda: PointMarks(0.0))
    delta_max: float = 1.0

    @property
    def mark_density(self):
        return self.marks.pdf

    @property
    def mark_sampler(self):
        """Maps uniforms in (0, 1) to marks (inverse CDF)."""
        return self.marks.ppf

    @property
    def symmetric(self) -> bool:
        return self.marks.symmetric

    @property
    def exp_moment_bound(self) -> float:
        """E[exp(delta_max |theta|)] under the mark law."""
        nodes, w = self.marks.quadrature()
        return float(np.sum(w * np.exp(self.delta_max * np.abs(nodes))))

    def integrate(self, fn: Callable[[np.ndarray], Any]) -> float:
        """Integral of ``fn`` against mu (includes the intensity)."""
        if self.intensity == 0.0:
            return 0.0
        nodes, w = self.marks.quadrature()
        return float(self.intensity * np.sum(w * np.asarray(fn(nodes), dtype=float)))

    def mark_mass(self) -> float:
        if self.marks.discrete:
            return 1.0
        lo, hi = self.marks.support
        grid = np.linspace(lo, hi, 4097)
        return float(np.trapezoid(self.marks.pdf(grid), grid))

    def to_dict(self) -> dict:
        return {"intensity": self.intensity, "marks": self.marks.to_dict(), "delta_max": self.delta_max}

    @classmethod
    def from_dict(cls, d: dict | None) -> "LevySpec":
        if not d:
            return cls()
        marks = mark_law_from_dict(d["marks"]) if "marks" in d else PointMarks(0.0)
        return cls(float(d.get("intensity", 0.0)), marks, float(d.get("delta_max", 1.0)))


# ---------------------------------------------------------------------------
# coefficients


def _const(value: float) -> Coef:
    def fn(t, s, q, a):
        return np.full(np.shape(s), value, dtype=float) if np.ndim(s) else float(value)

    return fn


def _const_gamma(value: float) -> Coef:
    def fn(t, s, q, a, theta):
        return np.zeros(np.broadcast(np.asarray(s), np.asarray(theta)).shape) + value

    return fn


_ZERO = _const(0.0)


@dataclass(frozen=True)
class CoefficientSet:
    """Drift, idiosyncratic/common diffusion and jump size, with s-derivatives.

    A derivative left as ``None`` is replaced by a central difference with
    step ``1e-5 * (1 + |s|)``.  ``gamma_state_free`` declares that the jump
    size depends on ``theta`` (and possibly t, q) only, which lets the
    compensator be computed once per step instead of once per particle.
    """

    drift: Coef = _ZERO
    diff_idio: Coef = _ZERO
    diff_common: Coef = _ZERO
    jump_gamma: Coef = field(default_factory=lambda: _const_gamma(0.0))
    drift_s: Coef | None = None
    diff_idio_s: Coef | None = None
    diff_common_s: Coef | None = None
    jump_gamma_s: Coef | None = None
    gamma_state_free: bool = True
    spec: dict | None = None

    def _ds(self, name: str, t, s, q, a, *extra):
        analytic = getattr(self, name + "_s")
        if analytic is not None:
            return analytic(t, s, q, a, *extra)
        base = getattr(self, name)
        return central_difference(lambda x: base(t, x, q, a, *extra), s)

    def d_drift(self, t, s, q, a):
        return self._ds("drift", t, s, q, a)

    def d_diff_idio(self, t, s, q, a):
        return self._ds("diff_idio", t, s, q, a)

    def d_diff_common(self, t, s, q, a):
        return self._ds("diff_common", t, s, q, a)

    def d_jump_gamma(self, t, s, q, a, theta):
        return self._ds("jump_gamma", t, s, q, a, theta)

    @property
    def has_analytic_derivatives(self) -> bool:
        return any(getattr(self, n) is not None for n in ("drift_s", "diff_idio_s", "diff_common_s", "jump_gamma_s"))


def _named_drift(d: dict) -> tuple[Coef, Coef]:
    name = d["name"]
    if name == "zero":
        return _ZERO, _ZERO
    if name == "constant":
        v = float(d["value"])
        return _const(v), _ZERO
    if name == "tanh":
        delta = float(d.get("delta", 1.0))

        def b(t, s, q, a):
            return delta * np.tanh(delta * np.asarray(s, dtype=float))

        def b_s(t, s, q, a):
            th = np.tanh(delta * np.asarray(s, dtype=float))
            return delta * delta * (1.0 - th * th)

        return b, b_s
    if name == "ou":
        # log-bid drift alpha (q - s) + [a - q]_+
        alpha = float(d.get("alpha", 1.0))

        def b(t, s, q, a):
            s = np.asarray(s, dtype=float)
            return alpha * (q - s) + np.maximum(np.asarray(a, dtype=float) - q, 0.0)

        def b_s(t, s, q, a):
            return np.zeros(np.shape(s)) - alpha

        return b, b_s
    if name == "cubic":
        def b(t, s, q, a):
            return np.asarray(s, dtype=float) ** 3

        def b_s(t, s, q, a):
            return 3.0 * np.asarray(s, dtype=float) ** 2

        return b, b_s
    raise ValueError(f"unknown drift {name!r}")


def _named_diffusion(d: dict | float | None) -> tuple[Coef, Coef]:
    if d is None:
        return _ZERO, _ZERO
    if isinstance(d, (int, float)):
        d = {"name": "constant", "value": float(d)}
    name = d["name"]
    if name == "zero":
        return _ZERO, _ZERO
    if name == "constant":
        return _const(float(d["value"])), _ZERO
    raise ValueError(f"unknown diffusion {name!r}")


def _named_gamma(d: dict | None) -> tuple[Coef, Coef]:
    if d is None or d["name"] == "zero":
        return _const_gamma(0.0), _const_gamma(0.0)
    if d["name"] == "theta":
        scale = float(d.get("scale", 1.0))

        def g(t, s, q, a, theta):
            return np.zeros(np.shape(s)) + scale * np.asarray(theta, dtype=float)

        return g, _const_gamma(0.0)
    raise ValueError(f"unknown jump size {d['name']!r}")


def coefficients_from_dict(d: dict) -> CoefficientSet:
    drift, drift_s = _named_drift(d.get("drift", {"name": "zero"}))
    sig, sig_s = _named_diffusion(d.get("diff_idio"))
    sig_o, sig_o_s = _named_diffusion(d.get("diff_common"))
    gam, gam_s = _named_gamma(d.get("jump_gamma"))
    spec = {
        "drift": dict(d.get("drift", {"name": "zero"})),
        "diff_idio": _diffusion_dict(d.get("diff_idio")),
        "diff_common": _diffusion_dict(d.get("diff_common")),
        "jump_gamma": dict(d.get("jump_gamma") or {"name": "zero"}),
    }
    return CoefficientSet(drift, sig, sig_o, gam, drift_s, sig_s, sig_o_s, gam_s, True, spec)


def _diffusion_dict(d) -> dict:
    if d is None:
        return {"name": "zero"}
    if isinstance(d, (int, float)):
        return {"name": "constant", "value": float(d)}
    return dict(d)


def named_coefficients(drift="zero", sigma=0.0, sigma_o=0.0, jumps=False, **params) -> CoefficientSet:
    """Shorthand: ``named_coefficients("tanh", sigma=1, delta=0.5, jumps=True)``."""
    dd = {"name": drift, **params}
    return coefficients_from_dict({
        "drift": dd,
        "diff_idio": sigma,
        "diff_common": sigma_o,
        "jump_gamma": {"name": "theta"} if jumps else {"name": "zero"},
    })


# ---------------------------------------------------------------------------
# policies


def zero_policy(t, s, q):
    return np.zeros(np.shape(s)) if np.ndim(s) else 0.0


def policy_from_spec(spec) -> Policy:
    if callable(spec):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec["name"]
    if name == "zero":
        return zero_policy
    if name == "quantile_tracking":
        from .market import quantile_tracking_policy

        return quantile_tracking_policy()
    if name == "quantile_offset":
        offset = float(spec.get("offset", 0.0))

        def pol(t, s, q):
            return np.zeros(np.shape(s)) + q + offset

        return pol
    raise ValueError(f"unknown control policy {name!r}")


def _policy_to_json(spec):
    if isinstance(spec, str):
        return spec
    if isinstance(spec, dict):
        return spec
    return None


# ---------------------------------------------------------------------------
# initial law and grid


@dataclass(frozen=True)
class InitialLaw:
    kind: str = "point"
    value: float = 0.0
    mean: float = 0.0
    std: float = 1.0
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "empirical"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == "gaussian" and not self.std >= 0:
            raise ValueError("gaussian initial law needs std >= 0")
        if self.kind == "empirical" and len(self.values) == 0:
            raise ValueError("empirical initial law needs values")

    @classmethod
    def point(cls, value: float = 0.0):
        return cls("point", value=float(value))

    @classmethod
    def gaussian(cls, mean: float = 0.0, std: float = 1.0):
        return cls("gaussian", mean=float(mean), std=float(std))

    @classmethod
    def empirical(cls, values: Sequence[float]):
        return cls("empirical", values=tuple(float(v) for v in values))

    def center(self) -> float:
        return {"point": self.value, "gaussian": self.mean}.get(self.kind, float(np.mean(self.values) if self.values else 0.0))

    def spread(self) -> float:
        if self.kind == "point":
            return 0.0
        if self.kind == "gaussian":
            return self.std
        return float(np.std(self.values))

    def support(self) -> tuple[float, float]:
        if self.kind == "point":
            return (self.value, self.value)
        if self.kind == "gaussian":
            return (self.mean, self.mean)
        return (min(self.values), max(self.values))

    def quantile(self, f: float) -> float:
        if self.kind == "point":
            return self.value
        if self.kind == "gaussian":
            from .quantile import gaussian_quantile

            return gaussian_quantile(self.mean, self.std, f)
        from .particles import empirical_quantile

        return empirical_quantile(np.asarray(self.values), f)

    def to_dict(self) -> dict:
        if self.kind == "point":
            return {"kind": "point", "value": self.value}
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.mean, "std": self.std}
        return {"kind": "empirical", "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        kind = d.get("kind", "point")
        if kind == "point":
            return cls.point(d.get("value", 0.0))
        if kind == "gaussian":
            return cls.gaussian(d.get("mean", 0.0), d.get("std", 1.0))
        if kind == "empirical":
            return cls.empirical(d["values"])
        raise ValueError(f"unknown initial law {kind!r}")


@dataclass(frozen=True)
class StateGrid:
    """Uniform cell-centred grid on [lo, hi] with ``n_cells`` cells."""

    lo: float = -10.0
    hi: float = 10.0
    n_cells: int = 1000

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.n_cells

    @functools.cached_property
    def x(self) -> np.ndarray:
        x = self.lo + (np.arange(self.n_cells) + 0.5) * self.h
        x.setflags(write=False)
        return x

    @functools.cached_property
    def faces(self) -> np.ndarray:
        """Interior cell faces, midway between neighbouring nodes."""
        x = self.x
        f = 0.5 * (x[:-1] + x[1:])
        f.setflags(write=False)
        return f

    @classmethod
    def with_spacing(cls, lo: float, hi: float, h: float) -> "StateGrid":
        n = int(round((hi - lo) / h))
        return cls(lo, lo + n * h, n)

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi, "n_cells": self.n_cells}


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class Scenario:
    coeffs: CoefficientSet = field(default_factory=CoefficientSet)
    levy: LevySpec = field(default_factory=LevySpec)
    f: float = 0.5
    horizon: float = 1.0
    dt: float = 1e-2
    n_particles: int = 1000
    initial_law: InitialLaw = field(default_factory=InitialLaw)
    state_grid: StateGrid = field(default_factory=StateGrid)
    seed: int = 0
    control_policy: Any = "zero"
    name: str | None = None

    @property
    def n_steps(self) -> int:
        if self.horizon <= 0:
            return 0
        return int(round(self.horizon / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def policy(self) -> Policy:
        return policy_from_spec(self.control_policy)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        if self.coeffs.spec is None:
            raise ValueError("only scenarios built from named coefficients serialize to JSON")
        pol = _policy_to_json(self.control_policy)
        if pol is None:
            raise ValueError("user closure policies do not serialize to JSON")
        d = {
            "coeffs": self.coeffs.spec,
            "levy": self.levy.to_dict(),
            "f": self.f,
            "horizon": self.horizon,
            "dt": self.dt,
            "n_particles": self.n_particles,
            "initial_law": self.initial_law.to_dict(),
            "state_grid": self.state_grid.to_dict(),
            "seed": self.seed,
            "control_policy": pol,
        }
        if self.name is not None:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        grid = d.get("state_grid", {})
        return cls(
            coeffs=coefficients_from_dict(d.get("coeffs", {})),
            levy=LevySpec.from_dict(d.get("levy")),
            f=float(d["f"]),
            horizon=float(d["horizon"]),
            dt=float(d["dt"]),
            n_particles=int(d["n_particles"]),
            initial_law=InitialLaw.from_dict(d.get("initial_law", {"kind": "point", "value": 0.0})),
            state_grid=StateGrid(float(grid.get("lo", -10.0)), float(grid.get("hi", 10.0)), int(grid.get("n_cells", 1000))),
            seed=int(d.get("seed", 0)),
            control_policy=d.get("control_policy", "zero"),
            name=d.get("name"),
        )


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    lipschitz_drift: float = float("nan")
    derivative_error: float | None = None

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def to_dict(self):
        return {
            "valid": self.ok,
            "violations": list(self.violations),
            "lipschitz_drift": self.lipschitz_drift,
            "derivative_error": self.derivative_error,
        }


def derivative_check(c: CoefficientSet, grid: Sequence[tuple[float, float, float, float]], thetas=(-1.0, 0.0, 1.0)) -> float:
    """Largest |analytic - central difference| / (1 + |analytic|) over the grid.

    Only derivatives that were supplied analytically are compared.
    """
    worst = 0.0
    pairs = [(n, getattr(c, n), getattr(c, n + "_s")) for n in ("drift", "diff_idio", "diff_common")]
    for t, s, q, a in grid:
        for name, fn, dfn in pairs:
            if dfn is None:
                continue
            v = float(fn(t, s, q, a))
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite at (t={t}, s={s}, q={q}, a={a})")
            exact = float(dfn(t, s, q, a))
            fd = float(central_difference(lambda x: fn(t, x, q, a), s))
            if not (math.isfinite(exact) and math.isfinite(fd)):
                raise ValueError(f"{name} derivative is not finite at (t={t}, s={s}, q={q}, a={a})")
            worst = max(worst, abs(exact - fd) / (1.0 + abs(exact)))
        if c.jump_gamma_s is None:
            continue
        for th in thetas:
            v = float(c.jump_gamma(t, s, q, a, th))
            if not math.isfinite(v):
                raise ValueError(f"jump_gamma is not finite at (t={t}, s={s}, q={q}, a={a}, theta={th})")
            exact = float(c.jump_gamma_s(t, s, q, a, th))
            fd = float(central_difference(lambda x: c.jump_gamma(t, x, q, a, th), s))
            worst = max(worst, abs(exact - fd) / (1.0 + abs(exact)))
    return worst


def _probe_points(scn: Scenario, n_s: int = 65):
    g = scn.state_grid
    s = np.linspace(g.lo, g.hi, n_s)
    ts = sorted({0.0, 0.5 * max(scn.horizon, 0.0), max(scn.horizon, 0.0)})
    try:
        q0 = scn.initial_law.quantile(min(max(scn.f, 1e-9), 1 - 1e-9))
    except Exception:
        q0 = scn.initial_law.center()
    return s, ts, [q0, g.lo + 0.25 * (g.hi - g.lo), g.lo + 0.75 * (g.hi - g.lo)]


def validate_scenario(scn: Scenario) -> ValidationReport:
    """Collect every violated invariant; never raises."""
    rep = ValidationReport()
    v = rep.violations
    if not (0.0 < scn.f < 1.0):
        v.append(f"fraction f={scn.f} must lie strictly inside (0, 1)")
    if not scn.horizon > 0:
        v.append(f"horizon T={scn.horizon} must be positive")
    if not scn.dt > 0:
        v.append(f"dt={scn.dt} must be positive")
    elif scn.horizon > 0:
        k = round(scn.horizon / scn.dt)
        if abs(k * scn.dt - scn.horizon) > 1e-12 * max(1.0, scn.horizon):
            v.append(f"dt={scn.dt} does not divide T={scn.horizon}")
    if scn.n_particles < 2:
        v.append(f"n_particles={scn.n_particles} must be >= 2")
    if not (0 <= int(scn.seed) < 2**64):
        v.append("seed must be a 64-bit unsigned integer")
    g = scn.state_grid
    if not g.hi > g.lo:
        v.append("state_grid needs hi > lo")
    if g.n_cells < 64:
        v.append(f"state_grid n_cells={g.n_cells} must be >= 64")
    lo, hi = scn.initial_law.support()
    pad = 6.0 * scn.initial_law.spread()
    if lo - pad < g.lo or hi + pad > g.hi:
        v.append(f"state_grid [{g.lo}, {g.hi}] does not cover the initial law support plus 6 sd [{lo - pad}, {hi + pad}]")

    lev = scn.levy
    if not lev.intensity >= 0:
        v.append(f"jump intensity {lev.intensity} must be >= 0")
    if lev.intensity > 0:
        mass = lev.mark_mass()
        if abs(mass - 1.0) > 1e-6:
            v.append(f"mark density integrates to {mass}, not 1")
        bound = lev.exp_moment_bound
        if not math.isfinite(bound):
            v.append(f"exponential moment E[exp({lev.delta_max}|theta|)] is not finite")

    try:
        pol = scn.policy
    except Exception as exc:  # noqa: BLE001 - report, never abort
        v.append(f"control policy: {exc}")
        return rep

    s, ts, qs = _probe_points(scn)
    c = scn.coeffs
    nodes, _ = lev.marks.quadrature(16) if lev.intensity > 0 else (np.array([0.0]), None)
    slopes = []
    grid_pts = []
    with np.errstate(all="ignore"):
        for t in ts:
            for q in qs:
                a = np.broadcast_to(np.asarray(pol(t, s, q), dtype=float), s.shape)
                b = np.broadcast_to(np.asarray(c.drift(t, s, q, a), dtype=float), s.shape)
                sig = np.broadcast_to(np.asarray(c.diff_idio(t, s, q, a), dtype=float), s.shape)
                sig_o = np.broadcast_to(np.asarray(c.diff_common(t, s, q, a), dtype=float), s.shape)
                for label, arr in (("drift", b), ("diff_idio", sig), ("diff_common", sig_o)):
                    if not np.all(np.isfinite(arr)):
                        v.append(f"{label} is not finite on the state grid (t={t}, q={q})")
                if np.any(sig <= 0):
                    v.append(f"diff_idio must be positive on the state grid (min {np.min(sig)} at t={t}, q={q})")
                if lev.intensity > 0:
                    gam = np.asarray(c.jump_gamma(t, s[:, None], q, a[:, None], nodes[None, :]), dtype=float)
                    if not np.all(np.isfinite(gam)):
                        v.append(f"jump_gamma is not finite on the state grid (t={t}, q={q})")
                slopes.append(np.max(np.abs(np.diff(b) / np.diff(s))))
                grid_pts.extend((t, float(x), q, float(ai)) for x, ai in zip(s[::8], a[::8]))
    rep.lipschitz_drift = float(np.max(slopes)) if slopes else float("nan")
    if not math.isfinite(rep.lipschitz_drift):
        v.append("drift Lipschitz probe is not finite")
    if c.has_analytic_derivatives:
        try:
            rep.derivative_error = derivative_check(c, grid_pts)
            if rep.derivative_error > DERIVATIVE_TOL:
                v.append(f"analytic derivatives disagree with central differences (max rel err {rep.derivative_error:.3g})")
        except ValueError as exc:
            v.append(str(exc))
    # de-duplicate while keeping order
    rep.violations = list(dict.fromkeys(v))
    return rep
