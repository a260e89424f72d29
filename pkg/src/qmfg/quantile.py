"""Quantile dynamics: the quantile SDE/ODE and closed-form reference quantiles."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, signal, special

from . import stochastics as st
from .density import DENSITY_FLOOR, DensityField, MollifierSpec, log_density_gradient
from .model import LevySpec, Scenario, StateGrid, TabulatedMarks, gauss_legendre

# ---------------------------------------------------------------------------
# inverse normal CDF

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _rational_guess(p: np.ndarray) -> np.ndarray:
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)
    q = p[mid] - 0.5
    r = q * q
    num = ((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    x[mid] = q * num / den
    for mask, sign, tail in ((lo, 1.0, p[lo]), (hi, -1.0, 1.0 - p[hi])):
        q = np.sqrt(-2.0 * np.log(tail))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[mask] = sign * num / den
    return x


def inv_norm_cdf(f):
    """Q_Z(f): rational approximation plus one Newton step on the normal CDF.

    Accepts scalars or arrays; every entry must lie in (0, 1).
    """
    p = np.asarray(f, dtype=float)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise ValueError("inv_norm_cdf needs 0 < f < 1")
    flat = p.ravel()
    x = _rational_guess(flat)
    # Phi(x) - f, computed in whichever tail keeps precision
    upper = x > 0
    resid = np.where(upper, (1.0 - flat) - special.ndtr(-x), special.ndtr(x) - flat)
    x = x - resid * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x.reshape(p.shape)
    return float(x) if x.ndim == 0 else x


def gaussian_quantile(mu: float, sigma: float, f):
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        inv_norm_cdf(f)
        return mu if np.ndim(f) == 0 else np.full(np.shape(f), float(mu))
    return mu + sigma * inv_norm_cdf(f)


# ---------------------------------------------------------------------------
# paths


@dataclass
class QuantilePath:
    times: np.ndarray
    values: np.ndarray
    f: float
    common_path: np.ndarray
    method: str

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.common_path = np.asarray(self.common_path, dtype=float)
        if not (self.times.shape == self.values.shape == self.common_path.shape):
            raise ValueError("quantile path arrays must have equal length")

    def sup_gap(self, other: "QuantilePath") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def l2_gap(self, other: "QuantilePath") -> float:
        d = self.values - other.values
        if self.times.size < 2:
            return float(abs(d[0]))
        span = self.times[-1] - self.times[0]
        return float(math.sqrt(np.trapezoid(d * d, self.times) / span))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "quantile", "common_noise", "method"])
            for t, q, b in zip(self.times, self.values, self.common_path):
                w.writerow([f"{t:.17g}", f"{q:.17g}", f"{b:.17g}", self.method])


def common_path(scn: Scenario) -> np.ndarray:
    """B_o on the scenario grid from stream 0 of the scenario seed."""
    return st.brownian_path(st.NoisePlan(scn.seed, st.COMMON_STREAM, scn.dt), scn.n_steps)


# ---------------------------------------------------------------------------
# score sources: (log m)_s along the quantile


class ScoreSource:
    """Evaluates (log m)_s(t_k, x); returns ``(value, floored)``."""

    def __call__(self, step: int, t: float, x: float) -> tuple[float, bool]:
        raise NotImplementedError


class AnalyticScore(ScoreSource):
    def __init__(self, fn: Callable[[float, float], float]):
        self.fn = fn

    def __call__(self, step, t, x):
        return float(self.fn(t, x)), False


class ParticleScore(ScoreSource):
    """Kernel score of the particle system advanced in lockstep with the integrator."""

    def __init__(self, scn: Scenario, spec: MollifierSpec | None = None):
        from .particles import iter_ensembles

        self.spec = spec or MollifierSpec()
        self._it = iter_ensembles(scn)
        self._cache: dict = {}
        self._last = -1

    def ensemble(self, step: int):
        while self._last < step:
            e = next(self._it)
            self._last = e.step
            self._cache[e.step] = e
            self._cache.pop(e.step - 2, None)
        if step not in self._cache:
            raise ValueError(f"particle score at step {step} is no longer cached")
        return self._cache[step]

    def __call__(self, step, t, x):
        return log_density_gradient(self.ensemble(step).states, self.spec, x, return_flag=True)


class FieldScore(ScoreSource):
    """Score read off a sequence of density fields, one per time step."""

    def __init__(self, fields):
        self.fields = list(fields)

    def __call__(self, step, t, x):
        fld: DensityField = self.fields[step]
        m = float(np.interp(x, fld.x, fld.values))
        ms = float(np.interp(x, fld.x, fld.m_s))
        return ms / max(m, DENSITY_FLOOR), m < DENSITY_FLOOR


# ---------------------------------------------------------------------------
# quantile SDE


@dataclass
class _Terms:
    drift_no_score: float
    score_weight: float
    sigma_o: float


def _prop1_terms(scn: Scenario, t: float, q: float) -> _Terms:
    """Coefficients at (t, q, q, a(t, q, q)) for the quantile equation."""
    c = scn.coeffs
    a = float(np.asarray(scn.policy(t, q, q)))
    b = float(np.asarray(c.drift(t, q, q, a)))
    sig = float(np.asarray(c.diff_idio(t, q, q, a)))
    sig_s = float(np.asarray(c.d_diff_idio(t, q, q, a))) if sig != 0.0 else 0.0
    sig_o = float(np.asarray(c.diff_common(t, q, q, a)))
    jj = j2 = 0.0
    lev = scn.levy
    if lev.intensity > 0:
        nodes, w = lev.marks.quadrature()
        g = np.asarray(c.jump_gamma(t, q, q, a, nodes), dtype=float)
        gs = np.asarray(c.d_jump_gamma(t, q, q, a, nodes), dtype=float)
        jj = lev.intensity * float(np.sum(w * g * gs))
        j2 = lev.intensity * float(np.sum(w * g * g))
    return _Terms(b - sig * sig_s - jj, sig * sig + j2, sig_o)


def _drift(scn, score, step, t, q, floors):
    terms = _prop1_terms(scn, t, q)
    d = terms.drift_no_score
    if terms.score_weight != 0.0:
        val, floored = score(step, t, q)
        if floored:
            floors.append(step)
        d -= 0.5 * val * terms.score_weight
    return d, terms


def _startup(scn: Scenario) -> bool:
    """Point-mass start with nonzero spreading: the score is singular at t = 0."""
    law = scn.initial_law
    if law.kind != "point":
        return False
    return _prop1_terms(scn, 0.0, law.value).score_weight > 0.0


def _startup_value(scn: Scenario, dBo0: float) -> float:
    # one-step gaussian law from the point mass
    s0 = scn.initial_law.value
    terms = _prop1_terms(scn, 0.0, s0)
    return s0 + terms.drift_no_score * scn.dt + math.sqrt(terms.score_weight * scn.dt) * inv_norm_cdf(scn.f) + terms.sigma_o * dBo0


def _check_floors(floors, n_steps):
    if n_steps and len(set(floors)) > 0.1 * n_steps:
        raise ValueError(
            f"density floor hit on {len(set(floors))} of {n_steps} steps; use a less extreme f or more particles")


def integrate_quantile_sde(scn: Scenario, score: ScoreSource, common: st.NoisePlan | None = None) -> QuantilePath:
    """Euler-Maruyama integration of the quantile SDE driven by ``common``."""
    plan = common or st.NoisePlan(scn.seed, st.COMMON_STREAM, scn.dt)
    n, dt = scn.n_steps, scn.dt
    times = scn.times
    dB = np.diff(st.brownian_path(plan, n))
    q = np.empty(n + 1)
    q[0] = scn.initial_law.quantile(scn.f)
    floors: list[int] = []
    k0 = 0
    if n and _startup(scn):
        q[1] = _startup_value(scn, dB[0])
        k0 = 1
    for k in range(k0, n):
        d, terms = _drift(scn, score, k, times[k], q[k], floors)
        q[k + 1] = q[k] + d * dt + terms.sigma_o * dB[k]
        if not math.isfinite(q[k + 1]):
            raise ArithmeticError(f"quantile SDE produced a non-finite value at step {k + 1}")
    _check_floors(floors, n)
    return QuantilePath(times, q, scn.f, np.concatenate([[0.0], np.cumsum(dB)]), "sde")


def integrate_quantile_ode(scn: Scenario, score: ScoreSource) -> QuantilePath:
    """Heun (RK2) integration of the quantile equation without common noise."""
    n, dt = scn.n_steps, scn.dt
    times = scn.times
    probe = [0.0] if n == 0 else times
    for t in probe[:: max(1, len(probe) // 16)]:
        x = scn.initial_law.center()
        a = scn.policy(t, x, x)
        if float(np.max(np.abs(np.asarray(scn.coeffs.diff_common(t, x, x, a))))) != 0.0:
            raise ValueError("the deterministic quantile route needs sigma_o = 0")
    q = np.empty(n + 1)
    q[0] = scn.initial_law.quantile(scn.f)
    floors: list[int] = []
    k0 = 0
    if n and _startup(scn):
        q[1] = _startup_value(scn, 0.0)
        k0 = 1
    for k in range(k0, n):
        d1, _ = _drift(scn, score, k, times[k], q[k], floors)
        pred = q[k] + dt * d1
        d2, _ = _drift(scn, score, k + 1, times[k + 1], pred, floors)
        q[k + 1] = q[k] + 0.5 * dt * (d1 + d2)
        if not math.isfinite(q[k + 1]):
            raise ArithmeticError(f"quantile ODE produced a non-finite value at step {k + 1}")
    _check_floors(floors, n)
    return QuantilePath(times, q, scn.f, np.zeros(n + 1), "ode")


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck closed form


def _as_fn(v) -> Callable[[float], float]:
    if callable(v):
        return v
    c = float(v)
    return lambda t: c


def _sigma_nc(alpha: float, sigma_fn, t: float) -> float:
    if t == 0:
        return 0.0
    val, _ = integrate.quad(lambda u: math.exp(2.0 * alpha * (u - t)) * sigma_fn(u) ** 2, 0.0, t,
                            epsabs=1e-15, epsrel=1e-13, limit=200)
    return math.sqrt(max(val, 0.0))


def ou_variance(alpha: float, sigma_fn, t: float) -> tuple[float, float]:
    """(sigma_nc(t), alpha sigma_nc + d/dt sigma_nc - sigma^2 / (2 sigma_nc)).

    The residual is nan at t = 0, where sigma_nc vanishes.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    sigma_fn = _as_fn(sigma_fn)
    s = _sigma_nc(alpha, sigma_fn, t)
    if t == 0:
        return 0.0, float("nan")
    h = 1e-5
    if t > h:
        ds = (_sigma_nc(alpha, sigma_fn, t + h) - _sigma_nc(alpha, sigma_fn, t - h)) / (2.0 * h)
    else:
        ds = (_sigma_nc(alpha, sigma_fn, t + h) - s) / h
    return s, alpha * s + ds - sigma_fn(t) ** 2 / (2.0 * s)


def _initial_moments(s0_law) -> tuple[float, float]:
    kind = getattr(s0_law, "kind", None)
    if kind == "point":
        return s0_law.value, 0.0
    if kind == "gaussian":
        return s0_law.mean, s0_law.std
    if isinstance(s0_law, (int, float)):
        return float(s0_law), 0.0
    raise ValueError("the O-U closed form needs a gaussian or point-mass initial law")


def ou_total_std(alpha: float, sigma_fn, s0_law, times) -> np.ndarray:
    """Standard deviation of the common-noise-free O-U part on ``times``."""
    sigma_fn = _as_fn(sigma_fn)
    _, sd0 = _initial_moments(s0_law)
    return np.array([math.sqrt(math.exp(-2.0 * alpha * t) * sd0 * sd0 + _sigma_nc(alpha, sigma_fn, t) ** 2)
                     for t in times])


def _ou_volterra(alpha: float, times: np.ndarray, mnc: np.ndarray, g: np.ndarray, bo: np.ndarray) -> np.ndarray:
    """Trapezoid forward substitution; ``bo`` may hold one path per row."""
    # int_0^t g dB with g = e^{au} sigma_o(u), by parts: g(t) B(t) - int g'(u) B(u) du
    gp = np.gradient(g, times) if times.size > 1 else np.zeros_like(g)
    gpb = gp * bo
    steps = 0.5 * (gpb[..., 1:] + gpb[..., :-1]) * np.diff(times)
    noise = g * bo - np.concatenate([np.zeros(bo.shape[:-1] + (1,)), np.cumsum(steps, axis=-1)], axis=-1)
    decay = np.exp(-alpha * times)
    grow = np.exp(alpha * times)
    m = np.empty(bo.shape)
    m[..., 0] = mnc[0]
    acc = np.zeros(bo.shape[:-1])
    for k in range(times.size - 1):
        h = times[k + 1] - times[k]
        rhs = decay[k + 1] * (alpha * (acc + 0.5 * h * grow[k] * m[..., k]) + noise[..., k + 1]) + mnc[k + 1]
        m[..., k + 1] = rhs / (1.0 - 0.5 * alpha * h * decay[k + 1] * grow[k + 1])
        acc = acc + 0.5 * h * (grow[k] * m[..., k] + grow[k + 1] * m[..., k + 1])
    return m


def _ou_parts(alpha, sigma_fn, sigma_o_fn, s0_law, f, times):
    sigma_fn, sigma_o_fn = _as_fn(sigma_fn), _as_fn(sigma_o_fn)
    mu0, _ = _initial_moments(s0_law)
    sd = ou_total_std(alpha, sigma_fn, s0_law, times)
    mnc = np.exp(-alpha * times) * mu0 + sd * inv_norm_cdf(f)
    g = np.exp(alpha * times) * np.array([sigma_o_fn(t) for t in times])
    return mnc, g


def ou_quantile_closed_form(alpha: float, sigma_fn, sigma_o_fn, s0_law, f: float, common_path, times=None,
                            dt: float | None = None) -> QuantilePath:
    """Quantile of the quantile-coupled O-U model conditioned on a common path.

    Solves m(t) = e^{-at}[a int_0^t e^{au} m du + int_0^t e^{au} sigma_o dB_o] + m_nc(t)
    by trapezoid forward substitution on the time grid of ``common_path``.
    """
    bo = np.asarray(common_path, dtype=float)
    if times is None:
        if dt is None:
            raise ValueError("pass the time grid or dt")
        times = np.arange(bo.size) * dt
    times = np.asarray(times, dtype=float)
    if times.shape != bo.shape:
        raise ValueError("common path and time grid differ in length")
    mnc, g = _ou_parts(alpha, sigma_fn, sigma_o_fn, s0_law, f, times)
    return QuantilePath(times, _ou_volterra(alpha, times, mnc, g, bo), f, bo, "closed_form")


def ou_quantile_batch(alpha: float, sigma_fn, sigma_o_fn, s0_law, f: float, common_paths, times) -> np.ndarray:
    """:func:`ou_quantile_closed_form` values for many common paths (one per row)."""
    times = np.asarray(times, dtype=float)
    bo = np.atleast_2d(np.asarray(common_paths, dtype=float))
    if bo.shape[-1] != times.size:
        raise ValueError("common paths and time grid differ in length")
    mnc, g = _ou_parts(alpha, sigma_fn, sigma_o_fn, s0_law, f, times)
    return _ou_volterra(alpha, times, mnc, g, bo)


def ou_closed_form_residual(path: QuantilePath, alpha: float, sigma_fn, sigma_o_fn, s0_law) -> np.ndarray:
    """Per-step r_k = dm - sigma_o dB_o - Q_Z(f) (d sigma_tot + alpha int sigma_tot dt)."""
    sigma_fn, sigma_o_fn = _as_fn(sigma_fn), _as_fn(sigma_o_fn)
    t = path.times
    qz = inv_norm_cdf(path.f)
    sd = ou_total_std(alpha, sigma_fn, s0_law, t)
    r = np.empty(t.size - 1)
    for k in range(t.size - 1):
        integral, _ = integrate.quad(lambda u: ou_total_std(alpha, sigma_fn, s0_law, [u])[0], t[k], t[k + 1])
        dbo = path.common_path[k + 1] - path.common_path[k]
        r[k] = (path.values[k + 1] - path.values[k]) - sigma_o_fn(t[k]) * dbo - qz * (sd[k + 1] - sd[k] + alpha * integral)
    return r


# ---------------------------------------------------------------------------
# tanh drift with jumps


def _tilted_levy(levy: LevySpec, delta: float) -> LevySpec:
    nodes, w = levy.marks.quadrature()
    ecosh = float(np.sum(w * np.cosh(delta * nodes)))
    if levy.marks.discrete:
        return LevySpec(levy.intensity * ecosh, levy.marks, levy.delta_max)
    lo, hi = levy.marks.support
    theta = np.linspace(lo, hi, 4097)
    dens = levy.marks.pdf(theta) * np.cosh(delta * theta)
    return LevySpec(levy.intensity * ecosh, TabulatedMarks(theta, dens, symmetric=True), levy.delta_max)


def tanh_closed_form_density(delta: float, levy: LevySpec, t: float, grid: StateGrid, s0: float = 0.0,
                             sigma_o_B_o: float = 0.0) -> DensityField:
    """Density of the tanh-drift model from the cosh factorization.

    m_nc = cosh(delta s) e^{-delta^2 t / 2} (phi_t * tilted compound Poisson law),
    evaluated at s - s0 - sigma_o B_o.  The returned field is renormalized;
    ``raw_mass`` holds the grid mass before renormalization.
    """
    if not levy.symmetric:
        raise ValueError("the cosh factorization drops the sinh cross term, which vanishes only for symmetric marks")
    if not t > 0:
        raise ValueError("t must be positive")
    if levy.intensity > 0 and not math.isfinite(levy.exp_moment_bound):
        raise ValueError("mark law lacks the exponential moment")
    x = grid.x
    y = x - s0 - sigma_o_B_o
    sd = math.sqrt(t)

    def phi(u):
        return np.exp(-0.5 * (u / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))

    if levy.intensity == 0:
        base = phi(y)
    else:
        tilted = _tilted_levy(levy, delta)
        half = float(np.max(np.abs(y))) + 10.0 * sd
        z, masses, atom, _ = st.compound_poisson_lattice(tilted, t, grid.h, half)
        keep = masses > 0
        z, masses = z[keep], masses[keep]
        base = atom * phi(y)
        for lo in range(0, y.size, 512):
            base[lo:lo + 512] += phi(y[lo:lo + 512, None] - z[None, :]) @ masses
    v = np.cosh(delta * y) * math.exp(-0.5 * delta * delta * t) * base
    raw = float(np.trapezoid(v, dx=grid.h))
    if not raw > 0:
        raise ValueError("density has no mass on the grid")
    return DensityField(grid, v / raw, t, raw_mass=raw)


# ---------------------------------------------------------------------------
# drift-free jump-diffusion quantile


def _mixture_cdf_quantile(levy: LevySpec, t: float, f: np.ndarray, h: float) -> np.ndarray:
    sd = math.sqrt(t)
    nodes, w = levy.marks.quadrature()
    comp = levy.intensity * t * float(np.sum(w * nodes))
    lo, hi = levy.marks.support
    k = st.poisson_truncation(levy.intensity * t)
    z, masses, atom, _ = st.compound_poisson_lattice(levy, t, h, min(k * max(abs(lo), abs(hi)), 60.0) + h)
    nz = (z.size - 1) // 2
    ng = int(math.ceil(10.0 * sd / h))
    # CDF on the lattice j*h is a discrete convolution of the jump masses with Phi(k h / sd)
    kk = np.arange(-(nz + ng), nz + ng + 1)
    kern = special.ndtr(np.arange(-(2 * nz + ng), 2 * nz + ng + 1) * h / sd)
    cont = signal.fftconvolve(masses, kern)[2 * nz:2 * nz + kk.size]
    x = kk * h
    cdf = atom * special.ndtr(x / sd) + cont
    cdf = np.maximum.accumulate(cdf / (atom + masses.sum()))
    j = np.searchsorted(cdf, f, side="left")
    return x[np.minimum(j, x.size - 1)] - comp


def jump_free_drift_quantile(sigma_o: float, levy: LevySpec, f, t: float, common_value: float, s0: float = 0.0,
                             h: float = 2e-3):
    """f-quantile of s0 + B(t) + sigma_o B_o(t) + compensated compound Poisson jumps.

    The mixture CDF is tabulated on a lattice of spacing ``h`` and inverted by
    the inf rule.  ``f`` may be an array.
    """
    f_arr = np.atleast_1d(np.asarray(f, dtype=float))
    if not np.all((f_arr > 0) & (f_arr <= 1)):
        raise ValueError("f must lie in (0, 1]")
    if t < 0:
        raise ValueError("t must be nonnegative")
    shift = s0 + sigma_o * common_value
    if t == 0:
        out = np.full(f_arr.shape, shift)
    elif levy.intensity == 0:
        out = shift + math.sqrt(t) * inv_norm_cdf(f_arr)
    else:
        out = shift + _mixture_cdf_quantile(levy, t, f_arr, h)
    return float(out[0]) if np.ndim(f) == 0 else out


# ---------------------------------------------------------------------------
# Wasserstein-2


def wasserstein2_from_quantiles(q0: Callable, q1: Callable, n_nodes: int = 256) -> float:
    """W2 between two laws from their quantile functions.

    Gauss-Legendre on (0, 1) after f = u^2 (3 - 2u), which flattens the
    logarithmic blow-up of quantile functions at 0 and 1.
    """
    u, w = gauss_legendre(n_nodes, 0.0, 1.0)
    f = u * u * (3.0 - 2.0 * u)
    jac = 6.0 * u * (1.0 - u)
    a = np.asarray(q0(f), dtype=float)
    b = np.asarray(q1(f), dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("quantile function returned a non-finite value")
    d = a - b
    return float(math.sqrt(max(float(np.sum(w * jac * d * d)), 0.0)))
