"""Gridded conditional densities: kernel estimates and the stochastic FPK solver."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .model import LevySpec, Scenario, StateGrid

DENSITY_FLOOR = 1e-12
_SQRT2PI = math.sqrt(2.0 * math.pi)


class DensityFloorWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DensityField:
    grid: StateGrid
    values: np.ndarray
    t: float = 0.0
    clipped_mass: float = 0.0
    flags: tuple[str, ...] = ()
    raw_mass: float | None = None

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, dx=self.grid.h))

    def normalized(self) -> "DensityField":
        return replace(self, values=self.values / self.mass)

    @property
    def m_s(self) -> np.ndarray:
        return _d1(self.values, self.grid.h)

    @property
    def m_ss(self) -> np.ndarray:
        return _d2(self.values, self.grid.h)

    def cdf(self) -> np.ndarray:
        v = self.values
        c = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]))]) * self.grid.h
        return c / c[-1] if c[-1] > 0 else c

    def quantile(self, f: float) -> float:
        """Leftmost grid point whose CDF reaches f."""
        c = self.cdf()
        j = int(np.searchsorted(c, f, side="left"))
        return float(self.x[min(j, c.size - 1)])

    def l1_distance(self, other: "DensityField") -> float:
        return float(np.trapezoid(np.abs(self.values - other.values), dx=self.grid.h))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "m"])
            for s, m in zip(self.x, self.values):
                w.writerow([f"{s:.17g}", f"{m:.17g}"])


def _pad(v):
    return np.concatenate([[0.0], v, [0.0]])


def _d1(v, h):
    p = _pad(v)
    return (p[2:] - p[:-2]) / (2.0 * h)


def _d2(v, h):
    p = _pad(v)
    return (p[2:] - 2.0 * p[1:-1] + p[:-2]) / (h * h)


def gaussian_field(grid: StateGrid, mean: float = 0.0, std: float = 1.0, t: float = 0.0) -> DensityField:
    x = grid.x
    v = np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * _SQRT2PI)
    return DensityField(grid, v, t).normalized()


# ---------------------------------------------------------------------------
# mollified estimates


@dataclass(frozen=True)
class MollifierSpec:
    """Gaussian mollifier; bandwidth is a number or ``"silverman"``."""

    bandwidth: float | str = "silverman"

    def resolve(self, states) -> float:
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")
            states = np.asarray(states, dtype=float)
            if states.size < 2:
                raise ValueError("silverman bandwidth needs at least two states")
            sd = float(np.std(states, ddof=1))
            if sd == 0:
                raise ValueError("all states identical: pass an explicit bandwidth")
            return 1.06 * sd * states.size ** (-0.2)
        eps = float(self.bandwidth)
        if not eps > 0:
            raise ValueError("bandwidth must be positive")
        return eps


def _kernel_sums(states: np.ndarray, x: np.ndarray, eps: float, derivative: bool = False):
    """(1/n) sum rho_eps(x - s_i) (and its x-derivative) restricted to 9 eps windows."""
    s = np.sort(np.asarray(states, dtype=float))
    n = s.size
    m = np.zeros(x.size)
    ms = np.zeros(x.size) if derivative else None
    chunk = 256
    for lo in range(0, x.size, chunk):
        xs = x[lo:lo + chunk]
        a = np.searchsorted(s, xs[0] - 9.0 * eps)
        b = np.searchsorted(s, xs[-1] + 9.0 * eps)
        if b <= a:
            continue
        for sl in range(a, b, 8192):
            part = s[sl:min(b, sl + 8192)]
            z = (xs[:, None] - part[None, :]) / eps
            k = np.exp(-0.5 * z * z)
            m[lo:lo + chunk] += k.sum(axis=1)
            if derivative:
                ms[lo:lo + chunk] -= (z * k).sum(axis=1)
    norm = 1.0 / (n * eps * _SQRT2PI)
    if derivative:
        return m * norm, ms * norm / eps
    return m * norm


def kde(states, spec: MollifierSpec, grid: StateGrid) -> DensityField:
    """Mollified empirical measure on ``grid``, renormalized to unit mass."""
    states = np.asarray(states, dtype=float)
    eps = spec.resolve(states)
    v = _kernel_sums(states, grid.x, eps)
    f = DensityField(grid, v)
    if f.mass <= 0:
        raise ValueError("kernel estimate has no mass on the grid")
    return f.normalized()


def log_density_gradient(states, spec: MollifierSpec, x: float, return_flag: bool = False):
    """m_s(x) / max(m(x), 1e-12) from differentiated kernels.

    Emits :class:`DensityFloorWarning` when the floor is active; with
    ``return_flag=True`` returns ``(value, floored)`` instead.
    """
    states = np.asarray(states, dtype=float)
    eps = spec.resolve(states)
    m, ms = _kernel_sums(states, np.array([float(x)]), eps, derivative=True)
    m, ms = float(m[0]), float(ms[0])
    floored = m < DENSITY_FLOOR
    value = ms / max(m, DENSITY_FLOOR)
    if return_flag:
        return value, floored
    if floored:
        warnings.warn(f"density floor active at x={x}", DensityFloorWarning, stacklevel=2)
    return value


# ---------------------------------------------------------------------------
# jump adjoint and FPK


def _mark_kernel(levy: LevySpec, h: float, n_cells: int) -> tuple[np.ndarray, int]:
    from .stochastics import lattice_mark_weights

    w, off = lattice_mark_weights(levy, h)
    reach = max(off, w.size - 1 - off)
    if reach * h > 0.5 * n_cells * h:
        raise ValueError("mark support is wider than half the grid")
    # symmetric kernel index layout: position reach + k <-> offset k
    ker = np.zeros(2 * reach + 1)
    ker[reach - off:reach - off + w.size] = w
    return ker / ker.sum(), reach


def jump_adjoint_apply(field: DensityField, levy: LevySpec) -> np.ndarray:
    """-lambda m(s) + lambda * int marks(theta) m(s - theta) d theta, zero outside the grid."""
    m = field.values
    if levy.intensity == 0:
        return np.zeros_like(m)
    ker, reach = _mark_kernel(levy, field.grid.h, m.size)
    conv = np.convolve(m, ker)[reach:reach + m.size]
    return levy.intensity * (conv - m)


def _on(values, shape):
    v = np.asarray(values, dtype=float)
    return v if v.shape == shape else np.broadcast_to(v, shape)


def _coefficients_on_grid(field: DensityField, scn: Scenario, t: float):
    x = field.x
    xf = field.grid.faces
    q = field.quantile(scn.f)
    pol = scn.policy
    c = scn.coeffs
    a = _on(pol(t, x, q), x.shape)
    af = _on(pol(t, xf, q), xf.shape)
    b_face = _on(c.drift(t, xf, q, af), xf.shape)
    sig = _on(c.diff_idio(t, x, q, a), x.shape)
    sig_o_grid = _on(c.diff_common(t, x, q, a), x.shape)
    flags = ()
    if np.ptp(sig_o_grid) > 1e-12 * (1.0 + np.max(np.abs(sig_o_grid))):
        flags = ("state_dependent_sigma_o",)
    sig_o = float(np.asarray(c.diff_common(t, q, q, pol(t, q, q))))
    return q, b_face, sig, sig_o, flags


def _fpk_parts(field: DensityField, scn: Scenario, t: float):
    m = field.values
    h = field.grid.h
    _, b_face, sig, sig_o, flags = _coefficients_on_grid(field, scn, t)
    rhs = np.zeros(m.size)
    if np.any(b_face):
        flux = b_face * 0.5 * (m[:-1] + m[1:])
        rhs[:-1] -= flux / h
        rhs[1:] += flux / h
    s2 = float(np.max(sig * sig))
    if s2 > 0:
        rhs += 0.5 * _d2(sig * sig * m, h)
    if sig_o != 0.0:
        rhs += 0.5 * sig_o * sig_o * _d2(m, h)
    if scn.levy.intensity > 0:
        rhs += jump_adjoint_apply(field, scn.levy)
    return rhs, sig_o, flags, s2 + sig_o * sig_o


def fpk_drift(field: DensityField, scn: Scenario, t: float | None = None):
    """Deterministic part -(b m)_s + (sigma^2 m)_ss / 2 + sigma_o^2 m_ss / 2 + J*[m].

    Returns ``(rhs, sigma_o, flags)``.
    """
    rhs, sig_o, flags, _ = _fpk_parts(field, scn, field.t if t is None else t)
    return rhs, sig_o, flags


def max_stable_dt(field: DensityField, scn: Scenario, t: float | None = None) -> float:
    d = _fpk_parts(field, scn, field.t if t is None else t)[3]
    return math.inf if d == 0 else 0.5 * field.grid.h ** 2 / d


def fpk_step(field: DensityField, scn: Scenario, dB_o: float, dt: float | None = None) -> DensityField:
    """Explicit Euler-Maruyama step of the stochastic integro-FPK equation."""
    dt = scn.dt if dt is None else dt
    h = field.grid.h
    rhs, sig_o, flags, diff = _fpk_parts(field, scn, field.t)
    if diff * dt / (h * h) > 0.5 + 1e-12:
        raise ValueError(f"CFL violated: dt={dt} exceeds the admissible {0.5 * h * h / diff:.6g}")
    new = field.values + dt * rhs
    if sig_o != 0.0 and dB_o != 0.0:
        new -= sig_o * _d1(field.values, h) * dB_o
    neg = new < 0
    clipped = float(-np.sum(new[neg]) * h) if neg.any() else 0.0
    if clipped:
        new[neg] = 0.0
    mass = float(np.trapezoid(new, dx=h))
    if not mass > 0:
        raise ValueError("density lost all mass; grid too small or step unstable")
    new /= mass
    return DensityField(field.grid, new, field.t + dt, field.clipped_mass + clipped,
                        tuple(dict.fromkeys(field.flags + flags)))


def solve_fpk(field: DensityField, scn: Scenario, dt: float, n_steps: int, dB_o=None) -> DensityField:
    """Repeated :func:`fpk_step`; ``dB_o`` is a sequence of common increments or None."""
    for k in range(n_steps):
        field = fpk_step(field, scn, 0.0 if dB_o is None else float(dB_o[k]), dt)
    return field


def shift_decompose(base: DensityField, s0: float, sigma_o_path_integral: float) -> DensityField:
    """m(t, s) = m_nc(t, s - s0 - int sigma_o dB_o), by linear interpolation."""
    shift = float(s0) + float(sigma_o_path_integral)
    x = base.x
    if shift == 0.0:
        return replace(base, values=base.values.copy())
    # zero-extended nodes at the half-cell edges so mass can leave the box
    h = base.grid.h
    xe = np.concatenate([[x[0] - h], x, [x[-1] + h]])
    ve = _pad(base.values)
    v = np.interp(x - shift, xe, ve, left=0.0, right=0.0)
    kept = float(np.trapezoid(v, dx=h))
    if base.mass - kept > 1e-3:
        raise ValueError(f"shift {shift:.4g} pushes {base.mass - kept:.3g} mass off the grid")
    return replace(base, values=v)
