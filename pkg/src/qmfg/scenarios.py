"""Named scenario families with closed-form quantiles and analytic scores."""
from __future__ import annotations

import math

import numpy as np

from .model import InitialLaw, LevySpec, Scenario, StateGrid, UniformMarks, named_coefficients
from .quantile import (AnalyticScore, QuantilePath, inv_norm_cdf, jump_free_drift_quantile, ou_quantile_closed_form,
                       ou_total_std, tanh_closed_form_density)

CLOSED_FORM_FAMILIES = ("gaussian_null", "ou", "tanh", "jump_drift_free")


def gaussian_null(n_particles=100_000, f=0.8413, horizon=3.0, dt=1e-3, seed=0, sigma=1.0, sigma_o=0.0,
                  mean=0.0, std=1.0) -> Scenario:
    """Zero drift, constant diffusion, gaussian start."""
    return Scenario(
        coeffs=named_coefficients("zero", sigma=sigma, sigma_o=sigma_o),
        f=f, horizon=horizon, dt=dt, n_particles=n_particles,
        initial_law=InitialLaw.gaussian(mean, std),
        state_grid=StateGrid.with_spacing(-12.0, 12.0, 0.02),
        seed=seed, name="gaussian_null",
    )


def common_noise_only(n_particles=1000, f=0.5, horizon=1.0, dt=1e-3, seed=0, sigma_o=1.0) -> Scenario:
    """Only the common noise moves the states (fails the sigma > 0 check on purpose)."""
    return Scenario(
        coeffs=named_coefficients("zero", sigma=0.0, sigma_o=sigma_o),
        f=f, horizon=horizon, dt=dt, n_particles=n_particles,
        initial_law=InitialLaw.gaussian(0.0, 1.0),
        state_grid=StateGrid.with_spacing(-12.0, 12.0, 0.02),
        seed=seed, name=None,
    )


def ou_prosumer(n_particles=100_000, f=0.8413, horizon=1.0, dt=1e-3, seed=0, alpha=1.0, sigma=math.sqrt(2.0),
                sigma_o=0.3, s0=0.0) -> Scenario:
    """Log-bid dynamics alpha (q - s) + [a - q]_+ under the quantile-tracking policy."""
    return Scenario(
        coeffs=named_coefficients("ou", sigma=sigma, sigma_o=sigma_o, alpha=alpha),
        f=f, horizon=horizon, dt=dt, n_particles=n_particles,
        initial_law=InitialLaw.point(s0),
        state_grid=StateGrid.with_spacing(-8.0, 8.0, 0.01),
        seed=seed, control_policy="quantile_tracking", name="ou",
    )


def jump_drift_free(n_particles=100_000, f=0.3, horizon=1.0, dt=1e-3, seed=0, sigma_o=0.2, intensity=1.0,
                    half_width=1.0, s0=0.0) -> Scenario:
    """Zero drift, unit diffusion, uniform symmetric jump marks."""
    return Scenario(
        coeffs=named_coefficients("zero", sigma=1.0, sigma_o=sigma_o, jumps=True),
        levy=LevySpec(intensity, UniformMarks(-half_width, half_width)),
        f=f, horizon=horizon, dt=dt, n_particles=n_particles,
        initial_law=InitialLaw.point(s0),
        state_grid=StateGrid.with_spacing(-12.0, 12.0, 0.02),
        seed=seed, name="jump_drift_free",
    )


def tanh_jumps(n_particles=100_000, f=0.5, horizon=1.0, dt=1e-3, seed=0, delta=0.5, sigma_o=0.2,
               intensity=1.0, half_width=1.0, s0=0.0) -> Scenario:
    """Drift delta tanh(delta s), unit diffusion, uniform symmetric jumps."""
    return Scenario(
        coeffs=named_coefficients("tanh", sigma=1.0, sigma_o=sigma_o, jumps=intensity > 0, delta=delta),
        levy=LevySpec(intensity, UniformMarks(-half_width, half_width)),
        f=f, horizon=horizon, dt=dt, n_particles=n_particles,
        initial_law=InitialLaw.point(s0),
        state_grid=StateGrid.with_spacing(-12.0, 12.0, 0.01),
        seed=seed, name="tanh",
    )


BUILDERS = {
    "gaussian_null": gaussian_null,
    "common_noise_only": common_noise_only,
    "ou_prosumer": ou_prosumer,
    "jump_drift_free": jump_drift_free,
    "tanh_jumps": tanh_jumps,
}


# ---------------------------------------------------------------------------
# family checks


def _const_value(d: dict) -> float:
    if d["name"] == "zero":
        return 0.0
    if d["name"] == "constant":
        return float(d["value"])
    raise ValueError(f"closed forms need constant diffusions, got {d['name']!r}")


def _family_params(scn: Scenario) -> dict:
    """Parameters of the named family, or ValueError if the scenario does not fit it."""
    fam = scn.name
    if fam not in CLOSED_FORM_FAMILIES:
        raise ValueError(f"no closed form for scenario {fam!r}; name it one of {CLOSED_FORM_FAMILIES}")
    spec = scn.coeffs.spec
    if spec is None:
        raise ValueError("closed forms need named coefficients")
    drift = spec["drift"]
    sigma = _const_value(spec["diff_idio"])
    sigma_o = _const_value(spec["diff_common"])
    jumps = spec["jump_gamma"]["name"] != "zero" and scn.levy.intensity > 0
    law = scn.initial_law
    if not 0.0 < scn.f < 1.0:
        raise ValueError("closed-form quantiles need 0 < f < 1")
    p = {"sigma": sigma, "sigma_o": sigma_o}
    if fam == "gaussian_null":
        if drift["name"] != "zero" or jumps or law.kind not in ("gaussian", "point"):
            raise ValueError("gaussian_null needs zero drift, no jumps and a gaussian or point start")
        p["mean"], p["std"] = law.center(), law.spread()
    elif fam == "ou":
        if drift["name"] != "ou" or jumps or law.kind not in ("gaussian", "point"):
            raise ValueError("ou needs the ou drift, no jumps and a gaussian or point start")
        if scn.control_policy not in ("quantile_tracking", {"name": "quantile_tracking"}):
            raise ValueError("the ou closed form assumes the quantile-tracking policy")
        p["alpha"] = float(drift.get("alpha", 1.0))
    elif fam in ("tanh", "jump_drift_free"):
        if law.kind != "point":
            raise ValueError(f"{fam} needs a point-mass start")
        g = spec["jump_gamma"]
        if jumps and (g["name"] != "theta" or float(g.get("scale", 1.0)) != 1.0):
            raise ValueError(f"{fam} needs jump size gamma = theta")
        if sigma != 1.0:
            raise ValueError(f"{fam} needs unit idiosyncratic diffusion")
        if fam == "tanh":
            if drift["name"] != "tanh":
                raise ValueError("tanh needs the tanh drift")
            p["delta"] = float(drift.get("delta", 1.0))
        elif drift["name"] != "zero":
            raise ValueError("jump_drift_free needs zero drift")
        p["s0"] = law.value
    return p


def has_closed_form(scn: Scenario) -> bool:
    try:
        _family_params(scn)
    except ValueError:
        return False
    return True


def closed_form_path(scn: Scenario, bo: np.ndarray) -> QuantilePath:
    """Closed-form quantile path conditioned on the common path ``bo``."""
    p = _family_params(scn)
    t = scn.times
    bo = np.asarray(bo, dtype=float)
    f = scn.f
    fam = scn.name
    if fam == "gaussian_null":
        sd = np.sqrt(p["std"] ** 2 + p["sigma"] ** 2 * t)
        vals = p["mean"] + p["sigma_o"] * bo + sd * inv_norm_cdf(f)
        return QuantilePath(t, vals, f, bo, "closed_form")
    if fam == "ou":
        return ou_quantile_closed_form(p["alpha"], p["sigma"], p["sigma_o"], scn.initial_law, f, bo, t)
    if fam == "jump_drift_free":
        vals = np.array([jump_free_drift_quantile(p["sigma_o"], scn.levy, f, tk, bk, s0=p["s0"])
                         for tk, bk in zip(t, bo)])
        return QuantilePath(t, vals, f, bo, "closed_form")
    vals = np.empty(t.size)
    vals[0] = p["s0"]
    for k in range(1, t.size):
        fld = tanh_closed_form_density(p["delta"], scn.levy, t[k], scn.state_grid, p["s0"], p["sigma_o"] * bo[k])
        vals[k] = fld.quantile(f)
    return QuantilePath(t, vals, f, bo, "closed_form")


def analytic_score(scn: Scenario, bo: np.ndarray) -> AnalyticScore | None:
    """Exact (log m)_s for the gaussian families, else None."""
    fam = scn.name
    if fam not in ("gaussian_null", "ou") or not has_closed_form(scn):
        return None
    p = _family_params(scn)
    t_grid = scn.times
    bo = np.asarray(bo, dtype=float)
    if fam == "gaussian_null":
        def score(t, x):
            b = float(np.interp(t, t_grid, bo))
            var = p["std"] ** 2 + p["sigma"] ** 2 * t
            return -(x - p["mean"] - p["sigma_o"] * b) / var

        return AnalyticScore(score)
    path = ou_quantile_closed_form(p["alpha"], p["sigma"], p["sigma_o"], scn.initial_law, scn.f, bo, t_grid)
    sd = ou_total_std(p["alpha"], p["sigma"], scn.initial_law, t_grid)
    center = path.values - sd * inv_norm_cdf(scn.f)

    def score(t, x):
        c = float(np.interp(t, t_grid, center))
        s = float(np.interp(t, t_grid, sd))
        return -(x - c) / (s * s)

    return AnalyticScore(score)

