import math

import numpy as np
import pytest

from qmfg import stochastics as st
from qmfg.density import fpk_drift
from qmfg.model import InitialLaw, LevySpec, NormalMarks, Scenario, StateGrid, UniformMarks, named_coefficients
from qmfg.quantile import (
    AnalyticScore,
    QuantilePath,
    ScoreSource,
    gaussian_quantile,
    integrate_quantile_ode,
    integrate_quantile_sde,
    inv_norm_cdf,
    jump_free_drift_quantile,
    ou_closed_form_residual,
    ou_quantile_closed_form,
    ou_total_std,
    ou_variance,
    tanh_closed_form_density,
    wasserstein2_from_quantiles,
)
from qmfg.scenarios import gaussian_null, ou_prosumer

from oracles import normal_cdf_series, normal_quantile_bisection

PHI1 = 0.841344746
UNIFORM = UniformMarks(-1.0, 1.0)


def test_inv_norm_cdf_examples():
    assert inv_norm_cdf(0.5) == 0.0
    assert abs(inv_norm_cdf(0.975) - normal_quantile_bisection(0.975)) < 1e-5
    assert abs(inv_norm_cdf(0.975) - 1.959964) < 1e-5
    assert abs(inv_norm_cdf(PHI1) - 1.0) < 1e-5


def test_inv_norm_cdf_inverse_accuracy():
    f = np.concatenate([np.linspace(1e-4, 1 - 1e-4, 301), [0.02, 0.5 + 1e-9, 0.999]])
    x = inv_norm_cdf(f)
    worst = max(abs(normal_cdf_series(float(v)) - p) for v, p in zip(x, f))
    assert worst < 1e-12


def test_inv_norm_cdf_symmetry_and_monotone():
    f = np.linspace(1e-3, 1 - 1e-3, 999)
    x = inv_norm_cdf(f)
    assert np.all(np.diff(x) > 0)
    np.testing.assert_allclose(inv_norm_cdf(1 - f), -x, atol=1e-10)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5, float("nan")])
def test_inv_norm_cdf_domain(bad):
    with pytest.raises(ValueError):
        inv_norm_cdf(bad)


def test_gaussian_quantile():
    assert gaussian_quantile(3.0, 0.0, 0.9) == 3.0
    assert abs(gaussian_quantile(0.0, 2.0, PHI1) - 2.0) < 2e-5
    f = np.linspace(0.01, 0.99, 100)
    assert np.all(np.diff(gaussian_quantile(1.0, 0.5, f)) > 0)
    with pytest.raises(ValueError):
        gaussian_quantile(0.0, -1.0, 0.5)


class Never(ScoreSource):
    def __call__(self, step, t, x):
        raise AssertionError("score must not be evaluated")


class AlwaysFloored(ScoreSource):
    def __call__(self, step, t, x):
        return 0.0, True


def test_sde_zero_coefficients_constant():
    scn = Scenario(initial_law=InitialLaw.gaussian(0.5, 1.0), f=0.7, horizon=1.0, dt=1e-2)
    path = integrate_quantile_sde(scn, Never())
    np.testing.assert_array_equal(path.values, np.full(path.values.size, path.values[0]))
    assert path.values[0] == pytest.approx(0.5 + inv_norm_cdf(0.7))


def test_sde_gaussian_null_analytic_score():
    scn = gaussian_null(horizon=3.0, dt=1e-3)
    score = AnalyticScore(lambda t, x: -x / (1.0 + t))
    path = integrate_quantile_sde(scn, score)
    exact = np.sqrt(1.0 + path.times) * inv_norm_cdf(scn.f)
    assert np.max(np.abs(path.values - exact)) < 2e-3


def test_sde_common_noise_only_exact():
    scn = Scenario(coeffs=named_coefficients(sigma_o=1.0), initial_law=InitialLaw.gaussian(0.0, 1.0),
                   f=0.3, horizon=1.0, dt=1e-3, seed=11)
    path = integrate_quantile_sde(scn, Never())
    bo = st.brownian_path(st.NoisePlan(11, st.COMMON_STREAM, 1e-3), scn.n_steps)
    np.testing.assert_array_equal(path.common_path, bo)
    np.testing.assert_allclose(path.values - path.values[0], bo, atol=1e-12)


def test_sde_floor_budget():
    scn = gaussian_null(horizon=0.1, dt=1e-2)
    with pytest.raises(ValueError, match="less extreme f or more particles"):
        integrate_quantile_sde(scn, AlwaysFloored())


def test_ode_zero_coefficients_constant():
    scn = Scenario(initial_law=InitialLaw.point(2.0), horizon=1.0, dt=1e-2)
    assert np.all(integrate_quantile_ode(scn, Never()).values == 2.0)


def test_ode_gaussian_null():
    scn = gaussian_null(horizon=3.0, dt=1e-3)
    path = integrate_quantile_ode(scn, AnalyticScore(lambda t, x: -x / (1.0 + t)))
    exact = np.sqrt(1.0 + path.times) * inv_norm_cdf(scn.f)
    assert np.max(np.abs(path.values - exact)) < 1e-4


def test_ode_rejects_common_noise():
    with pytest.raises(ValueError, match="sigma_o = 0"):
        integrate_quantile_ode(gaussian_null(sigma_o=0.5, horizon=0.1), Never())


def test_ode_ou_deterministic_part():
    # a gaussian start: from a point mass the score term amplifies start-up error by sd(T) / sd(dt)
    scn = ou_prosumer(sigma_o=0.0, horizon=1.0, dt=1e-3).with_(initial_law=InitialLaw.gaussian(0.0, 0.5))
    t = scn.times
    sd = ou_total_std(1.0, math.sqrt(2.0), scn.initial_law, t)
    cf = ou_quantile_closed_form(1.0, math.sqrt(2.0), 0.0, scn.initial_law, scn.f, np.zeros(t.size), t)
    center = cf.values - sd * inv_norm_cdf(scn.f)

    def score(tt, x):
        s = max(float(np.interp(tt, t, sd)), 1e-300)
        return -(x - float(np.interp(tt, t, center))) / (s * s)

    path = integrate_quantile_ode(scn, AnalyticScore(score))
    assert np.max(np.abs(path.values - cf.values)) < 1e-3


def test_ou_variance_examples():
    assert ou_variance(1.0, 1.0, 0.0)[0] == 0.0
    s, _ = ou_variance(1.0, math.sqrt(2.0), 1.0)
    assert abs(s - math.sqrt(1.0 - math.exp(-2.0))) < 1e-6
    with pytest.raises(ValueError):
        ou_variance(1.0, 1.0, -0.1)


def test_ou_variance_identity():
    rng = np.random.default_rng(4)
    for alpha, t in zip(rng.uniform(0.1, 3.0, 50), rng.uniform(0.1, 5.0, 50)):
        assert abs(ou_variance(alpha, 1.0, t)[1]) < 1e-4


def test_ou_variance_time_dependent_sigma():
    sig = lambda u: 1.0 + 0.5 * math.sin(u)  # noqa: E731
    s, r = ou_variance(0.7, sig, 2.0)
    assert abs(r) < 1e-4 and s > 0


def test_ou_closed_form_median_from_origin():
    t = np.linspace(0, 1, 101)
    path = ou_quantile_closed_form(1.0, math.sqrt(2.0), 0.0, InitialLaw.point(0.0), 0.5, np.zeros(t.size), t)
    assert np.all(path.values == 0.0)


def test_ou_closed_form_at_one():
    from scipy.integrate import quad

    t = np.linspace(0, 1, 1001)
    law = InitialLaw.point(0.0)
    path = ou_quantile_closed_form(1.0, math.sqrt(2.0), 0.0, law, PHI1, np.zeros(t.size), t)
    sigma_nc = math.sqrt(1.0 - math.exp(-2.0))
    # the common-noise-free part alone is sigma_nc(1) Q_Z(f)
    assert abs(ou_total_std(1.0, math.sqrt(2.0), law, [1.0])[0] * inv_norm_cdf(PHI1) - 0.9299) < 1e-3
    # the mean follows alpha (m^f - mean), adding alpha Q_Z(f) int_0^1 sigma_nc
    feedback, _ = quad(lambda u: math.sqrt(1.0 - math.exp(-2.0 * u)), 0.0, 1.0)
    assert abs(path.values[-1] - (sigma_nc + feedback)) < 1e-3


def _explicit_ou(alpha, sigma, sigma_o, law, f, t, bo):
    # m = mu0 + Q_Z(f) (sd(t) + alpha int_0^t sd) + sigma_o B_o
    sd = ou_total_std(alpha, sigma, law, t)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (sd[1:] + sd[:-1]) * np.diff(t))])
    mu0 = law.value if law.kind == "point" else law.mean
    return mu0 + inv_norm_cdf(f) * (sd + alpha * integral) + sigma_o * bo


@pytest.mark.parametrize("law", [InitialLaw.point(0.0), InitialLaw.gaussian(0.4, 0.6)])
def test_ou_closed_form_decomposition(law):
    dt = 1e-3
    t = np.arange(1001) * dt
    bo = st.brownian_path(st.NoisePlan(6, 0, dt), 1000)
    path = ou_quantile_closed_form(1.3, math.sqrt(2.0), 0.3, law, PHI1, bo, t)
    base = ou_quantile_closed_form(1.3, math.sqrt(2.0), 0.3, law, PHI1, np.zeros(t.size), t)
    np.testing.assert_allclose(path.values - base.values, 0.3 * bo, atol=1e-6)
    np.testing.assert_allclose(path.values, _explicit_ou(1.3, math.sqrt(2.0), 0.3, law, PHI1, t, bo), atol=1e-5)


def test_ou_closed_form_residual_small():
    scn = ou_prosumer()
    bo = st.brownian_path(st.NoisePlan(scn.seed, 0, scn.dt), scn.n_steps)
    path = ou_quantile_closed_form(1.0, math.sqrt(2.0), 0.3, scn.initial_law, scn.f, bo, scn.times)
    r = ou_closed_form_residual(path, 1.0, math.sqrt(2.0), 0.3, scn.initial_law)
    assert np.mean(np.abs(r)) < 1e-3 * scn.dt


def test_ou_grid_mismatch():
    with pytest.raises(ValueError, match="differ"):
        ou_quantile_closed_form(1.0, 1.0, 0.0, InitialLaw.point(0.0), 0.5, np.zeros(5), np.linspace(0, 1, 6))


TANH_GRID = StateGrid.with_spacing(-12.0, 12.0, 0.01)


@pytest.mark.parametrize("delta", [0.5, 1.0])
def test_tanh_without_jumps_is_tilted_gaussian(delta):
    fld = tanh_closed_form_density(delta, LevySpec(0.0), 1.0, TANH_GRID)
    x = TANH_GRID.x
    want = np.cosh(delta * x) * math.exp(-0.5 * delta**2) * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    assert abs(fld.raw_mass - 1.0) < 1e-4
    np.testing.assert_allclose(fld.values * fld.raw_mass, want, atol=1e-12)


@pytest.mark.parametrize("delta,intensity", [(0.5, 0.5), (0.5, 1.0), (1.0, 1.0)])
def test_tanh_raw_mass_formula(delta, intensity):
    # for symmetric marks the grid mass is E cosh(delta N) with N the tilted compound poisson variable
    nodes, w = UNIFORM.quadrature()
    ecosh = float(np.sum(w * np.cosh(delta * nodes)))
    ecosh2 = float(np.sum(w * np.cosh(delta * nodes) ** 2))
    lam_hat = intensity * ecosh
    want = math.exp(lam_hat * (ecosh2 / ecosh - 1.0))
    fld = tanh_closed_form_density(delta, LevySpec(intensity, UNIFORM), 1.0, TANH_GRID)
    assert abs(fld.raw_mass - want) < 1e-4


def test_tanh_zero_tilt_is_jump_diffusion():
    lev = LevySpec(1.0, UNIFORM)
    fld = tanh_closed_form_density(0.0, lev, 1.0, TANH_GRID)
    assert abs(fld.raw_mass - 1.0) < 1e-4
    for f in (0.1, 0.3, 0.5, 0.8):
        assert abs(fld.quantile(f) - jump_free_drift_quantile(0.0, lev, f, 1.0, 0.0, h=1e-3)) < 2 * TANH_GRID.h


def test_tanh_parity():
    fld = tanh_closed_form_density(0.5, LevySpec(1.0, NormalMarks(0.0, 0.5)), 1.0, TANH_GRID)
    np.testing.assert_allclose(fld.values, fld.values[::-1], atol=1e-12)


def test_tanh_shifted():
    a = tanh_closed_form_density(0.5, LevySpec(0.0), 1.0, TANH_GRID)
    b = tanh_closed_form_density(0.5, LevySpec(0.0), 1.0, TANH_GRID, s0=0.5, sigma_o_B_o=0.5)
    k = int(round(1.0 / TANH_GRID.h))
    np.testing.assert_allclose(b.values[k:], a.values[:-k], atol=1e-9)


def test_tanh_asymmetric_marks_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        tanh_closed_form_density(0.5, LevySpec(1.0, UniformMarks(0.0, 1.0)), 1.0, TANH_GRID)


@pytest.mark.parametrize("delta", [0.5, 1.0])
def test_tanh_density_solves_fpk(delta):
    scn = Scenario(coeffs=named_coefficients("tanh", sigma=1.0, delta=delta), state_grid=TANH_GRID, dt=1e-4)
    tau = 1e-3
    m = tanh_closed_form_density(delta, LevySpec(0.0), 1.0, TANH_GRID)
    dm = (tanh_closed_form_density(delta, LevySpec(0.0), 1.0 + tau, TANH_GRID).values
          - tanh_closed_form_density(delta, LevySpec(0.0), 1.0 - tau, TANH_GRID).values) / (2 * tau)
    rhs, _, _ = fpk_drift(m, scn, 1.0)
    assert np.trapezoid(np.abs(dm - rhs), dx=TANH_GRID.h) < 5e-2


def test_jump_free_without_jumps():
    for f in (0.1, 0.5, 0.9):
        q = jump_free_drift_quantile(0.2, LevySpec(0.0), f, 2.0, 0.7, s0=1.0)
        assert q == pytest.approx(1.0 + 0.2 * 0.7 + math.sqrt(2.0) * inv_norm_cdf(f), abs=1e-12)


def test_jump_free_median_symmetric():
    h = 2e-3
    assert abs(jump_free_drift_quantile(0.2, LevySpec(1.0, UNIFORM), 0.5, 1.0, 0.0, h=h)) <= h


def test_jump_free_matches_brute_force_cdf():
    lev = LevySpec(1.0, UNIFORM)
    dens = st.compound_poisson_density(lev, 1.0, TANH_GRID)
    x = TANH_GRID.x

    def cdf(q):
        from scipy.special import ndtr

        return dens.atom * ndtr(q) + np.trapezoid(dens.density * ndtr(q - x), x)

    for f in (0.2, 0.3, 0.7):
        q = jump_free_drift_quantile(0.0, lev, f, 1.0, 0.0, h=1e-3)
        assert abs(cdf(q) - f) < 2e-3


def test_jump_free_vector_and_zero_time():
    lev = LevySpec(1.0, UNIFORM)
    qs = jump_free_drift_quantile(0.3, lev, np.array([0.2, 0.8]), 0.0, 1.0, s0=0.5)
    np.testing.assert_array_equal(qs, [0.8, 0.8])
    qs = jump_free_drift_quantile(0.3, lev, np.array([0.2, 0.5, 0.8]), 1.0, 0.0)
    assert np.all(np.diff(qs) > 0)


def test_wasserstein():
    q0 = inv_norm_cdf
    assert wasserstein2_from_quantiles(q0, q0) == 0.0
    assert abs(wasserstein2_from_quantiles(q0, lambda f: q0(f) + 0.7) - 0.7) < 1e-12
    w = wasserstein2_from_quantiles(q0, lambda f: 1.0 + 2.0 * q0(f))
    assert abs(w - math.sqrt(2.0)) < 1e-6
    with pytest.raises(ValueError):
        wasserstein2_from_quantiles(q0, lambda f: np.full(np.shape(f), np.nan))


def test_quantile_path_csv_and_gaps(tmp_path):
    t = np.linspace(0, 1, 11)
    a = QuantilePath(t, t, 0.5, np.zeros(11), "sde")
    b = QuantilePath(t, t + 0.1, 0.5, np.zeros(11), "ode")
    assert a.sup_gap(b) == pytest.approx(0.1)
    assert a.l2_gap(b) == pytest.approx(0.1)
    a.write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,quantile,common_noise,method" and lines[1].endswith(",sde")
    with pytest.raises(ValueError):
        QuantilePath(t, t[:-1], 0.5, np.zeros(11), "sde")
