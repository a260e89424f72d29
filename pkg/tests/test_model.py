import json
import math

import numpy as np
import pytest

from qmfg.model import (
    CoefficientSet,
    InitialLaw,
    LevySpec,
    NormalMarks,
    Scenario,
    StateGrid,
    UniformMarks,
    derivative_check,
    named_coefficients,
    policy_from_spec,
    validate_scenario,
)
from qmfg.scenarios import tanh_jumps

GRID_PTS = [(0.0, s, 0.0, 0.0) for s in np.linspace(-4, 4, 41)]


def test_zero_idiosyncratic_diffusion_flagged():
    scn = Scenario(coeffs=named_coefficients("zero", sigma=0.0), state_grid=StateGrid(-10, 10, 1000))
    rep = validate_scenario(scn)
    assert any("diff_idio must be positive" in m for m in rep.violations)


def test_fraction_one_flagged():
    scn = Scenario(coeffs=named_coefficients("zero", sigma=1.0), f=1.0)
    rep = validate_scenario(scn)
    assert any("fraction" in m for m in rep.violations)


def test_tanh_example_valid():
    rep = validate_scenario(tanh_jumps())
    assert rep.violations == []
    assert math.isfinite(rep.lipschitz_drift)


def test_validation_collects_every_problem():
    scn = Scenario(coeffs=named_coefficients("zero", sigma=0.0), f=0.0, horizon=1.0, dt=0.3,
                   n_particles=1, state_grid=StateGrid(-1, 1, 10), initial_law=InitialLaw.gaussian(0, 1))
    msgs = " | ".join(validate_scenario(scn).violations)
    for needle in ("fraction", "does not divide", "n_particles", "n_cells", "cover", "diff_idio"):
        assert needle in msgs


def test_non_finite_coefficient_reported_not_raised():
    def bad(t, s, q, a):
        return np.log(np.asarray(s, dtype=float) - 100.0)

    c = CoefficientSet(drift=bad, diff_idio=named_coefficients(sigma=1.0).diff_idio)
    rep = validate_scenario(Scenario(coeffs=c))
    assert any("drift" in m and "finite" in m for m in rep.violations)


def test_bad_mark_density_flagged():
    class Heavy(UniformMarks):
        def pdf(self, theta):
            return 1.4 * super().pdf(theta)

    lev = LevySpec(1.0, Heavy(-1, 1))
    scn = tanh_jumps().with_(levy=lev)
    assert not validate_scenario(scn).ok


def test_tanh_derivative_check():
    c = named_coefficients("tanh", sigma=1.0, delta=1.0)
    assert derivative_check(c, GRID_PTS) < 1e-6


def test_constant_derivative_exact():
    c = named_coefficients("zero", sigma=2.5)
    assert derivative_check(c, GRID_PTS) == 0.0


def test_wrong_derivative_flagged():
    c = CoefficientSet(drift=lambda t, s, q, a: s * s, drift_s=lambda t, s, q, a: 3.0 * s)
    err = derivative_check(c, GRID_PTS)
    assert math.isclose(err, 4.0 / 13.0, rel_tol=1e-6)  # |s| / (1 + 3|s|) at s = 4
    assert err > 1e-5


def test_derivative_check_names_bad_point():
    c = CoefficientSet(drift=lambda t, s, q, a: np.log(np.float64(s)), drift_s=lambda t, s, q, a: 1.0 / np.float64(s))
    with np.errstate(all="ignore"), pytest.raises(ValueError, match="s=0.0"):
        derivative_check(c, [(0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 0.0, 0.0)])


def test_derivative_check_permutation_invariant():
    c = named_coefficients("tanh", sigma=1.0, delta=2.0)
    pts = list(GRID_PTS)
    a = derivative_check(c, pts)
    assert derivative_check(c, pts[::-1]) == a
    assert derivative_check(c, pts) == a


def test_finite_difference_fallback():
    c = CoefficientSet(drift=lambda t, s, q, a: np.sin(s))
    assert math.isclose(c.d_drift(0, 0.3, 0, 0), math.cos(0.3), rel_tol=1e-8)


def test_scenario_json_round_trip():
    scn = tanh_jumps()
    d = json.loads(json.dumps(scn.to_dict()))
    back = Scenario.from_dict(d)
    assert back.to_dict() == scn.to_dict()
    s = np.linspace(-2, 2, 5)
    np.testing.assert_array_equal(back.coeffs.drift(0, s, 0, 0), scn.coeffs.drift(0, s, 0, 0))


def test_closure_policy_not_serializable():
    scn = Scenario(coeffs=named_coefficients(sigma=1.0), control_policy=lambda t, s, q: s)
    with pytest.raises(ValueError, match="closure"):
        scn.to_dict()


def test_policies():
    assert policy_from_spec("zero")(0, 1.0, 2.0) == 0.0
    assert float(policy_from_spec("quantile_tracking")(0, 1.0, 2.0)) == 2.0
    assert float(policy_from_spec({"name": "quantile_offset", "offset": 0.5})(0, 1.0, 2.0)) == 2.5
    with pytest.raises(ValueError):
        policy_from_spec("nope")


def test_mark_laws():
    for law in (UniformMarks(-1, 1), NormalMarks(0.0, 0.5)):
        lev = LevySpec(2.0, law)
        assert abs(lev.mark_mass() - 1.0) < 1e-6
        assert lev.symmetric
        assert math.isclose(lev.integrate(lambda th: np.ones_like(th)), 2.0, rel_tol=1e-12)
    assert not UniformMarks(0, 1).symmetric
    assert math.isclose(LevySpec(1.0, UniformMarks(-1, 1), delta_max=1.0).exp_moment_bound, math.e - 1, rel_tol=1e-5)  # |theta| has a kink at 0


def test_initial_law_quantiles():
    assert InitialLaw.point(2.0).quantile(0.3) == 2.0
    assert math.isclose(InitialLaw.gaussian(1, 2).quantile(0.5), 1.0, abs_tol=1e-12)
    assert InitialLaw.empirical([5, 1, 3, 4, 2]).quantile(0.6) == 3.0
