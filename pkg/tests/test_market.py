import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from qmfg.market import (
    AdjointVector,
    AuctionRound,
    clearing_price,
    hamiltonian,
    operator_cost,
    ou_operator_cost,
    quantile_tracking_policy,
    read_bids_csv,
)
from qmfg.model import InitialLaw, LevySpec, UniformMarks, named_coefficients
from qmfg.particles import simulate
from qmfg.quantile import ou_quantile_closed_form
from qmfg.scenarios import ou_prosumer

from oracles import sorted_quantile

NO_JUMPS = LevySpec(0.0)


def theta(th):
    return th


def test_hamiltonian_payoff_only():
    assert hamiltonian(2.5, 7.0, 3.0, 1.0, theta, AdjointVector(), NO_JUMPS) == 2.5


def test_hamiltonian_drift_pairing():
    assert hamiltonian(0.0, 1.7, 3.0, 1.0, theta, AdjointVector(p=1.0), NO_JUMPS) == 1.7


def test_hamiltonian_full():
    adj = AdjointVector(1.0, 1.0, 1.0, lambda th: np.ones_like(th))
    h = hamiltonian(1.0, 2.0, 3.0, 4.0, theta, adj, LevySpec(1.0, UniformMarks(-1, 1)))
    assert h == pytest.approx(10.0, abs=1e-12)


def test_hamiltonian_linear():
    lev = LevySpec(2.0, UniformMarks(0.0, 1.0))
    a = AdjointVector(0.3, -1.0, 2.0, lambda th: th**2)
    b = AdjointVector(-0.7, 0.5, 1.0, lambda th: np.cos(th))
    mix = AdjointVector(0.3 + 2 * -0.7, -1.0 + 2 * 0.5, 2.0 + 2 * 1.0, lambda th: th**2 + 2 * np.cos(th))
    ha = hamiltonian(0.0, 1.2, 0.4, 0.9, theta, a, lev)
    hb = hamiltonian(0.0, 1.2, 0.4, 0.9, theta, b, lev)
    assert hamiltonian(0.0, 1.2, 0.4, 0.9, theta, mix, lev) == pytest.approx(ha + 2 * hb, rel=1e-12)
    # jump integral of theta * theta^2 against 2 * U(0, 1) is 1/2
    assert ha == pytest.approx(1.2 * 0.3 - 0.4 + 1.8 + 0.5, rel=1e-12)


def test_hamiltonian_rejects_non_finite():
    with pytest.raises(ValueError):
        hamiltonian(float("nan"), 0, 0, 0, theta, AdjointVector(), NO_JUMPS)
    with pytest.raises(ValueError):
        hamiltonian(0, 0, 0, 0, theta, AdjointVector(rbar=lambda th: np.full(np.shape(th), np.inf)),
                    LevySpec(1.0, UniformMarks(-1, 1)))


def test_clearing_ordered_bids():
    res = clearing_price(AuctionRound(np.exp(np.arange(1, 11)), 3))
    assert res.log_price == pytest.approx(3.0)
    assert res.winners == (0, 1, 2)
    assert res.f == pytest.approx(0.3)


def test_clearing_everyone_wins():
    bids = np.array([3.0, 1.0, 2.0])
    res = clearing_price(AuctionRound(bids, 3))
    assert res.log_price == math.log(3.0)
    assert res.winners == (0, 1, 2)


def test_clearing_matches_quantile():
    bids = np.random.default_rng(1).lognormal(size=100)
    res = clearing_price(AuctionRound(bids, 37))
    assert res.log_price == sorted_quantile(np.log(bids).tolist(), 0.37)


def test_clearing_ties_go_to_lower_index():
    res = clearing_price(AuctionRound(np.array([2.0, 1.0, 2.0, 2.0, 5.0]), 3))
    assert res.winners == (0, 1, 2)
    assert res.log_price == math.log(2.0)


@settings(max_examples=200, deadline=None)
@given(hst.lists(hst.integers(1, 30), min_size=1, max_size=60), hst.data(),
       hst.floats(0.01, 100.0))
def test_clearing_invariants(ticks, data, c):
    bids = np.exp(np.asarray(ticks, dtype=float) / 7.0)
    nbar = data.draw(hst.integers(1, bids.size))
    res = clearing_price(AuctionRound(bids, nbar))
    win = set(res.winners)
    assert len(win) == nbar
    lb = np.log(bids)
    losers = [j for j in range(bids.size) if j not in win]
    for i in win:
        assert lb[i] <= res.log_price
        for j in losers:
            assert lb[i] < lb[j] or (lb[i] == lb[j] and i < j)
    scaled = clearing_price(AuctionRound(bids * c, nbar))
    assert scaled.winners == res.winners
    assert scaled.log_price == pytest.approx(res.log_price + math.log(c), abs=1e-12)


@pytest.mark.parametrize("bids,nbar", [([1.0, -2.0], 1), ([1.0, 0.0], 1), ([1.0, 2.0], 0), ([1.0, 2.0], 3)])
def test_round_validation(bids, nbar):
    with pytest.raises(ValueError):
        AuctionRound(np.array(bids), nbar)


def test_result_json_shape():
    d = clearing_price(AuctionRound(np.array([1.0, 2.0]), 1)).to_dict()
    assert set(d) == {"log_price", "winners", "f"}
    assert d["winners"] == [0]


def test_bids_csv(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("bid\n1.5\n2.5\n")
    np.testing.assert_array_equal(read_bids_csv(p), [1.5, 2.5])
    p.write_text("price\n1\n")
    with pytest.raises(ValueError, match="bid"):
        read_bids_csv(p)


def test_operator_cost():
    assert operator_cost(2.0, 5.0, 3.0) == 4.0
    assert operator_cost(2.0, 3.0, 5.0) == 0.0
    assert operator_cost(2.0, 3.0, 3.0) == 0.0
    d = np.linspace(0, 4, 9)
    costs = [operator_cost(1.5, x, 2.0) for x in d]
    assert np.all(np.diff(costs) >= 0)
    assert np.all(np.diff([operator_cost(1.5, 2.0, s) for s in d]) <= 0)


def test_operator_cost_monte_carlo():
    law = InitialLaw.point(0.0)
    est = ou_operator_cost(1.0, math.sqrt(2.0), 0.3, law, 0.8413, 1.0, 1e-2, 3.0, 2.0, 10_000, seed=5)
    assert abs(est.mean - est.closed_form_mean) < 3 * est.stderr
    t = np.arange(101) * 1e-2
    det = ou_quantile_closed_form(1.0, math.sqrt(2.0), 0.3, law, 0.8413, np.zeros(t.size), t).values[-1]
    assert est.closed_form_mean == pytest.approx(det)
    # m^f(T) = deterministic part + sigma_o B_o(T), so the spread is sigma_o sqrt(T)
    assert est.stderr * math.sqrt(10_000) == pytest.approx(0.3, rel=0.05)


def test_tracking_policy():
    pol = quantile_tracking_policy()
    assert pol(0.3, 5.0, -1.2) == -1.2
    drift = named_coefficients("ou", sigma=1.0, alpha=2.0).drift
    s = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_allclose(drift(0, s, 0.5, pol(0, s, 0.5)), 2.0 * (0.5 - s))


def test_offset_policy_shifts_quantile_by_elapsed_time():
    base = ou_prosumer(n_particles=100_000, horizon=1.0, dt=1e-2)
    a = simulate(base)
    b = simulate(base.with_(control_policy={"name": "quantile_offset", "offset": 1.0}))
    gap = b.quantile_path - a.quantile_path
    assert abs(gap[-1] - 1.0) < 0.05
    np.testing.assert_allclose(gap, a.times, atol=1e-9)
