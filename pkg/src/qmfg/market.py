"""Prosumer market pieces: Pontryagin function, auction clearing, operator cost."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import stochastics as st
from .model import LevySpec
from .particles import empirical_quantile


@dataclass(frozen=True)
class AdjointVector:
    p: float = 0.0
    q: float = 0.0
    q_o: float = 0.0
    rbar: Callable = field(default=lambda theta: np.zeros(np.shape(theta)))

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.p, self.q, self.q_o)):
            raise ValueError("adjoint values must be finite")


def hamiltonian(r: float, bdrift: float, sigma: float, sigma_o: float, gamma_fn: Callable,
                adj: AdjointVector, levy: LevySpec) -> float:
    """r + b p + sigma q + sigma_o q_o + int gamma(theta) rbar(theta) mu(d theta)."""
    for v in (r, bdrift, sigma, sigma_o):
        if not math.isfinite(v):
            raise ValueError("hamiltonian inputs must be finite")
    with np.errstate(invalid="ignore", over="ignore"):
        jump = levy.integrate(lambda th: np.asarray(gamma_fn(th), dtype=float) * np.asarray(adj.rbar(th), dtype=float))
    if not math.isfinite(jump):
        raise ValueError("jump integral of the hamiltonian is not finite")
    return r + bdrift * adj.p + sigma * adj.q + sigma_o * adj.q_o + jump


@dataclass(frozen=True)
class AuctionRound:
    bids: np.ndarray
    nbar: int
    unit_quantity: float = 0.0
    demand: float = 0.0
    supply_operator: float = 0.0

    def __post_init__(self):
        bids = np.asarray(self.bids, dtype=float).ravel()
        if bids.size == 0:
            raise ValueError("an auction round needs bids")
        if not np.all(np.isfinite(bids)) or np.any(bids <= 0):
            raise ValueError("bids must be finite and strictly positive")
        if not 1 <= int(self.nbar) <= bids.size:
            raise ValueError(f"nbar={self.nbar} must lie in 1..{bids.size}")
        if self.unit_quantity < 0:
            raise ValueError("unit quantity must be >= 0")
        object.__setattr__(self, "bids", bids)
        object.__setattr__(self, "nbar", int(self.nbar))

    @property
    def n(self) -> int:
        return self.bids.size

    @property
    def f(self) -> float:
        return self.nbar / self.n


@dataclass(frozen=True)
class AuctionResult:
    log_price: float
    winners: tuple[int, ...]
    f: float
    # unit reward per winner; bookkeeping only, never enters dynamics or cost
    rewards: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"log_price": self.log_price, "winners": list(self.winners), "f": self.f}


def clearing_price(rnd: AuctionRound) -> AuctionResult:
    """Price where the nbar lowest bids clear; ties go to the lower index."""
    logs = np.log(rnd.bids)
    price = empirical_quantile(logs, rnd.f)
    order = np.argsort(logs, kind="stable")
    winners = tuple(sorted(int(i) for i in order[:rnd.nbar]))
    return AuctionResult(price, winners, rnd.f, {i: 1.0 for i in winners})


def read_bids_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "bid" not in rows[0]:
        raise ValueError("bids CSV needs a 'bid' column")
    return np.array([float(r["bid"]) for r in rows])


def operator_cost(quantile_T: float, demand: float, supply: float) -> float:
    return quantile_T * max(demand - supply, 0.0)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int
    closed_form_mean: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths,
                "closed_form_mean": self.closed_form_mean}


def ou_operator_cost(alpha: float, sigma, sigma_o, s0_law, f: float, horizon: float, dt: float,
                     demand: float, supply: float, n_paths: int, seed: int = 0) -> CostEstimate:
    """Monte Carlo of E[m^f(T) (D - S_o)_+] over common paths of the O-U model.

    Path r draws B_o from stream 0 of ``replication_seed(seed, r)``.  The
    closed-form mean uses the zero common path, since m^f is affine in B_o
    and B_o has mean zero.
    """
    from .quantile import ou_quantile_batch

    if n_paths < 2:
        raise ValueError("need at least two paths for a standard error")
    n_steps = int(round(horizon / dt))
    times = np.arange(n_steps + 1) * dt
    paths = np.stack([st.brownian_path(st.NoisePlan(st.replication_seed(seed, r), st.COMMON_STREAM, dt), n_steps)
                      for r in range(n_paths)])
    qT = ou_quantile_batch(alpha, sigma, sigma_o, s0_law, f, paths, times)[:, -1]
    gap = max(demand - supply, 0.0)
    cost = qT * gap
    det = ou_quantile_batch(alpha, sigma, sigma_o, s0_law, f, np.zeros((1, times.size)), times)[0, -1]
    return CostEstimate(float(cost.mean()), float(cost.std(ddof=1) / math.sqrt(n_paths)), n_paths, float(det * gap))


def quantile_tracking_policy():
    """Best response a(t, s, q) = q, which zeroes the [a - q]_+ drift term."""

    def policy(t, s, q):
        return np.zeros(np.shape(s)) + q if np.ndim(s) else q

    policy.spec = "quantile_tracking"
    return policy
