"""n-particle Euler-Maruyama system coupled through its empirical quantile."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import stochastics as st
from .model import Scenario


def quantile_rank(n: int, f: float) -> int:
    """Smallest k in 1..n with k / n >= f (the inf rule on the empirical CDF)."""
    if n < 1:
        raise ValueError("need at least one state")
    if not 0.0 < f <= 1.0:
        raise ValueError(f"fraction f={f} must lie in (0, 1]")
    k = min(max(int(math.ceil(f * n)), 1), n)
    # guard against rounding in f * n
    while k > 1 and (k - 1) / n >= f:
        k -= 1
    while k < n and k / n < f:
        k += 1
    return k


def empirical_quantile(states, f: float) -> float:
    """Lower order statistic of rank ceil(f * n)."""
    states = np.asarray(states, dtype=float).ravel()
    if states.size == 0:
        raise ValueError("empirical_quantile of an empty sample")
    k = quantile_rank(states.size, f)
    return float(np.partition(states, k - 1)[k - 1])


@dataclass(frozen=True)
class ParticleEnsemble:
    states: np.ndarray
    t: float
    step: int
    quantile_value: float
    common_noise: float = 0.0
    common_increment_log: float = 0.0

    def __post_init__(self):
        self.states.setflags(write=False)


class NonFiniteState(ArithmeticError):
    pass


def _bcast(x, n):
    x = np.asarray(x, dtype=float)
    return x if x.shape == (n,) else np.broadcast_to(x, (n,))


def initial_states(scn: Scenario) -> np.ndarray:
    """i.i.d. draws from the initial law; particle i uses stream i + 1."""
    n = scn.n_particles
    law = scn.initial_law
    streams = st.particle_streams(n)
    if law.kind == "point":
        return np.full(n, law.value)
    if law.kind == "gaussian":
        return law.mean + law.std * st.standard_normals(scn.seed, streams, 0, st.PURPOSE_INITIAL)
    vals = np.asarray(law.values)
    u = st.uniforms(scn.seed, streams, 0, st.PURPOSE_INITIAL)
    return vals[np.minimum((u * vals.size).astype(np.int64), vals.size - 1)]


def _jump_terms(scn: Scenario, t, s, q, a, step):
    """Sum of jump sizes minus compensator, per particle."""
    lev = scn.levy
    n = s.size
    if lev.intensity == 0:
        return 0.0
    dt = scn.dt
    c = scn.coeffs
    counts = st.poisson_counts(scn.seed, st.particle_streams(n), step, lev.intensity * dt)
    owners = np.repeat(np.arange(n), counts)
    jumps = np.zeros(n)
    if owners.size:
        theta = st.jump_marks(scn.seed, owners + 1, step, lev)
        g = np.asarray(c.jump_gamma(t, s[owners], q, a[owners], theta), dtype=float)
        jumps = np.bincount(owners, weights=g, minlength=n)
    nodes, w = lev.marks.quadrature()
    if c.gamma_state_free:
        comp = lev.intensity * dt * float(np.sum(w * np.asarray(c.jump_gamma(t, 0.0, q, 0.0, nodes), dtype=float)))
    else:
        comp = np.empty(n)
        for lo in range(0, n, 4096):
            sl = slice(lo, lo + 4096)
            g = np.asarray(c.jump_gamma(t, s[sl, None], q, a[sl, None], nodes[None, :]), dtype=float)
            comp[sl] = lev.intensity * dt * (g @ w)
    return jumps - comp


def step_ensemble(e: ParticleEnsemble, scn: Scenario, step: int, check: bool = True) -> ParticleEnsemble:
    """One explicit step; coefficients see the pre-step quantile."""
    s = e.states
    n = s.size
    t, q, dt = e.t, e.quantile_value, scn.dt
    c = scn.coeffs
    a = _bcast(scn.policy(t, s, q), n)
    b = c.drift(t, s, q, a)
    sig = c.diff_idio(t, s, q, a)
    sig_o = c.diff_common(t, s, q, a)
    dB = st.brownian_increments(scn.seed, st.particle_streams(n), step, dt)
    dBo = st.brownian_increment(st.NoisePlan(scn.seed, st.COMMON_STREAM, dt), step)
    with np.errstate(over="ignore", invalid="ignore"):
        new = s + np.asarray(b) * dt + np.asarray(sig) * dB + np.asarray(sig_o) * dBo + _jump_terms(scn, t, s, q, a, step)
    new = np.array(_bcast(new, n))
    finite = np.isfinite(new)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        if check:
            raise NonFiniteState(f"particle {bad} is not finite after step {step}")
        q_new = float("nan")
    else:
        q_new = empirical_quantile(new, scn.f)
    shift = float(np.asarray(c.diff_common(t, q, q, scn.policy(t, q, q)))) * dBo
    return ParticleEnsemble(new, (step + 1) * dt, step + 1, q_new, e.common_noise + dBo, e.common_increment_log + shift)


def initial_ensemble(scn: Scenario) -> ParticleEnsemble:
    s0 = initial_states(scn)
    return ParticleEnsemble(s0, 0.0, 0, empirical_quantile(s0, scn.f))


def iter_ensembles(scn: Scenario, check: bool = True) -> Iterator[ParticleEnsemble]:
    """Yield the ensemble at steps 0, 1, ..., n_steps."""
    e = initial_ensemble(scn)
    yield e
    for k in range(scn.n_steps):
        e = step_ensemble(e, scn, k, check=check)
        yield e
        if not np.isfinite(e.quantile_value):
            return


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    quantile_path: np.ndarray
    common_path: np.ndarray
    moment_path: np.ndarray
    state_snapshots: list[tuple[float, np.ndarray]] = field(default_factory=list)
    completed: bool = True

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "quantile", "common_noise", "mean_abs_state"])
            for row in zip(self.times, self.quantile_path, self.common_path, self.moment_path):
                w.writerow([f"{v:.17g}" for v in row])

    def write_snapshots_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "particle", "state"])
            for t, states in self.state_snapshots:
                for i, v in enumerate(states):
                    w.writerow([f"{t:.17g}", i, f"{v:.17g}"])

    @classmethod
    def read_csv(cls, path) -> "TrajectoryRecord":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def simulate(scn: Scenario, snapshot_every: int | None = None, on_nonfinite: str = "raise") -> TrajectoryRecord:
    """Run all T/dt steps from i.i.d. initial states.

    ``on_nonfinite="stop"`` ends the run at the first non-finite state and
    keeps it in the record instead of raising.
    """
    if on_nonfinite not in ("raise", "stop"):
        raise ValueError("on_nonfinite must be 'raise' or 'stop'")
    times, qs, bo, mom, snaps = [], [], [], [], []
    completed = True
    for e in iter_ensembles(scn, check=on_nonfinite == "raise"):
        times.append(e.t)
        qs.append(e.quantile_value)
        bo.append(e.common_noise)
        with np.errstate(invalid="ignore", over="ignore"):
            mom.append(float(np.mean(np.abs(e.states))))
        if snapshot_every and e.step % snapshot_every == 0:
            snaps.append((e.t, np.array(e.states)))
        if not np.isfinite(e.quantile_value):
            completed = False
    return TrajectoryRecord(np.array(times), np.array(qs), np.array(bo), np.array(mom), snaps, completed)


def moment_bound_check(rec: TrajectoryRecord) -> tuple[float, bool]:
    """sup_t of mean|s| + |quantile| and whether every recorded value is finite."""
    with np.errstate(invalid="ignore", over="ignore"):
        total = np.asarray(rec.moment_path) + np.abs(np.asarray(rec.quantile_path))
        finite = bool(rec.completed and np.all(np.isfinite(total)) and np.all(np.isfinite(rec.common_path)))
        sup = float(np.max(total)) if total.size else 0.0
    return sup, finite
