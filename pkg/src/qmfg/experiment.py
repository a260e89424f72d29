"""Experiment runner: quantile routes on a shared common path, gaps, sweeps."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import stochastics as st
from .density import DensityField, MollifierSpec, fpk_step, gaussian_field, max_stable_dt
from .model import Scenario, validate_scenario
from .particles import moment_bound_check, simulate
from .quantile import (ParticleScore, QuantilePath, _prop1_terms, common_path, integrate_quantile_ode,
                       integrate_quantile_sde)
from .scenarios import BUILDERS, analytic_score, closed_form_path, has_closed_form

ROUTES = ("particle", "sde", "ode", "closed_form", "fpk")
CODE_VERSION = f"qmfg {__version__}"


@dataclass
class ExperimentConfig:
    scenario: Scenario
    routes: tuple[str, ...] = ("particle",)
    replications: int = 1
    output_dir: Path = Path("qmfg-out")
    record_snapshots: bool = False
    score: str = "auto"
    bandwidth: float | str = "silverman"

    def __post_init__(self):
        self.routes = tuple(self.routes)
        self.output_dir = Path(self.output_dir)
        bad = [r for r in self.routes if r not in ROUTES]
        if bad:
            raise ValueError(f"unknown routes {bad}; choose from {ROUTES}")
        if not self.routes:
            raise ValueError("no routes requested")
        if len(set(self.routes)) != len(self.routes):
            raise ValueError("routes listed twice")
        if int(self.replications) < 1:
            raise ValueError("replications must be >= 1")
        if self.score not in ("auto", "analytic", "particle"):
            raise ValueError("score must be auto, analytic or particle")
        MollifierSpec(self.bandwidth).resolve([0.0, 1.0])
        self.replications = int(self.replications)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "scenario" in d:
            scn = Scenario.from_dict(d["scenario"])
        elif "builder" in d:
            b = d["builder"]
            if b["name"] not in BUILDERS:
                raise ValueError(f"unknown scenario builder {b['name']!r}")
            scn = BUILDERS[b["name"]](**b.get("params", {}))
        else:
            raise ValueError("config needs a 'scenario' or a 'builder' entry")
        return cls(scn, tuple(d.get("routes", ["particle"])), d.get("replications", 1),
                   Path(d.get("output_dir", "qmfg-out")), bool(d.get("record_snapshots", False)),
                   d.get("score", "auto"), d.get("bandwidth", "silverman"))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def check_config(cfg: ExperimentConfig) -> None:
    """Route/scenario compatibility, raised before any computation."""
    scn = cfg.scenario
    if "closed_form" in cfg.routes and not has_closed_form(scn):
        raise ValueError(f"closed_form route needs a named family scenario; {scn.name!r} does not qualify")
    if "ode" in cfg.routes:
        x = scn.initial_law.center()
        a = scn.policy(0.0, x, x)
        if float(np.max(np.abs(np.asarray(scn.coeffs.diff_common(0.0, x, x, a))))) != 0.0:
            raise ValueError("ode route needs sigma_o = 0")
    if cfg.score == "analytic" and ("sde" in cfg.routes or "ode" in cfg.routes):
        if analytic_score(scn, np.zeros(scn.n_steps + 1)) is None:
            raise ValueError("no analytic score for this scenario; use score 'particle'")
    if "fpk" in cfg.routes:
        if not scn.coeffs.gamma_state_free:
            raise ValueError("fpk route needs state-independent jump sizes")
        if scn.initial_law.kind == "empirical":
            raise ValueError("fpk route needs a gaussian or point-mass start")
    if scn.n_steps < 1:
        raise ValueError("experiment needs at least one time step")


def scenario_hash(scn: Scenario) -> str | None:
    try:
        blob = json.dumps(scn.to_dict(), sort_keys=True)
    except ValueError:
        return None
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# routes


def _score_for(cfg: ExperimentConfig, scn: Scenario, bo: np.ndarray):
    if cfg.score in ("auto", "analytic"):
        sc = analytic_score(scn, bo)
        if sc is not None:
            return sc
    return ParticleScore(scn, MollifierSpec(cfg.bandwidth))


def _fpk_initial(scn: Scenario, plan: st.NoisePlan) -> tuple[DensityField, int]:
    grid = scn.state_grid
    law = scn.initial_law
    if law.kind == "gaussian" and law.std > 0:
        if law.std < 2.0 * grid.h:
            raise ValueError("initial spread below two grid cells; refine the state grid")
        return gaussian_field(grid, law.mean, law.std), 0
    # point start: one-step gaussian law at t_1, as in the quantile start-up rule
    s0 = law.center()
    terms = _prop1_terms(scn, 0.0, s0)
    sd = math.sqrt(terms.score_weight * scn.dt)
    if sd < 2.0 * grid.h:
        raise ValueError("one-step spread from the point start is below two grid cells; refine the state grid")
    mean = s0 + terms.drift_no_score * scn.dt + terms.sigma_o * st.brownian_increment(plan, 0)
    return gaussian_field(grid, mean, sd, t=scn.dt), 1


def fpk_route(scn: Scenario) -> tuple[QuantilePath, DensityField]:
    """Quantile read off the FPK solution; sub-steps split each common increment by a bridge."""
    plan = st.NoisePlan(scn.seed, st.COMMON_STREAM, scn.dt)
    bo = common_path(scn)
    n = scn.n_steps
    q = np.empty(n + 1)
    q[0] = scn.initial_law.quantile(scn.f)
    fld, k0 = _fpk_initial(scn, plan)
    if k0:
        q[1] = fld.quantile(scn.f)
    for k in range(k0, n):
        n_sub = max(1, math.ceil(scn.dt / max_stable_dt(fld, scn) - 1e-9))
        pieces = st.bridge_increments(plan, k, n_sub)
        for piece in pieces:
            fld = fpk_step(fld, scn, float(piece), scn.dt / n_sub)
        q[k + 1] = fld.quantile(scn.f)
    return QuantilePath(scn.times, q, scn.f, bo, "fpk"), fld


@dataclass
class RouteOutput:
    path: QuantilePath
    runtime: float
    extra: dict = field(default_factory=dict)


def run_routes(cfg: ExperimentConfig, scn: Scenario, out_dir: Path | None = None, tag: str = "") -> dict[str, RouteOutput]:
    """Run every requested route of ``cfg`` on ``scn``; all share stream 0 of its seed."""
    bo = common_path(scn)
    outputs: dict[str, RouteOutput] = {}
    for route in cfg.routes:
        t0 = time.perf_counter()
        extra: dict = {}
        if route == "particle":
            every = max(1, scn.n_steps // 10) if cfg.record_snapshots else None
            rec = simulate(scn, snapshot_every=every)
            path = QuantilePath(rec.times, rec.quantile_path, scn.f, rec.common_path, "particle")
            sup, finite = moment_bound_check(rec)
            extra["moment_bound"] = {"sup": sup, "finite": finite}
            if out_dir is not None and cfg.record_snapshots:
                rec.write_snapshots_csv(out_dir / f"{tag}particle_snapshots.csv")
        elif route == "sde":
            path = integrate_quantile_sde(scn, _score_for(cfg, scn, bo))
        elif route == "ode":
            path = integrate_quantile_ode(scn, _score_for(cfg, scn, np.zeros_like(bo)))
        elif route == "closed_form":
            path = closed_form_path(scn, bo)
        else:
            path, fld = fpk_route(scn)
            extra["clipped_mass"] = fld.clipped_mass
            extra["flags"] = list(fld.flags)
            if out_dir is not None and cfg.record_snapshots:
                fld.write_csv(out_dir / f"{tag}fpk_density.csv")
        outputs[route] = RouteOutput(path, time.perf_counter() - t0, extra)
    return outputs


def pairwise_gaps(paths: dict[str, QuantilePath]) -> dict[str, dict[str, float]]:
    names = list(paths)
    out = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            out[f"{a}|{b}"] = {"sup": paths[a].sup_gap(paths[b]), "l2": paths[a].l2_gap(paths[b])}
    return out


@dataclass
class ExperimentReport:
    report: dict
    paths: list[dict[str, QuantilePath]]
    runtimes: dict

    def gap(self, pair: str, kind: str = "sup", replication: int = 0) -> float:
        return self.report["results"][replication]["gaps"][pair][kind]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Run all routes for every replication; writes report.json, paths CSVs and runtimes.json."""
    check_config(cfg)
    base = cfg.scenario
    out_dir = cfg.output_dir
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    val = validate_scenario(base)
    results, all_paths, runtimes = [], [], {}
    for r in range(cfg.replications):
        scn = base.with_(seed=st.replication_seed(base.seed, r))
        tag = f"rep{r:03d}_"
        outs = run_routes(cfg, scn, out_dir if write else None, tag)
        paths = {name: o.path for name, o in outs.items()}
        entry = {
            "replication": r,
            "seed": scn.seed,
            "final_quantile": {name: float(p.values[-1]) for name, p in paths.items()},
            "gaps": pairwise_gaps(paths),
        }
        for name, o in outs.items():
            if o.extra:
                entry[name] = o.extra
        if write:
            files = {}
            for name, p in paths.items():
                fname = f"{tag}{name}.csv"
                p.write_csv(out_dir / fname)
                files[name] = fname
            entry["files"] = files
        results.append(entry)
        all_paths.append(paths)
        runtimes[f"rep{r:03d}"] = {name: o.runtime for name, o in outs.items()}
    report = {
        "code_version": CODE_VERSION,
        "scenario_hash": scenario_hash(base),
        "seed": base.seed,
        "scenario": _scenario_json(base),
        "routes": list(cfg.routes),
        "replications": cfg.replications,
        "validation": val.to_dict(),
        "results": results,
        "summary": _summary(results),
    }
    if write:
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_dir / "runtimes.json", "w") as fh:
            json.dump(runtimes, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ExperimentReport(report, all_paths, runtimes)


def _scenario_json(scn: Scenario):
    try:
        return scn.to_dict()
    except ValueError:
        return None


def _summary(results: list[dict]) -> dict:
    out = {}
    for pair in results[0]["gaps"]:
        sups = np.array([r["gaps"][pair]["sup"] for r in results])
        l2s = np.array([r["gaps"][pair]["l2"] for r in results])
        out[pair] = {"sup_mean": float(sups.mean()), "sup_max": float(sups.max()), "l2_mean": float(l2s.mean())}
    return out


# ---------------------------------------------------------------------------
# convergence sweep


@dataclass
class SweepResult:
    n_values: list[int]
    gaps: list[float]
    slope: float
    intercept: float

    @property
    def decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.gaps, self.gaps[1:]))

    def to_dict(self) -> dict:
        return {"n": self.n_values, "sup_gap": self.gaps, "slope": self.slope, "intercept": self.intercept,
                "decreasing": self.decreasing}


def convergence_sweep(cfg: ExperimentConfig, n_list) -> SweepResult:
    """Particle-vs-closed-form sup gap for each particle count, with a log-log fit.

    Gaps are averaged over ``cfg.replications`` seeds.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 3:
        raise ValueError("a convergence sweep needs at least three particle counts")
    if any(n < 2 for n in n_list):
        raise ValueError("particle counts must be >= 2")
    base = cfg.scenario
    if not has_closed_form(base):
        raise ValueError("convergence sweep needs a scenario with a closed form")
    gaps = []
    for n in n_list:
        acc = 0.0
        for r in range(cfg.replications):
            scn = base.with_(n_particles=n, seed=st.replication_seed(base.seed, r))
            rec = simulate(scn)
            ref = closed_form_path(scn, rec.common_path)
            acc += float(np.max(np.abs(rec.quantile_path - ref.values)))
        gaps.append(acc / cfg.replications)
    slope, intercept = np.polyfit(np.log(n_list), np.log(gaps), 1)
    return SweepResult(n_list, gaps, float(slope), float(intercept))
