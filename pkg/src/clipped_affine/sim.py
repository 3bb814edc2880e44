"""Episode simulation, throughput estimation and evaluation sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import InvalidStateError, ScenarioSpec, SystemState, scenario_from, substream
from .mdp import PolicySolution, evaluate_policy_table, preset_grid, solve_cached
from .rl import SCHEMES, Agent, AgentConfig, Scheme, run_learning_episode

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scheme", "family", "nmcr", "nsnr_db", "throughput", "stderr",
               "g_star", "omf", "loss_pct")
ENV_STREAM, AGENT_STREAM = 0, 1
# baseline each scheme's loss is measured against; ECLK has none
MATCHED_BASELINE = {"none": "OPT", "energy": "ELK-OPT", "channel": "CLK-OPT"}


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".10g")


# ---------------------------------------------------------------------------
# environment


def draw_streams(scenario: ScenarioSpec, steps: int, rng: np.random.Generator):
    """Initial battery, ``steps`` arrivals and ``steps + 1`` channel draws.

    The extra channel draw is the lookahead of the final slot.
    """
    b0 = rng.uniform(0.0, scenario.capacity_c)
    arrivals = np.asarray(scenario.arrival_model.sample(rng, steps), dtype=float)
    gammas = np.asarray(scenario.channel_model.sample(rng, steps + 1), dtype=float)
    return b0, arrivals, gammas


class Environment:
    """Battery/channel system replaying pre-drawn exogenous streams.

    Lookahead values are exact by default; ``perturb(value, kind)`` can
    corrupt them (kind is ``"energy"`` or ``"channel"``).
    """

    def __init__(self, scenario: ScenarioSpec, b0: float, arrivals, gammas,
                 energy_lookahead=False, channel_lookahead=False,
                 perturb: Optional[Callable[[float, str], float]] = None):
        self.scenario = scenario
        self.c = scenario.capacity_c
        self.arrivals = np.asarray(arrivals, dtype=float)
        self.gammas = np.asarray(gammas, dtype=float)
        if len(self.gammas) < len(self.arrivals) + 1:
            raise ValueError("need one more channel draw than arrivals")
        self.energy_lookahead = energy_lookahead
        self.channel_lookahead = channel_lookahead
        self.perturb = perturb
        self.t = 0
        self.battery = float(b0)

    @classmethod
    def for_scheme(cls, scheme, scenario, b0, arrivals, gammas, **kw):
        s = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
        return cls(scenario, b0, arrivals, gammas, s.energy_lookahead,
                   s.channel_lookahead, **kw)

    @property
    def done(self) -> bool:
        return self.t >= len(self.arrivals)

    def observe(self) -> SystemState:
        t = self.t
        la_e = la_g = None
        if self.energy_lookahead:
            la_e = float(self.arrivals[t])
            if self.perturb:
                la_e = self.perturb(la_e, "energy")
        if self.channel_lookahead:
            la_g = float(self.gammas[t + 1])
            if self.perturb:
                la_g = self.perturb(la_g, "channel")
        return SystemState(self.battery, float(self.gammas[self.t]), la_e, la_g)

    def step(self, u: float):
        b = self.battery
        if not (0.0 <= u <= b * (1 + 1e-12) + 1e-15):
            raise InvalidStateError(f"slot {self.t}: action {u} outside [0, {b}]")
        u = min(u, b)
        reward = math.log1p(self.gammas[self.t] * u)
        self.battery = min(b - u + self.arrivals[self.t], self.c)
        self.t += 1
        nxt = self.observe() if not self.done else SystemState(
            self.battery, float(self.gammas[self.t]))
        return reward, nxt


# ---------------------------------------------------------------------------
# episodes


def run_episode(actor, scenario: ScenarioSpec, steps: int, learning: bool = True,
                rng: Optional[np.random.Generator] = None, streams=None,
                scheme=None):
    """Simulate one episode; returns ``(mean reward, actor)``.

    ``actor`` is an ``Agent`` (learns in place when ``learning``), a
    ``PolicySolution`` (interpolated table), or a callable ``state -> u``.
    ``streams`` = ``(b0, arrivals, gammas)`` overrides sampling from ``rng``.
    """
    if streams is None:
        streams = draw_streams(scenario, steps, rng or np.random.default_rng())
    b0, arrivals, gammas = streams
    if isinstance(actor, Agent):
        rewards = run_learning_episode(actor, b0, arrivals, gammas, learning)
        return float(rewards.mean()), actor
    if isinstance(actor, PolicySolution):
        la = actor.lookahead
        env = Environment(scenario, b0, arrivals, gammas, la == "energy", la == "channel")
        policy = lambda s: evaluate_policy_table(actor, s)  # noqa: E731
    else:
        s = Scheme.parse(scheme) if scheme else None
        env = Environment(scenario, b0, arrivals, gammas,
                          bool(s and s.energy_lookahead), bool(s and s.channel_lookahead))
        policy = actor
    total = 0.0
    state = env.observe()
    while not env.done:
        reward, state = env.step(policy(state))
        total += reward
    return total / len(arrivals), actor


# ---------------------------------------------------------------------------
# evaluation plan and report


@dataclass(frozen=True)
class Schedule:
    """Learning rates / exploration for episode 1 and for later episodes."""

    first_alpha: float = 1e-3
    first_epsilon: float = 0.02
    later_alpha: float = 1e-4
    later_epsilon: float = 0.0


@dataclass(frozen=True)
class EvalPlan:
    families: tuple = ("bernoulli", "exponential", "uniform")
    nmcrs: tuple = (0.1, 0.5, 0.9)
    nsnrs_db: tuple = (0.0, 10.0, 20.0, 30.0)
    schemes: tuple = SCHEMES
    episodes: int = 50
    steps: int = 5000
    seed: int = 0
    grid_preset: str = "desk"
    agent: AgentConfig = field(default_factory=AgentConfig)
    schedule: Schedule = field(default_factory=Schedule)
    solver_tol: float = 1e-9

    def __post_init__(self):
        if self.episodes < 1 or self.steps < 1:
            raise ValueError("episodes and steps must be at least 1")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}; expected one of {SCHEMES}")
        if "ECLK-OPT" in self.schemes:
            raise ValueError("no optimal baseline exists for joint lookahead")

    def cells(self):
        return [(f, float(n), float(s)) for f in self.families for n in self.nmcrs
                for s in self.nsnrs_db]


def scenario_key(family: str, nmcr: float, nsnr_db: float) -> int:
    return zlib.crc32(f"{family}|{nmcr!r}|{nsnr_db!r}".encode())


@dataclass
class CellResult:
    scheme: str
    family: str
    nmcr: float
    nsnr_db: float
    throughput: float
    stderr: float
    g_star: float
    omf: float
    loss_pct: Optional[float]
    episode_means: np.ndarray

    def row(self):
        return [self.scheme, self.family, fmt(self.nmcr), fmt(self.nsnr_db),
                fmt(self.throughput), fmt(self.stderr), fmt(self.g_star), fmt(self.omf),
                fmt(self.loss_pct)]


@dataclass
class EvalReport:
    results: list
    baselines: dict        # (family, nmcr, nsnr_db) -> {lookahead mode: gain}
    failures: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def get(self, scheme, family, nmcr, nsnr_db) -> CellResult:
        for r in self.results:
            if (r.scheme, r.family, r.nmcr, r.nsnr_db) == (scheme, family, nmcr, nsnr_db):
                return r
        raise KeyError((scheme, family, nmcr, nsnr_db))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.provenance.items()):
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.results:
            w.writerow(r.row())
        return buf.getvalue()

    def omf_series(self):
        """``{(family, nmcr): (nsnrs, {scheme: omf array})}``."""
        out = {}
        for r in self.results:
            nsnrs, cols = out.setdefault((r.family, r.nmcr), ([], {}))
            if r.nsnr_db not in nsnrs:
                nsnrs.append(r.nsnr_db)
            cols.setdefault(r.scheme, {})[r.nsnr_db] = r.omf
        return {key: (sorted(n), {s: np.array([c.get(x, np.nan) for x in sorted(n)])
                                   for s, c in cols.items()})
                for key, (n, cols) in out.items()}


def performance_loss(report: EvalReport) -> dict:
    """Per scheme ``(average %, maximum %)`` loss against its matched baseline.

    Negative losses are kept: a quantized baseline can be beaten slightly.
    """
    acc = {}
    for r in report.results:
        if r.loss_pct is None or not Scheme.parse(r.scheme).learned:
            continue
        acc.setdefault(r.scheme, []).append(r.loss_pct)
    return {s: (float(np.mean(v)), float(np.max(v))) for s, v in acc.items()}


# ---------------------------------------------------------------------------
# evaluation


def _baseline_modes(schemes):
    modes = {"none"}
    for s in schemes:
        la = Scheme.parse(s).lookahead
        if la in MATCHED_BASELINE:
            modes.add(la)
    return sorted(modes)


def train_and_evaluate(scheme: str, scenario: ScenarioSpec, plan: EvalPlan,
                       env_key: int, scheme_index: int) -> np.ndarray:
    """Run one agent through all episodes of the schedule; returns episode means."""
    agent = Agent(scheme, scenario.capacity_c, plan.agent,
                  substream(plan.seed, env_key, AGENT_STREAM, scheme_index))
    means = np.empty(plan.episodes)
    sch = plan.schedule
    for ep in range(plan.episodes):
        if ep == 0:
            agent.set_rates(sch.first_alpha, sch.first_epsilon)
        elif ep == 1:
            agent.set_rates(sch.later_alpha, sch.later_epsilon)
        streams = draw_streams(scenario, plan.steps,
                               substream(plan.seed, env_key, ENV_STREAM, ep))
        means[ep], _ = run_episode(agent, scenario, plan.steps, streams=streams)
    return means


def evaluate_cell(plan: EvalPlan, family: str, nmcr: float, nsnr_db: float,
                  cache_dir: Optional[str] = None):
    """Solve baselines and evaluate every scheme on one scenario."""
    scenario = scenario_from(family, nmcr, nsnr_db)
    gains = {}
    for mode in _baseline_modes(plan.schemes):
        sol, _ = solve_cached(scenario, preset_grid(plan.grid_preset, mode), mode,
                              Path(cache_dir) if cache_dir else None, plan.solver_tol)
        gains[mode] = sol.gain
    g_star = gains["none"]
    key = scenario_key(family, nmcr, nsnr_db)
    results = []
    for scheme in plan.schemes:
        s = Scheme.parse(scheme)
        base = gains.get(s.lookahead)
        if s.learned:
            means = train_and_evaluate(scheme, scenario, plan, key, SCHEMES.index(scheme))
            thr = float(means.mean())
            se = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else math.nan
        else:
            means = np.array([base])
            thr, se = base, 0.0
        loss = 100.0 * (1.0 - thr / base) if base is not None else None
        results.append(CellResult(scheme, family, nmcr, nsnr_db, thr, se, g_star,
                                  thr / g_star, loss, means))
    return results, gains


def _cell_job(args):
    plan, cell, cache_dir = args
    try:
        return cell, evaluate_cell(plan, *cell, cache_dir=cache_dir), None
    except Exception as exc:  # recorded per cell; the sweep continues
        log.exception("cell %s failed", cell)
        return cell, None, f"{type(exc).__name__}: {exc}"


def evaluate(plan: EvalPlan, cache_dir=None, jobs: int = 1,
             provenance: Optional[dict] = None, progress=None) -> EvalReport:
    """Evaluate all (scheme, scenario) cells; output order follows the plan."""
    cells = plan.cells()
    args = [(plan, cell, str(cache_dir) if cache_dir else None) for cell in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_cell_job, args))
    else:
        outs = []
        for a in args:
            outs.append(_cell_job(a))
            if progress:
                progress(len(outs), len(args))
    results, baselines, failures = [], {}, []
    for cell, out, err in outs:
        if err is not None:
            failures.append((cell, err))
            continue
        rows, gains = out
        results.extend(rows)
        baselines[cell] = gains
    return EvalReport(results, baselines, failures, dict(provenance or {}))


def write_outputs(report: EvalReport, out_dir: Path) -> dict:
    """Write the per-cell CSV, loss summary and per-(family, NMCR) OMF series."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "results.csv", "summary": out_dir / "summary.json"}
    paths["csv"].write_text(report.to_csv())
    losses = performance_loss(report)
    summary = {
        "provenance": report.provenance,
        "loss_pct": {s: {"average": fmt(a), "maximum": fmt(m)} for s, (a, m) in losses.items()},
        "failures": [{"cell": list(c), "error": e} for c, e in report.failures],
        "cells": len(report.baselines),
    }
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    series_dir = out_dir / "series"
    series_dir.mkdir(exist_ok=True)
    for (family, nmcr), (nsnrs, cols) in sorted(report.omf_series().items()):
        path = series_dir / f"omf_{family}_nmcr{fmt(nmcr)}.csv"
        buf = io.StringIO()
        for k, v in sorted(report.provenance.items()):
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        schemes = list(cols)
        w.writerow(["nsnr_db"] + schemes)
        for i, x in enumerate(nsnrs):
            w.writerow([fmt(x)] + [fmt(cols[s][i]) for s in schemes])
        path.write_text(buf.getvalue())
    return paths


def loss_table(report: EvalReport) -> str:
    losses = performance_loss(report)
    lines = [f"{'scheme':<10} {'average %':>10} {'maximum %':>10}"]
    for s in SCHEMES:
        if s in losses:
            a, m = losses[s]
            lines.append(f"{s:<10} {a:>10.3f} {m:>10.3f}")
    return "\n".join(lines)


def with_overrides(plan: EvalPlan, **kw) -> EvalPlan:
    return replace(plan, **{k: v for k, v in kw.items() if v is not None})
