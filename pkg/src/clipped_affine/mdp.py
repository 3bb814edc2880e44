"""Discretized average-reward MDP and policy iteration for optimal baselines.

The battery axis is a uniform grid on ``[0, c]``; continuous successor
batteries are spread over the two neighbouring grid nodes by linear
interpolation.  The channel coefficient is i.i.d. and independent of the
action, so policy evaluation only needs the Markov chain of the battery
(augmented by the current channel node under channel lookahead): the
full relative-value table is recovered from the reduced one afterwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (Bernoulli, Deterministic, Exponential, OnePoint, Rayleigh,
                   ScenarioSpec, SystemState)

log = logging.getLogger(__name__)

LOOKAHEAD_MODES = ("none", "energy", "channel")
CACHE_VERSION = 1
QUADRATURE_NODES = 64
DIRECT_SOLVE_LIMIT = 4000


class ConvergenceError(RuntimeError):
    """Policy iteration did not settle; ``solution`` holds the last iterate."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


@dataclass(frozen=True)
class GridSpec:
    battery_levels: int
    gamma_levels: int
    action_levels: int
    lookahead_levels: int = 0
    gamma_truncation_quantile: float = 0.999

    def __post_init__(self):
        if min(self.battery_levels, self.gamma_levels, self.action_levels) < 2:
            raise ValueError("battery, gamma and action grids need at least 2 levels")
        if self.lookahead_levels == 1 or self.lookahead_levels < 0:
            raise ValueError("lookahead grid needs 0 (absent) or at least 2 levels")
        if not 0 < self.gamma_truncation_quantile < 1:
            raise ValueError("truncation quantile must lie in (0, 1)")


GRID_PRESETS = {
    "paper": {"none": GridSpec(250, 50, 250), "lookahead": GridSpec(150, 20, 150, 20)},
    "desk": {"none": GridSpec(100, 20, 100), "lookahead": GridSpec(60, 12, 60, 12)},
}


def preset_grid(preset: str, lookahead: str) -> GridSpec:
    return GRID_PRESETS[preset]["none" if lookahead == "none" else "lookahead"]


# ---------------------------------------------------------------------------
# distribution discretizations


def _equal_mass_cells(dist, mass: float, n: int, open_tail: bool):
    """Nodes/probabilities of ``n`` equal-mass cells covering ``[0, ppf(mass))``.

    With ``open_tail`` the last cell extends to infinity, so it also carries
    the mass beyond the truncation quantile.  Nodes are conditional means.
    """
    edges = dist.ppf(np.arange(n + 1) * mass / n)
    if open_tail:
        edges[-1] = np.inf
    probs = np.diff(np.append(dist.cdf(edges[:-1]), 1.0 if open_tail else mass))
    nodes = np.array([dist.partial_mean(a, b) for a, b in zip(edges[:-1], edges[1:])])
    return nodes / probs, probs


def gamma_nodes(channel, n: int, truncation: float = 0.999):
    if isinstance(channel, Deterministic):
        return np.array([float(channel.gamma)]), np.array([1.0])
    if isinstance(channel, Rayleigh):
        return _equal_mass_cells(Exponential(1.0), truncation, n, open_tail=True)
    raise TypeError(f"unsupported channel model {channel!r}")


def stored_arrival_nodes(model, c: float, n: int):
    """Discretization of ``min(E, c)``, the energy an empty battery could store."""
    if isinstance(model, OnePoint):
        return np.array([min(model.e, c)]), np.array([1.0])
    if isinstance(model, Bernoulli):
        nodes = np.array([0.0, min(model.magnitude, c)])
        probs = np.array([1.0 - model.prob, model.prob])
        keep = probs > 0
        return nodes[keep], probs[keep]
    below = float(model.cdf(c))
    atom = 1.0 - below
    cells = n - 1 if atom > 1e-15 else n
    nodes, probs = _equal_mass_cells(model, below, cells, open_tail=False)
    if atom > 1e-15:
        nodes, probs = np.append(nodes, c), np.append(probs, atom)
    return nodes, probs


def arrival_quadrature(model, headroom: float, n: int = QUADRATURE_NODES):
    """Quadrature ``(offsets, weights)`` for ``min(E, headroom)``.

    Continuous laws use Gauss-Legendre nodes on the unclipped support within
    ``[0, headroom]`` plus an atom at ``headroom`` for the saturating mass.
    """
    if isinstance(model, OnePoint):
        return np.array([min(model.e, headroom)]), np.array([1.0])
    if isinstance(model, Bernoulli):
        return (np.array([0.0, min(model.magnitude, headroom)]),
                np.array([1.0 - model.prob, model.prob]))
    top = headroom if isinstance(model, Exponential) else min(headroom, model.upper)
    if top <= 0:
        return np.array([headroom]), np.array([1.0])
    x, w = np.polynomial.legendre.leggauss(n)
    pts = 0.5 * top * (x + 1.0)
    wts = 0.5 * top * w * model.pdf(pts)
    atom = 1.0 - float(model.cdf(headroom))
    return np.append(pts, headroom), np.append(wts, atom)


# ---------------------------------------------------------------------------
# MDP construction


def _interp_index(y, step: float, n: int):
    """Lower grid index and weight of the upper neighbour for points ``y``."""
    pos = np.clip(np.asarray(y, dtype=float) / step, 0.0, n - 1.0)
    # snap points that sit on a node up to rounding
    near = np.rint(pos)
    pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    return lo, pos - lo


@dataclass
class DiscreteMdp:
    scenario: ScenarioSpec
    grid: GridSpec
    lookahead: str
    battery: np.ndarray
    gammas: np.ndarray
    gamma_probs: np.ndarray
    actions: np.ndarray
    lookahead_nodes: Optional[np.ndarray]
    lookahead_probs: Optional[np.ndarray]
    rewards: np.ndarray            # [gamma node, action]
    admissible: np.ndarray         # [battery, action]
    post_lo: np.ndarray            # interpolation of the post-decision/next battery
    post_t: np.ndarray
    transfer: Optional[np.ndarray]  # post-decision battery node -> next battery node

    @property
    def step(self) -> float:
        return self.battery[1] - self.battery[0]

    @property
    def state_shape(self):
        shape = (len(self.battery), len(self.gammas))
        return shape if self.lookahead == "none" else shape + (len(self.lookahead_nodes),)


def build_mdp(scenario: ScenarioSpec, grid: GridSpec, lookahead: str = "none") -> DiscreteMdp:
    if lookahead not in LOOKAHEAD_MODES:
        raise ValueError(f"lookahead must be one of {LOOKAHEAD_MODES}")
    if lookahead != "none" and grid.lookahead_levels < 2:
        raise ValueError("lookahead MDP needs lookahead_levels >= 2")
    c = scenario.capacity_c
    nb = grid.battery_levels
    battery = np.linspace(0.0, c, nb)
    step = battery[1]
    actions = np.linspace(0.0, c, grid.action_levels)
    gam, gam_p = gamma_nodes(scenario.channel_model, grid.gamma_levels,
                             grid.gamma_truncation_quantile)
    rewards = np.log1p(gam[:, None] * actions[None, :])
    admissible = actions[None, :] <= battery[:, None] + 1e-9 * c
    post = np.maximum(battery[:, None] - actions[None, :], 0.0)

    la_nodes = la_probs = None
    transfer = None
    if lookahead == "energy":
        la_nodes, la_probs = stored_arrival_nodes(scenario.arrival_model, c,
                                                  grid.lookahead_levels)
        nxt = np.minimum(post[:, None, :] + la_nodes[None, :, None], c)
        lo, t = _interp_index(nxt, step, nb)
    else:
        if lookahead == "channel":
            if grid.lookahead_levels != grid.gamma_levels:
                raise ValueError("channel lookahead reuses the gamma grid; "
                                 "lookahead_levels must equal gamma_levels")
            la_nodes, la_probs = gam, gam_p
        lo, t = _interp_index(post, step, nb)
        transfer = np.zeros((nb, nb))
        for j, x in enumerate(battery):
            offs, wts = arrival_quadrature(scenario.arrival_model, c - x)
            jl, jt = _interp_index(np.minimum(x + offs, c), step, nb)
            np.add.at(transfer[j], jl, wts * (1.0 - jt))
            np.add.at(transfer[j], jl + 1, wts * jt)
    return DiscreteMdp(scenario, grid, lookahead, battery, gam, gam_p, actions,
                       la_nodes, la_probs, rewards, admissible, lo, t, transfer)


# ---------------------------------------------------------------------------
# policy evaluation / improvement


@dataclass
class PolicySolution:
    gain: float
    policy: np.ndarray          # action index per grid state
    actions: np.ndarray         # action value per grid state
    h: np.ndarray               # relative value per grid state, h[0, ...] = 0
    reduced: np.ndarray         # relative value of the evaluation chain
    battery: np.ndarray
    gammas: np.ndarray
    lookahead: str
    lookahead_nodes: Optional[np.ndarray] = None
    iterations: int = 0
    gain_history: list = field(default_factory=list)
    converged: bool = True
    meta: dict = field(default_factory=dict)


def _interp_rows(values, lo, t):
    """Interpolate a table along its first axis at (lo, t) index arrays."""
    t = t.reshape(t.shape + (1,) * (values.ndim - 1))
    return (1.0 - t) * values[lo] + t * values[lo + 1]


def _chain(mdp: DiscreteMdp, policy: np.ndarray):
    """Reduced transition matrix and expected reward of a policy."""
    nb = len(mdp.battery)
    pk = mdp.gamma_probs
    if mdp.lookahead == "none":
        i = np.arange(nb)[:, None]
        k = np.arange(len(pk))[None, :]
        lo, t = mdp.post_lo[i, policy], mdp.post_t[i, policy]
        rows = _interp_rows(mdp.transfer, lo, t)          # [i, k, j]
        trans = np.einsum("k,ikj->ij", pk, rows)
        rew = mdp.rewards[k, policy] @ pk
        return trans, rew
    pl = mdp.lookahead_probs
    i = np.arange(nb)[:, None, None]
    k = np.arange(len(pk))[None, :, None]
    l = np.arange(len(pl))[None, None, :]
    if mdp.lookahead == "energy":
        lo, t = mdp.post_lo[i, l, policy], mdp.post_t[i, l, policy]
        w = pk[None, :, None] * pl[None, None, :]
        trans = np.zeros((nb, nb))
        rows = np.broadcast_to(np.arange(nb)[:, None, None], lo.shape)
        np.add.at(trans, (rows, lo), w * (1.0 - t))
        np.add.at(trans, (rows, lo + 1), w * t)
        rew = np.einsum("ikl,k,l->i", mdp.rewards[k, policy], pk, pl)
        return trans, rew
    # channel lookahead: chain over (battery, current gamma)
    lo, t = mdp.post_lo[i, policy], mdp.post_t[i, policy]
    rows = _interp_rows(mdp.transfer, lo, t)              # [i, k, l, j]
    ng = len(pk)
    trans = np.einsum("l,iklj->ikjl", pl, rows).reshape(nb * ng, nb * ng)
    rew = (mdp.rewards[k, policy] @ pl).reshape(nb * ng)
    return trans, rew


def _solve_direct(trans, rew):
    n = len(rew)
    mat = np.eye(n) - trans
    mat[:, 0] = 1.0
    z = np.linalg.solve(mat, rew)
    gain = z[0]
    z[0] = 0.0
    return gain, z


def relative_value_iteration(trans, rew, tol=1e-10, max_iter=1_000_000, tau=0.5):
    """Evaluate a fixed policy by RVI on the aperiodic transform of its chain.

    ``P' = tau I + (1 - tau) P`` with rewards scaled by ``1 - tau`` has the
    same relative values and gain ``(1 - tau) g``.  Stops when the span of
    the update falls below ``tol``.
    """
    n = len(rew)
    h = np.zeros(n)
    r = (1.0 - tau) * rew
    for _ in range(max_iter):
        nxt = r + tau * h + (1.0 - tau) * (trans @ h)
        diff = nxt - h
        h = nxt - nxt[0]
        if diff.max() - diff.min() < tol * (1.0 - tau):
            return 0.5 * (diff.max() + diff.min()) / (1.0 - tau), h
    raise ConvergenceError("relative value iteration did not converge")


def _evaluate(mdp, policy, method="auto"):
    trans, rew = _chain(mdp, policy)
    if method == "rvi" or (method == "auto" and len(rew) > DIRECT_SOLVE_LIMIT):
        return relative_value_iteration(trans, rew)
    return _solve_direct(trans, rew)


def _q_values(mdp: DiscreteMdp, reduced: np.ndarray):
    """Action values ``r + E h(next)`` (gain excluded), -inf where inadmissible."""
    nb = len(mdp.battery)
    if mdp.lookahead == "none":
        w = mdp.transfer @ reduced
        future = _interp_rows(w, mdp.post_lo, mdp.post_t)          # [i, m]
        q = mdp.rewards[None, :, :] + future[:, None, :]
        mask = mdp.admissible[:, None, :]
    elif mdp.lookahead == "energy":
        future = _interp_rows(reduced, mdp.post_lo, mdp.post_t)    # [i, l, m]
        q = mdp.rewards[None, :, None, :] + future[:, None, :, :]
        mask = mdp.admissible[:, None, None, :]
    else:
        v = reduced.reshape(nb, len(mdp.gammas))                   # [j, gamma']
        w = mdp.transfer @ v
        future = _interp_rows(w, mdp.post_lo, mdp.post_t)          # [i, m, l]
        q = mdp.rewards[None, :, None, :] + np.moveaxis(future, 2, 1)[:, None, :, :]
        mask = mdp.admissible[:, None, None, :]
    return np.where(mask, q, -np.inf)


def _initial_policy(mdp):
    # spend the whole battery (largest admissible action)
    last = mdp.admissible.sum(axis=1) - 1
    shape = mdp.state_shape
    return np.broadcast_to(last.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def policy_iteration(mdp: DiscreteMdp, tol: float = 1e-9, max_iters: int = 100,
                     method: str = "auto") -> PolicySolution:
    """Average-reward policy iteration on the discretized MDP.

    Stops when no action changes, or when the largest one-step improvement
    is below ``tol`` (then the gain is within ``tol`` of the optimum).
    Ties keep the current action; new maximizers favour the smallest action.
    """
    policy = _initial_policy(mdp)
    history = []
    for it in range(1, max_iters + 1):
        gain, reduced = _evaluate(mdp, policy, method)
        history.append(float(gain))
        q = _q_values(mdp, reduced)
        best = q.argmax(axis=-1)
        q_best = np.take_along_axis(q, best[..., None], -1)[..., 0]
        q_cur = np.take_along_axis(q, policy[..., None], -1)[..., 0]
        gap = q_best - q_cur
        keep = gap <= 1e-12 * (1.0 + np.abs(q_best))
        new = np.where(keep, policy, best)
        if np.array_equal(new, policy) or gap.max() < tol:
            return _finish(mdp, policy, gain, reduced, q_cur, it, history, True)
        policy = new
    sol = _finish(mdp, policy, gain, reduced, q_cur, max_iters, history, False)
    raise ConvergenceError(f"policy iteration did not converge in {max_iters} iterations",
                           sol)


def _finish(mdp, policy, gain, reduced, q_cur, iters, history, converged):
    h = q_cur - gain
    ref = h.flat[0]
    return PolicySolution(
        gain=float(gain), policy=policy, actions=mdp.actions[policy], h=h - ref,
        reduced=reduced - ref, battery=mdp.battery, gammas=mdp.gammas,
        lookahead=mdp.lookahead, lookahead_nodes=mdp.lookahead_nodes,
        iterations=iters, gain_history=history, converged=converged)


def bellman_residual(mdp: DiscreteMdp, sol: PolicySolution) -> np.ndarray:
    """``g + h(s) - [r(s, pi(s)) + sum_s' w(s'|s) h(s')]`` over all grid states.

    Computed from the full relative-value table, independent of the reduced
    chain used by the solver.
    """
    h, pol = sol.h, sol.policy
    nb, ng = len(mdp.battery), len(mdp.gammas)
    if mdp.lookahead == "none":
        hbar = h @ mdp.gamma_probs                        # E over next gamma
        w = mdp.transfer @ hbar
        i = np.arange(nb)[:, None]
        k = np.arange(ng)[None, :]
        nxt = _interp_rows(w, mdp.post_lo[i, pol], mdp.post_t[i, pol])
        rew = mdp.rewards[k, pol]
    elif mdp.lookahead == "energy":
        hbar = np.einsum("jkl,k,l->j", h, mdp.gamma_probs, mdp.lookahead_probs)
        i = np.arange(nb)[:, None, None]
        k = np.arange(ng)[None, :, None]
        l = np.arange(len(mdp.lookahead_probs))[None, None, :]
        nxt = _interp_rows(hbar, mdp.post_lo[i, l, pol], mdp.post_t[i, l, pol])
        rew = mdp.rewards[k, pol]
    else:
        v = h @ mdp.lookahead_probs                       # [j, gamma'] over next lookahead
        w = mdp.transfer @ v                              # [x, gamma']
        i = np.arange(nb)[:, None, None]
        k = np.arange(ng)[None, :, None]
        l = np.arange(ng)[None, None, :]
        lo, t = mdp.post_lo[i, pol], mdp.post_t[i, pol]
        nxt = (1.0 - t) * w[lo, l] + t * w[lo + 1, l]
        rew = mdp.rewards[k, pol]
    return sol.gain + h - (rew + nxt)


def gain_of(sol: PolicySolution) -> float:
    return sol.gain


def successor_weights(mdp: DiscreteMdp, i: int, m: int, l: Optional[int] = None):
    """Distribution of the next battery node from battery node ``i`` under action ``m``.

    Under energy lookahead the next battery also depends on the lookahead node ``l``.
    The channel coordinates of the successor are drawn independently.
    """
    nb = len(mdp.battery)
    if not mdp.admissible[i, m]:
        raise ValueError(f"action {m} is not admissible at battery node {i}")
    if mdp.lookahead == "energy":
        if l is None:
            raise ValueError("energy lookahead needs the lookahead node")
        lo, t = mdp.post_lo[i, l, m], mdp.post_t[i, l, m]
        w = np.zeros(nb)
        w[lo] += 1.0 - t
        w[lo + 1] += t
        return w
    lo, t = mdp.post_lo[i, m], mdp.post_t[i, m]
    return (1.0 - t) * mdp.transfer[lo] + t * mdp.transfer[lo + 1]


def improvement_gap(mdp: DiscreteMdp, sol: PolicySolution) -> float:
    """Largest one-step improvement over the solution's policy; bounds ``g* - g``."""
    q = _q_values(mdp, sol.reduced)
    q_cur = np.take_along_axis(q, sol.policy[..., None], -1)[..., 0]
    return float((q.max(axis=-1) - q_cur).max())


# ---------------------------------------------------------------------------
# policy lookup


def _axis_weights(nodes, x):
    n = len(nodes)
    if n == 1:
        return 0, 0.0
    x = min(max(x, nodes[0]), nodes[-1])
    lo = int(np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, n - 2))
    t = (x - nodes[lo]) / (nodes[lo + 1] - nodes[lo])
    return lo, t


def evaluate_policy_table(sol: PolicySolution, state: SystemState) -> float:
    """Multilinear interpolation of the action table, clipped to ``[0, B]``.

    Coordinates outside the grid hull are clamped to the boundary nodes.
    """
    axes = [sol.battery, sol.gammas]
    coords = [state.battery, state.gamma]
    if sol.lookahead == "energy":
        axes.append(sol.lookahead_nodes)
        coords.append(state.lookahead_energy)
    elif sol.lookahead == "channel":
        axes.append(sol.lookahead_nodes)
        coords.append(state.lookahead_gamma)
    if any(c is None for c in coords):
        raise ValueError("state lacks the lookahead field this solution needs")
    idx = [_axis_weights(a, float(x)) for a, x in zip(axes, coords)]
    table = sol.actions
    value = 0.0
    for corner in range(2 ** len(idx)):
        w = 1.0
        pos = []
        for d, (lo, t) in enumerate(idx):
            up = (corner >> d) & 1
            if table.shape[d] == 1:
                if up:
                    w = 0.0
                pos.append(0)
                continue
            w *= t if up else 1.0 - t
            pos.append(lo + up)
        if w:
            value += w * table[tuple(pos)]
    return min(max(value, 0.0), state.battery)


# ---------------------------------------------------------------------------
# cache


def cache_key(scenario: ScenarioSpec, grid: GridSpec, lookahead: str, tol: float) -> str:
    doc = {"version": CACHE_VERSION, "scenario": scenario.describe(), "grid": asdict(grid),
           "lookahead": lookahead, "tol": tol, "quadrature_nodes": QUADRATURE_NODES}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def save_solution(path: Path, sol: PolicySolution, meta: dict):
    """Write an ``.npz`` artifact; ``meta`` is stored as a JSON string."""
    arrays = {"gain": np.array(sol.gain), "policy": sol.policy, "actions": sol.actions,
              "h": sol.h, "reduced": sol.reduced, "battery": sol.battery,
              "gammas": sol.gammas, "gain_history": np.array(sol.gain_history),
              "iterations": np.array(sol.iterations)}
    if sol.lookahead_nodes is not None:
        arrays["lookahead_nodes"] = sol.lookahead_nodes
    meta = dict(meta, lookahead=sol.lookahead, format_version=CACHE_VERSION)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    tmp.replace(path)


def load_solution(path: Path) -> PolicySolution:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CACHE_VERSION:
            raise ValueError(f"incompatible cache artifact {path}")
        return PolicySolution(
            gain=float(z["gain"]), policy=z["policy"], actions=z["actions"], h=z["h"],
            reduced=z["reduced"], battery=z["battery"], gammas=z["gammas"],
            lookahead=meta["lookahead"],
            lookahead_nodes=z["lookahead_nodes"] if "lookahead_nodes" in z else None,
            iterations=int(z["iterations"]), gain_history=list(z["gain_history"]),
            meta=meta)


def solve_cached(scenario: ScenarioSpec, grid: GridSpec, lookahead: str,
                 cache_dir: Optional[Path] = None, tol: float = 1e-9):
    """Solve (or load) a baseline; returns ``(solution, cache_hit)``."""
    key = cache_key(scenario, grid, lookahead, tol)
    path = Path(cache_dir) / f"{lookahead}-{key[:20]}.npz" if cache_dir else None
    if path is not None and path.exists():
        log.debug("cache hit %s", path)
        return load_solution(path), True
    sol = policy_iteration(build_mdp(scenario, grid, lookahead), tol=tol)
    meta = {"key": key, "scenario": scenario.describe(), "grid": asdict(grid), "tol": tol}
    sol.meta = meta
    if path is not None:
        save_solution(path, sol, meta)
    return sol, False
