"""Reinforcement-learning tuning of clipped affine policies.

One agent type covers the four loop variants: online, energy lookahead (ELK),
channel lookahead (CLK) and both (ECLK), each with the optimistic (OCA) or
robust (RCA) policy.  Per step the agent acts epsilon-greedily, updates its
throughput estimate by a TD step, refreshes the ``e``/``p`` estimators when no
energy lookahead is available, and fits the relative-value parameters to a
replay minibatch with an Adam step.

The per-step math lives in jitted kernels shared by the Python-level API
(``act``, ``td_step``, ``update_aux``, ``minibatch_grad``, ``agent_step``) and
by the whole-episode loop ``run_learning_episode``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numba import njit

from .core import DomainError, SystemState
from .policies import _optimistic, _rel_value, _rel_value_and_grad, _robust

POLICIES = ("OCA", "RCA", "OPT")
LOOKAHEADS = {"": "none", "ELK": "energy", "CLK": "channel", "ECLK": "both"}
SCHEMES = ("OPT", "OCA", "RCA", "ELK-OPT", "ELK-OCA", "ELK-RCA",
           "CLK-OPT", "CLK-OCA", "CLK-RCA", "ECLK-OCA", "ECLK-RCA")

# indices into the packed state arrays
G_HAT, E_EST, C_EST, P_EST, N_STEP, N_E = range(6)
HEAD, SIZE = 0, 1
A1, A2, A3, EPS, BETA1, BETA2, ADAM_EPS, WARM = range(8)
OPTIMISTIC, ENERGY_LA, CHANNEL_LA = range(3)


@dataclass(frozen=True)
class Scheme:
    policy: str
    lookahead: str = "none"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        if name not in SCHEMES:
            raise ValueError(f"unknown scheme {name!r}; expected one of {SCHEMES}")
        prefix, _, policy = name.rpartition("-")
        return cls(policy, LOOKAHEADS[prefix])

    @property
    def name(self) -> str:
        prefix = {v: k for k, v in LOOKAHEADS.items()}[self.lookahead]
        return f"{prefix}-{self.policy}" if prefix else self.policy

    @property
    def energy_lookahead(self) -> bool:
        return self.lookahead in ("energy", "both")

    @property
    def channel_lookahead(self) -> bool:
        return self.lookahead in ("channel", "both")

    @property
    def learned(self) -> bool:
        return self.policy != "OPT"


@dataclass
class AgentConfig:
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    alpha3: float = 1e-3
    memory_capacity: int = 128
    minibatch: int = 64
    epsilon: float = 0.0
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    q_init: float = 0.5
    gamma_hat_init: float = 1.0
    # s = softplus(theta) cannot start at exactly 0 and still learn
    slope_init: float = 0.01
    g_init: float = 0.0
    # estimators of g, e, c and p average their first samples instead of
    # relaxing from their initial values at the constant rate
    warm_start: bool = True

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise DomainError("learning rates must be nonnegative")
        if not 0 <= self.epsilon < 1:
            raise DomainError("exploration probability must lie in [0, 1)")
        if self.memory_capacity < 1 or self.minibatch < 1:
            raise DomainError("memory capacity and minibatch size must be positive")
        if self.minibatch > self.memory_capacity:
            warnings.warn("minibatch larger than replay memory", stacklevel=2)


class Transition(NamedTuple):
    b: float
    gamma: float
    reward: float
    b_next: float
    gamma_next: float


# ---------------------------------------------------------------------------
# reparameterization


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def _softplus(x):
    if x > 30.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def inv_sigmoid(q: float) -> float:
    return math.log(q / (1.0 - q))


def inv_softplus(y: float) -> float:
    if y == 0:
        return -math.inf
    return y + math.log(-math.expm1(-y))


@njit(cache=True)
def _gamma_hat(theta, channel, gamma):
    if channel:
        return _softplus(theta[2]) * gamma + _softplus(theta[1])
    return _softplus(theta[1])


@njit(cache=True)
def _hhat(theta, channel, b, gamma):
    return _rel_value(b, _sigmoid(theta[0]), _gamma_hat(theta, channel, gamma))


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _policy_action(theta, est, mode, c, b, gamma, e_ahead, g_ahead):
    q = _sigmoid(theta[0])
    if mode[CHANNEL_LA]:
        gamma_hat = _softplus(theta[2]) * g_ahead + _softplus(theta[1])
    else:
        gamma_hat = _softplus(theta[1])
    if mode[OPTIMISTIC]:
        e = min(e_ahead, c) if mode[ENERGY_LA] else est[E_EST]
        return _optimistic(b, gamma, c, min(e, c), q, gamma_hat)
    p = min(e_ahead, c) / c if mode[ENERGY_LA] else est[P_EST]
    return _robust(b, gamma, p, q, gamma_hat)


@njit(cache=True)
def _explore(u, b, eps, xi, xu):
    if xi < eps:
        return xu * b
    return u


@njit(cache=True)
def _rate(alpha, warm, n):
    # sample-average step until 1/n drops below the constant rate
    if warm and 0.0 < n * alpha < 1.0:
        return 1.0 / n
    return alpha


@njit(cache=True)
def _td(theta, est, channel, alpha2, b, gamma, reward, b_next, gamma_next, warm=False):
    delta = (reward - est[G_HAT] + _hhat(theta, channel, b_next, gamma_next)
             - _hhat(theta, channel, b, gamma))
    est[N_STEP] += 1.0
    est[G_HAT] += _rate(alpha2, warm, est[N_STEP]) * delta
    return delta


@njit(cache=True)
def _aux(est, optimistic, alpha3, c, b, b_next, u_tilde, warm=False, n=1.0):
    avail = c - b + u_tilde
    stored = min(max(b_next - b + u_tilde, 0.0), max(avail, 0.0))
    alpha = _rate(alpha3, warm, n)
    if optimistic:
        if avail >= est[C_EST]:
            est[N_E] += 1.0
            est[E_EST] += _rate(alpha3, warm, est[N_E]) * (stored - est[E_EST])
        est[C_EST] += alpha * (avail - est[C_EST])
    else:
        if avail > 0.0:
            ratio = stored / avail
        else:
            ratio = 1.0 if stored > 0.0 else 0.0
        est[P_EST] = min(max(est[P_EST] + alpha * (ratio - est[P_EST]), 0.0), 1.0)


@njit(cache=True)
def _unpack(theta, channel):
    """Constrained parameters and their derivatives w.r.t. theta."""
    q = _sigmoid(theta[0])
    s = _softplus(theta[2]) if channel else 0.0
    ds = _sigmoid(theta[2]) if channel else 0.0
    return q, _softplus(theta[1]), s, q * (1.0 - q), _sigmoid(theta[1]), ds


@njit(cache=True)
def _accumulate(par, b, gamma, target, grad):
    """Add one sample's semi-gradient to ``grad``; returns the squared residual."""
    q, gh0, s, dq, dg0, ds = par
    val, d_q, d_gh = _rel_value_and_grad(b, q, s * gamma + gh0)
    resid = target - val
    grad[0] -= resid * d_q * dq
    grad[1] -= resid * d_gh * dg0
    grad[2] -= resid * d_gh * gamma * ds
    return resid * resid


@njit(cache=True)
def _loss_grad(theta, channel, b, gamma, target, grad):
    """Semi-gradient of ``(1/2N) sum (H_i - h(B_i))^2`` w.r.t. theta."""
    n = b.shape[0]
    par = _unpack(theta, channel)
    grad[:] = 0.0
    loss = 0.0
    for i in range(n):
        loss += _accumulate(par, b[i], gamma[i], target[i], grad)
    grad /= n
    return loss / (2.0 * n)


@njit(cache=True)
def _adam(theta, m, v, step, grad, lr, beta1, beta2, eps):
    step[0] += 1
    t = step[0]
    for j in range(theta.shape[0]):
        m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j]
        v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j]
        m_hat = m[j] / (1.0 - beta1**t)
        v_hat = v[j] / (1.0 - beta2**t)
        theta[j] -= lr * m_hat / (math.sqrt(v_hat) + eps)


@njit(cache=True)
def _push(mem, counters, b, gamma, reward, b_next, gamma_next):
    head = counters[HEAD]
    mem[head, 0] = b
    mem[head, 1] = gamma
    mem[head, 2] = reward
    mem[head, 3] = b_next
    mem[head, 4] = gamma_next
    counters[HEAD] = (head + 1) % mem.shape[0]
    counters[SIZE] = min(counters[SIZE] + 1, mem.shape[0])


@njit(cache=True)
def _learn(theta, m, v, step, est, mem, counters, hp, mode, c,
           b, gamma, u_tilde, reward, b_next, gamma_next, batch_u):
    channel = mode[CHANNEL_LA] != 0
    _push(mem, counters, b, gamma, reward, b_next, gamma_next)
    warm = hp[WARM] != 0.0
    _td(theta, est, channel, hp[A2], b, gamma, reward, b_next, gamma_next, warm)
    if not mode[ENERGY_LA]:
        _aux(est, mode[OPTIMISTIC] != 0, hp[A3], c, b, b_next, u_tilde, warm, est[N_STEP])
    n = batch_u.shape[0]
    size = counters[SIZE]
    g_hat = est[G_HAT]
    par = _unpack(theta, channel)
    q, gh0, s = par[0], par[1], par[2]
    grad = np.zeros(3)
    for i in range(n):
        k = min(int(batch_u[i] * size), size - 1)
        target = mem[k, 2] - g_hat + _rel_value(mem[k, 3], q, s * mem[k, 4] + gh0)
        _accumulate(par, mem[k, 0], mem[k, 1], target, grad)
    grad /= n
    _adam(theta, m, v, step, grad, hp[A1], hp[BETA1], hp[BETA2], hp[ADAM_EPS])


@njit(cache=True)
def _episode(theta, m, v, step, est, mem, counters, hp, mode, c, b0, arrivals, gammas,
             xi, xu, batch_u, learning, rewards):
    """Run ``len(arrivals)`` slots; ``gammas`` carries one extra (lookahead) slot."""
    b = b0
    for t in range(arrivals.shape[0]):
        g = gammas[t]
        u = _policy_action(theta, est, mode, c, b, g, arrivals[t], gammas[t + 1])
        u = _explore(u, b, hp[EPS], xi[t], xu[t])
        reward = math.log1p(g * u)
        b_next = min(b - u + arrivals[t], c)
        if learning:
            _learn(theta, m, v, step, est, mem, counters, hp, mode, c,
                   b, g, u, reward, b_next, gammas[t + 1], batch_u[t])
        rewards[t] = reward
        b = b_next
    return b


# ---------------------------------------------------------------------------
# Python-level agent


class ReplayMemory:
    """Bounded FIFO of transitions ``(B, Gamma, R, B', Gamma')``.

    Pushing into a full memory overwrites the oldest entry.  Storage is a
    ring buffer so the jitted kernels can share it.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DomainError("replay capacity must be positive")
        self.capacity = capacity
        self.data = np.zeros((capacity, 5))
        self.ptr = np.zeros(2, dtype=np.int64)

    def __len__(self):
        return int(self.ptr[SIZE])

    def push(self, tr: Transition):
        _push(self.data, self.ptr, *map(float, tr))

    def contents(self) -> np.ndarray:
        """Stored transitions, oldest first."""
        size, head = self.ptr[SIZE], self.ptr[HEAD]
        if size < self.capacity:
            return self.data[:size].copy()
        return np.roll(self.data, -head, axis=0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform sample of ``n`` rows, with replacement."""
        if len(self) == 0:
            raise ValueError("replay memory is empty")
        return self.data[rng.integers(0, len(self), n)].copy()


class Agent:
    """Mutable learner state for one scheme on one battery capacity."""

    def __init__(self, scheme, capacity_c: float, config: Optional[AgentConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
        if not self.scheme.learned:
            raise ValueError("optimal schemes are solved by policy iteration, not learned")
        self.c = float(capacity_c)
        self.config = config or AgentConfig()
        cfg = self.config
        self.theta = np.array([inv_sigmoid(cfg.q_init), inv_softplus(cfg.gamma_hat_init),
                               inv_softplus(cfg.slope_init) if self.scheme.channel_lookahead
                               else -math.inf])
        self.adam_m = np.zeros(3)
        self.adam_v = np.zeros(3)
        self.adam_t = np.zeros(1, dtype=np.int64)
        self.est = np.array([cfg.g_init, 0.0, 0.0, 0.0, 0.0, 0.0])
        self.memory = ReplayMemory(cfg.memory_capacity)
        self.hp = np.array([cfg.alpha1, cfg.alpha2, cfg.alpha3, cfg.epsilon,
                            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                            float(cfg.warm_start)])
        self.mode = np.array([self.scheme.policy == "OCA", self.scheme.energy_lookahead,
                              self.scheme.channel_lookahead], dtype=np.int64)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.steps = 0

    # -- parameters -------------------------------------------------------
    @property
    def q(self) -> float:
        return _sigmoid(self.theta[0])

    @property
    def gamma_hat(self) -> float:
        """Effective SNR coefficient (``gamma0`` for channel-lookahead schemes)."""
        return _softplus(self.theta[1])

    gamma0 = gamma_hat

    @property
    def slope(self) -> float:
        return _softplus(self.theta[2]) if self.scheme.channel_lookahead else 0.0

    @property
    def g_hat(self) -> float:
        return float(self.est[G_HAT])

    @property
    def e(self) -> float:
        return float(self.est[E_EST])

    @property
    def c_hat(self) -> float:
        return float(self.est[C_EST])

    @property
    def p(self) -> float:
        return float(self.est[P_EST])

    def set_rates(self, alpha: Optional[float] = None, epsilon: Optional[float] = None,
                  alpha1=None, alpha2=None, alpha3=None):
        """Learning-rate/exploration hook used by the evaluation schedule."""
        for idx, val in ((A1, alpha1), (A2, alpha2), (A3, alpha3)):
            val = alpha if val is None else val
            if val is not None:
                self.hp[idx] = val
        if epsilon is not None:
            if not 0 <= epsilon < 1:
                raise DomainError("exploration probability must lie in [0, 1)")
            self.hp[EPS] = epsilon

    def rel_value(self, b, gamma=0.0) -> float:
        return _hhat(self.theta, bool(self.mode[CHANNEL_LA]), float(b), float(gamma))

    # -- snapshots --------------------------------------------------------
    def to_text(self) -> str:
        """``key = value`` snapshot (parameters, estimates, optimizer state)."""
        items = {
            "scheme": self.scheme.name,
            "capacity_c": repr(self.c),
            "theta": " ".join(repr(float(x)) for x in self.theta),
            "adam_m": " ".join(repr(float(x)) for x in self.adam_m),
            "adam_v": " ".join(repr(float(x)) for x in self.adam_v),
            "adam_t": str(int(self.adam_t[0])),
            "g_hat": repr(self.g_hat),
            "e": repr(self.e),
            "c_hat": repr(self.c_hat),
            "p": repr(self.p),
            "counts": f"{float(self.est[N_STEP])!r} {float(self.est[N_E])!r}",
            "steps": str(self.steps),
            "rates": " ".join(repr(float(x)) for x in self.hp),
        }
        return "".join(f"{k} = {v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str, config: Optional[AgentConfig] = None,
                  rng: Optional[np.random.Generator] = None) -> "Agent":
        kv = {}
        for line in text.splitlines():
            if line.strip() and not line.lstrip().startswith("#"):
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()

        def vec(key):
            return np.array([float(x) for x in kv[key].split()])

        agent = cls(kv["scheme"], float(kv["capacity_c"]), config, rng)
        agent.theta[:] = vec("theta")
        agent.adam_m[:] = vec("adam_m")
        agent.adam_v[:] = vec("adam_v")
        agent.adam_t[0] = int(kv["adam_t"])
        agent.est[:4] = [float(kv[k]) for k in ("g_hat", "e", "c_hat", "p")]
        agent.est[4:] = vec("counts")
        agent.steps = int(kv["steps"])
        agent.hp[:] = vec("rates")
        return agent


# ---------------------------------------------------------------------------
# operations


def policy_action(agent: Agent, state: SystemState) -> float:
    la_e, la_g = _lookahead_fields(agent, state)
    return _policy_action(agent.theta, agent.est, agent.mode, agent.c,
                          float(state.battery), float(state.gamma), la_e, la_g)


def _lookahead_fields(agent, state):
    if agent.scheme.energy_lookahead and state.lookahead_energy is None:
        raise ValueError(f"{agent.scheme.name} needs the energy lookahead")
    if agent.scheme.channel_lookahead and state.lookahead_gamma is None:
        raise ValueError(f"{agent.scheme.name} needs the channel lookahead")
    e = state.lookahead_energy if state.lookahead_energy is not None else 0.0
    g = state.lookahead_gamma if state.lookahead_gamma is not None else 0.0
    return float(e), float(g)


def act(agent: Agent, state: SystemState, rng: Optional[np.random.Generator] = None,
        draws=None) -> float:
    """Epsilon-greedy action: the policy action, or uniform on ``[0, B]``."""
    xi, xu = draws if draws is not None else (rng or agent.rng).random(2)
    return _explore(policy_action(agent, state), float(state.battery),
                    agent.hp[EPS], xi, xu)


def td_step(agent: Agent, tr: Transition) -> float:
    _td(agent.theta, agent.est, bool(agent.mode[CHANNEL_LA]), agent.hp[A2],
        tr.b, tr.gamma, tr.reward, tr.b_next, tr.gamma_next, agent.hp[WARM] != 0.0)
    return agent.g_hat


def update_aux(agent: Agent, b: float, b_next: float, u_tilde: float):
    _aux(agent.est, bool(agent.mode[OPTIMISTIC]), agent.hp[A3], agent.c,
         float(b), float(b_next), float(u_tilde), agent.hp[WARM] != 0.0,
         max(agent.est[N_STEP], 1.0))


def batch_targets(agent: Agent, batch: np.ndarray) -> np.ndarray:
    """``H_i = R_i - g_hat + h(B'_i, Gamma'_i)`` for rows of a replay batch."""
    channel = bool(agent.mode[CHANNEL_LA])
    return np.array([row[2] - agent.g_hat + _hhat(agent.theta, channel, row[3], row[4])
                     for row in batch])


def minibatch_loss(agent: Agent, batch: np.ndarray, targets: np.ndarray,
                   theta: Optional[np.ndarray] = None) -> float:
    grad = np.zeros(3)
    th = agent.theta if theta is None else np.asarray(theta, dtype=float)
    return _loss_grad(th, bool(agent.mode[CHANNEL_LA]), batch[:, 0].copy(),
                      batch[:, 1].copy(), np.asarray(targets, dtype=float), grad)


def minibatch_grad(agent: Agent, batch: np.ndarray, targets=None) -> np.ndarray:
    """Gradient of the replay loss w.r.t. the unconstrained parameters.

    Targets are held fixed; by default they are computed from the batch with
    the agent's current parameters.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.shape[0] == 0:
        raise ValueError("empty minibatch: replay memory not ready")
    if targets is None:
        targets = batch_targets(agent, batch)
    grad = np.zeros(3)
    _loss_grad(agent.theta, bool(agent.mode[CHANNEL_LA]), batch[:, 0].copy(),
               batch[:, 1].copy(), np.asarray(targets, dtype=float), grad)
    return grad


def adam_step(theta: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, grad,
              lr: float, beta1=0.0, beta2=0.999, eps=1e-8):
    """One Adam update in place; returns the new step counter."""
    step = np.array([t], dtype=np.int64)
    _adam(theta, m, v, step, np.asarray(grad, dtype=float), lr, beta1, beta2, eps)
    return int(step[0])


def agent_step(agent: Agent, env, draws=None) -> float:
    """One loop body: act, observe, push, TD, estimators, minibatch Adam step.

    ``draws`` optionally fixes the agent's random numbers as
    ``(xi, xu, batch_u)``; otherwise they come from ``agent.rng``.
    """
    if draws is None:
        xi, xu = agent.rng.random(2)
        batch_u = agent.rng.random(agent.config.minibatch)
    else:
        xi, xu, batch_u = draws
    state = env.observe()
    u = act(agent, state, draws=(xi, xu))
    reward, nxt = env.step(u)
    _learn(agent.theta, agent.adam_m, agent.adam_v, agent.adam_t, agent.est,
           agent.memory.data, agent.memory.ptr, agent.hp, agent.mode, agent.c, float(state.battery),
           float(state.gamma), u, reward, float(nxt.battery), float(nxt.gamma),
           np.asarray(batch_u, dtype=float))
    agent.steps += 1
    return reward


def run_learning_episode(agent: Agent, b0: float, arrivals: np.ndarray,
                         gammas: np.ndarray, learning: bool = True,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Jitted episode over pre-drawn exogenous streams; returns per-slot rewards.

    ``gammas`` holds ``len(arrivals) + 1`` values so the last slot has a
    channel lookahead.
    """
    rng = rng if rng is not None else agent.rng
    n = len(arrivals)
    xi = rng.random(n)
    xu = rng.random(n)
    batch_u = rng.random((n, agent.config.minibatch))
    rewards = np.empty(n)
    _episode(agent.theta, agent.adam_m, agent.adam_v, agent.adam_t, agent.est,
             agent.memory.data, agent.memory.ptr, agent.hp, agent.mode, agent.c, float(b0),
             np.asarray(arrivals, dtype=float), np.asarray(gammas, dtype=float),
             xi, xu, batch_u, learning, rewards)
    agent.steps += n
    return rewards
