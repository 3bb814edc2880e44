import math

import numpy as np
import pytest

from clipped_affine.core import (Bernoulli, Deterministic, OnePoint, ScenarioSpec,
                                 SystemState, scenario_from, substream)
from clipped_affine.policies import (OptimisticParams, RelValueParams, RobustParams,
                                     optimistic_policy, rel_value, robust_policy)
from clipped_affine.rl import (SCHEMES, Agent, AgentConfig, ReplayMemory, Scheme,
                               Transition, act, adam_step, agent_step, batch_targets,
                               inv_softplus, minibatch_grad, minibatch_loss,
                               policy_action, run_learning_episode, td_step, update_aux)
from clipped_affine.sim import Environment, draw_streams


def make_agent(scheme="RCA", c=10.0, seed=0, **cfg):
    # constant-rate estimators exactly as in the update rules unless asked
    cfg.setdefault("warm_start", False)
    return Agent(scheme, c, AgentConfig(**cfg), np.random.default_rng(seed))


def random_batch(rng, n, c):
    b = rng.uniform(0, c, n)
    g = rng.exponential(1.0, n)
    r = rng.uniform(0, 3, n)
    b2 = rng.uniform(0, c, n)
    g2 = rng.exponential(1.0, n)
    return np.column_stack([b, g, r, b2, g2])


# ---------------------------------------------------------------------------
# schemes and configuration


def test_scheme_parsing():
    assert [Scheme.parse(s).name for s in SCHEMES] == list(SCHEMES)
    s = Scheme.parse("ECLK-RCA")
    assert s.energy_lookahead and s.channel_lookahead and s.learned
    assert not Scheme.parse("OPT").learned
    with pytest.raises(ValueError):
        Scheme.parse("XYZ-RCA")
    with pytest.raises(ValueError):
        Agent("OPT", 1.0)


def test_initial_parameters():
    a = make_agent("CLK-OCA")
    assert a.q == pytest.approx(0.5)
    assert a.gamma0 == pytest.approx(1.0)
    assert a.slope == pytest.approx(0.01)
    assert a.g_hat == 0 and a.e == 0 and a.c_hat == 0
    b = make_agent("RCA")
    assert b.slope == 0 and b.p == 0
    assert inv_softplus(0.0) == -math.inf
    assert math.log1p(math.exp(inv_softplus(2.5))) == pytest.approx(2.5)


def test_minibatch_larger_than_memory_warns():
    with pytest.warns(UserWarning):
        AgentConfig(memory_capacity=8, minibatch=16)


# ---------------------------------------------------------------------------
# replay memory


def test_replay_fifo():
    mem = ReplayMemory(4)
    for k in range(10):
        mem.push(Transition(k, 0, 0, 0, 0))
        assert len(mem) == min(k + 1, 4)
    assert list(mem.contents()[:, 0]) == [6, 7, 8, 9]


def test_replay_sample():
    mem = ReplayMemory(5)
    with pytest.raises(ValueError):
        mem.sample(np.random.default_rng(0), 3)
    for k in range(3):
        mem.push(Transition(k, 0, 0, 0, 0))
    s = mem.sample(np.random.default_rng(0), 200)
    assert set(s[:, 0]) == {0.0, 1.0, 2.0}


# ---------------------------------------------------------------------------
# acting


def test_act_epsilon_zero_is_policy():
    a = make_agent("RCA", epsilon=0.0)
    a.est[3] = 0.4
    st = SystemState(3.0, 1.2)
    expected = robust_policy(3.0, 1.2, RobustParams(0.4, a.q, a.gamma_hat))
    for _ in range(5):
        assert act(a, st) == expected


def test_act_empty_battery():
    a = make_agent("OCA", epsilon=0.5)
    for _ in range(20):
        assert act(a, SystemState(0.0, 2.0)) == 0.0


def test_act_full_exploration_reproducible():
    seq = []
    for _ in range(2):
        a = make_agent("RCA", seed=42)
        a.set_rates(epsilon=0.999999)
        seq.append([act(a, SystemState(2.0, 1.0)) for _ in range(50)])
    assert seq[0] == seq[1]
    assert all(0 <= u <= 2.0 for u in seq[0]) and len(set(seq[0])) == 50


def test_lookahead_required():
    a = make_agent("ELK-RCA")
    with pytest.raises(ValueError):
        policy_action(a, SystemState(1.0, 1.0))
    a = make_agent("CLK-RCA")
    with pytest.raises(ValueError):
        policy_action(a, SystemState(1.0, 1.0, lookahead_energy=1.0))


def test_energy_lookahead_estimators():
    c = 8.0
    a = make_agent("ELK-OCA", c=c)
    for e in (0.0, 2.5, 8.0, 20.0):
        st = SystemState(3.0, 0.7, lookahead_energy=e)
        assert policy_action(a, st) == optimistic_policy(
            3.0, 0.7, c, OptimisticParams(min(e, c), a.q, a.gamma_hat))
    a = make_agent("ELK-RCA", c=c)
    for e in (0.0, 2.5, 8.0, 20.0):
        st = SystemState(3.0, 0.7, lookahead_energy=e)
        assert policy_action(a, st) == robust_policy(
            3.0, 0.7, RobustParams(min(e, c) / c, a.q, a.gamma_hat))


def test_channel_lookahead_effective_snr():
    a = make_agent("CLK-RCA")
    a.est[3] = 0.3
    a.theta[2] = inv_softplus(0.8)
    st = SystemState(4.0, 1.1, lookahead_gamma=2.0)
    gh = 0.8 * 2.0 + a.gamma0
    assert policy_action(a, st) == pytest.approx(
        robust_policy(4.0, 1.1, RobustParams(0.3, a.q, gh)), abs=1e-14)


def test_eclk_zero_slope_matches_elk():
    c = 6.0
    elk = make_agent("ELK-OCA", c=c)
    eclk = make_agent("ECLK-OCA", c=c)
    eclk.theta[2] = -math.inf
    for b, g, e, g2 in [(1.0, 0.5, 2.0, 3.0), (5.0, 2.0, 0.3, 0.1), (0.0, 1.0, 6.0, 9.0)]:
        s = SystemState(b, g, e, g2)
        assert policy_action(eclk, s) == policy_action(elk, s)


def test_onepoint_lookahead_constant():
    sc = ScenarioSpec(5.0, OnePoint(1.5), Deterministic(1.0))
    rng = np.random.default_rng(0)
    b0, arr, gam = draw_streams(sc, 20, rng)
    env = Environment.for_scheme("ELK-OCA", sc, b0, arr, gam)
    while not env.done:
        assert env.observe().lookahead_energy == 1.5
        env.step(0.0)


# ---------------------------------------------------------------------------
# TD and auxiliary estimators


def test_td_zero_error():
    a = make_agent("RCA")
    a.est[0] = 0.7
    td_step(a, Transition(2.0, 1.0, 0.7, 2.0, 1.0))
    assert a.g_hat == 0.7


def test_td_full_step():
    a = make_agent("RCA", alpha2=1.0)
    a.est[0] = 0.2
    tr = Transition(2.0, 1.0, 0.9, 3.5, 1.0)
    td_step(a, tr)
    p = RelValueParams(a.q, a.gamma_hat)
    assert a.g_hat == pytest.approx(0.9 + rel_value(3.5, p) - rel_value(2.0, p), abs=1e-14)


def test_td_channel_uses_gamma():
    a = make_agent("CLK-RCA", alpha2=1.0)
    a.theta[2] = inv_softplus(0.5)
    tr = Transition(2.0, 1.0, 0.9, 3.5, 3.0)
    td_step(a, tr)
    h = lambda b, g: rel_value(b, RelValueParams(a.q, 0.5 * g + a.gamma0))  # noqa: E731
    assert a.g_hat == pytest.approx(0.9 + h(3.5, 3.0) - h(2.0, 1.0), abs=1e-14)


def test_td_long_run_fixed_policy():
    # frozen OCA policy on one-point arrivals: the battery settles where u = e
    c, e = 10.0, 1.0
    sc = ScenarioSpec(c, OnePoint(e), Deterministic(1.0))
    a = make_agent("OCA", c=c, alpha1=0.0, alpha2=1e-2, alpha3=0.0)
    a.est[1] = e
    b0, arr, gam = draw_streams(sc, 20000, np.random.default_rng(0))
    run_learning_episode(a, b0, arr, gam)
    assert a.g_hat == pytest.approx(math.log1p(e), abs=1e-2)


def test_aux_optimistic():
    a = make_agent("OCA", c=10.0, alpha3=0.1)
    a.est[1], a.est[2] = 2.0, 5.0
    # stored arrival equal to e with C >= c_hat: e unchanged
    update_aux(a, b=4.0, b_next=4.0 - 1.0 + 2.0, u_tilde=1.0)
    assert a.e == pytest.approx(2.0, abs=1e-15)
    assert a.c_hat == pytest.approx(5.0 + 0.1 * (7.0 - 5.0))
    # C < c_hat: e frozen, c_hat still moves
    a.est[2] = 9.0
    update_aux(a, b=8.0, b_next=9.0, u_tilde=0.5)
    assert a.e == pytest.approx(2.0, abs=1e-15)


def test_aux_full_rate():
    a = make_agent("OCA", c=10.0, alpha3=1.0)
    update_aux(a, b=3.0, b_next=4.5, u_tilde=1.0)
    assert a.e == pytest.approx(2.5) and a.c_hat == pytest.approx(8.0)
    r = make_agent("RCA", c=10.0, alpha3=1.0)
    update_aux(r, b=3.0, b_next=4.5, u_tilde=1.0)
    assert r.p == pytest.approx(2.5 / 8.0)


def test_warm_start_averages_first_samples():
    a = make_agent("RCA", alpha2=1e-3, warm_start=True)
    a.set_rates(alpha=0.0)
    a.set_rates(alpha2=1e-3)
    rewards = [0.5, 1.5, 0.7, 2.0]
    for r in rewards:
        td_step(a, Transition(2.0, 1.0, r, 2.0, 1.0))
    # same battery before and after: the TD error is r - g, so g is the sample mean
    assert a.g_hat == pytest.approx(np.mean(rewards), abs=1e-14)


def test_warm_start_hands_over_to_constant_rate():
    a = make_agent("RCA", alpha2=0.25, warm_start=True)
    for r in (1.0, 3.0, 2.0, 6.0):
        td_step(a, Transition(2.0, 1.0, r, 2.0, 1.0))
    # steps 1/1, 1/2, 1/3, then 1/4 equals the constant rate
    assert a.g_hat == pytest.approx(2.0 + 0.25 * (6.0 - 2.0), abs=1e-14)
    td_step(a, Transition(2.0, 1.0, 0.0, 2.0, 1.0))
    assert a.g_hat == pytest.approx(3.0 * 0.75, abs=1e-14)


def test_warm_start_aux_estimators():
    r = make_agent("RCA", c=10.0, alpha3=1e-3, warm_start=True)
    ratios = []
    for b, bn, u in ((3.0, 4.5, 1.0), (5.0, 5.0, 2.0), (1.0, 9.0, 0.5)):
        td_step(r, Transition(b, 1.0, 0.0, bn, 1.0))
        update_aux(r, b, bn, u)
        ratios.append((bn - b + u) / (10.0 - b + u))
    assert r.p == pytest.approx(np.mean(ratios), abs=1e-14)
    o = make_agent("OCA", c=10.0, alpha3=1e-3, warm_start=True)
    td_step(o, Transition(3.0, 1.0, 0.0, 4.5, 1.0))
    update_aux(o, 3.0, 4.5, 1.0)
    assert o.e == pytest.approx(2.5) and o.c_hat == pytest.approx(8.0)


def test_aux_zero_headroom():
    r = make_agent("RCA", c=10.0, alpha3=1.0)
    update_aux(r, b=10.0, b_next=10.0, u_tilde=0.0)
    assert r.p == 0.0
    r.est[3] = 0.3
    update_aux(r, b=10.0, b_next=10.0, u_tilde=0.0)
    assert r.p == 0.0


def test_p_estimate_tracks_bernoulli():
    c, pt = 5.0, 0.3
    rng = np.random.default_rng(1)
    r = make_agent("RCA", c=c, alpha3=1e-3)
    b = 2.0
    for _ in range(100_000):
        u = rng.uniform(0, b)
        arr = c if rng.random() < pt else 0.0
        b2 = min(b - u + arr, c)
        update_aux(r, b, b2, u)
        b = b2
    assert r.p == pytest.approx(pt, abs=0.02)


# ---------------------------------------------------------------------------
# minibatch regression


@pytest.mark.parametrize("scheme", ["RCA", "CLK-OCA"])
def test_zero_gradient_at_perfect_fit(scheme):
    a = make_agent(scheme)
    a.theta[2] = inv_softplus(0.3) if scheme.startswith("CLK") else -math.inf
    batch = random_batch(np.random.default_rng(0), 16, 10.0)
    targets = np.array([a.rel_value(b, g) for b, g in batch[:, :2]])
    assert np.all(minibatch_grad(a, batch, targets) == 0)


def _fd_grad(agent, batch, targets, dims, h=1e-6):
    out = np.zeros(3)
    for j in dims:
        tp, tm = agent.theta.copy(), agent.theta.copy()
        tp[j] += h
        tm[j] -= h
        out[j] = (minibatch_loss(agent, batch, targets, tp)
                  - minibatch_loss(agent, batch, targets, tm)) / (2 * h)
    return out


@pytest.mark.parametrize("scheme", ["RCA", "CLK-RCA"])
def test_gradient_matches_finite_differences(scheme):
    rng = np.random.default_rng(3)
    dims = [0, 1, 2] if scheme.startswith("CLK") else [0, 1]
    for _ in range(100):
        a = make_agent(scheme)
        a.theta[0] = rng.normal(0, 2)
        a.theta[1] = rng.normal(0, 1.5)
        if len(dims) == 3:
            a.theta[2] = rng.normal(-1, 1.5)
        a.est[0] = rng.uniform(0, 3)
        batch = random_batch(rng, 64, rng.uniform(1, 30))
        targets = batch_targets(a, batch)
        g = minibatch_grad(a, batch, targets)
        fd = _fd_grad(a, batch, targets, dims)
        for j in dims:
            assert g[j] == pytest.approx(fd[j], rel=1e-5, abs=1e-9)
        if len(dims) == 2:
            assert g[2] == 0


def test_gradient_single_sample_chain_rule():
    a = make_agent("CLK-OCA")
    a.theta[:] = [0.3, -0.4, -1.0]
    b, g, H = 4.0, 1.7, 2.2
    q = 1 / (1 + math.exp(-0.3))
    gh0 = math.log1p(math.exp(-0.4))
    s = math.log1p(math.exp(-1.0))
    gh = s * g + gh0
    h = math.log1p(gh * q * b) / q
    dh_dq = -math.log1p(gh * q * b) / q**2 + gh * b / (q * (1 + gh * q * b))
    dh_dgh = b / (1 + gh * q * b)
    resid = H - h
    expected = -resid * np.array([
        dh_dq * q * (1 - q),
        dh_dgh / (1 + math.exp(0.4)),
        dh_dgh * g / (1 + math.exp(1.0)),
    ])
    got = minibatch_grad(a, np.array([[b, g, 0.0, 0.0, 0.0]]), np.array([H]))
    assert np.allclose(got, expected, rtol=1e-12, atol=0)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        minibatch_grad(make_agent(), np.zeros((0, 5)))


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step():
    theta, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    g = np.array([0.5, -3.0])
    t = adam_step(theta, m, v, 0, g, lr=0.01)
    assert t == 1
    assert np.allclose(theta, [1.0 - 0.01 * 0.5 / (0.5 + 1e-8), -2.0 + 0.01 * 3 / (3 + 1e-8)],
                       rtol=0, atol=1e-15)


def test_adam_zero_gradient():
    theta, m, v = np.array([1.0]), np.array([0.0]), np.array([4.0])
    adam_step(theta, m, v, 3, np.zeros(1), lr=0.1)
    assert theta[0] == 1.0 and v[0] == pytest.approx(4.0 * 0.999)


def test_adam_constant_gradient_updates_nonincreasing():
    theta, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    t, prev = 0, math.inf
    for _ in range(20):
        before = theta[0]
        t = adam_step(theta, m, v, t, np.array([2.0]), lr=0.1)
        step = abs(theta[0] - before)
        assert step <= prev + 1e-15
        prev = step


# ---------------------------------------------------------------------------
# agent loop


def _env(scheme, sc, steps, seed):
    b0, arr, gam = draw_streams(sc, steps, substream(seed, 0))
    return Environment.for_scheme(scheme, sc, b0, arr, gam), (b0, arr, gam)


@pytest.mark.parametrize("scheme", ["OCA", "RCA", "ELK-OCA", "ELK-RCA", "CLK-OCA",
                                    "CLK-RCA", "ECLK-OCA", "ECLK-RCA"])
def test_jitted_episode_matches_step_loop(scheme):
    sc = scenario_from("exponential", 0.5, 10)
    steps = 400
    env, streams = _env(scheme, sc, steps, 5)
    a = Agent(scheme, sc.capacity_c, AgentConfig(epsilon=0.1), substream(1, 1))
    b = Agent(scheme, sc.capacity_c, AgentConfig(epsilon=0.1), substream(1, 1))
    rng = substream(9, 9)
    xi, xu = rng.random(steps), rng.random(steps)
    bu = rng.random((steps, 64))
    rewards = []
    for t in range(steps):
        rewards.append(agent_step(a, env, draws=(xi[t], xu[t], bu[t])))
    rng = substream(9, 9)
    got = run_learning_episode(b, *streams, rng=rng)
    assert np.allclose(got, rewards, rtol=1e-12, atol=1e-14)
    assert np.allclose(a.theta, b.theta, rtol=1e-10, atol=1e-12)
    assert np.allclose(a.est, b.est, rtol=1e-10, atol=1e-12)


def test_parameters_stay_in_range():
    sc = scenario_from("bernoulli", 0.9, 30)
    a = Agent("CLK-RCA", sc.capacity_c, AgentConfig(alpha1=0.05, epsilon=0.2), substream(2))
    env, _ = _env("CLK-RCA", sc, 3000, 3)
    while not env.done:
        agent_step(a, env)
        assert 0 < a.q < 1 and a.gamma0 > 0 and a.slope > 0
        assert 0 <= a.p <= 1


def test_zero_rates_change_only_memory():
    sc = scenario_from("uniform", 0.5, 10)
    a = Agent("OCA", sc.capacity_c, AgentConfig(alpha1=0, alpha2=0, alpha3=0), substream(0))
    theta, est = a.theta.copy(), a.est.copy()
    env, _ = _env("OCA", sc, 10, 1)
    agent_step(a, env)
    # estimates frozen; only the step counters advance
    assert np.array_equal(theta, a.theta) and np.array_equal(est[:4], a.est[:4])
    assert len(a.memory) == 1 and env.t == 1


def test_frozen_policy_deterministic():
    sc = scenario_from("uniform", 0.5, 10)
    outs = []
    for _ in range(2):
        a = Agent("RCA", sc.capacity_c, AgentConfig(), substream(4))
        a.est[3] = 0.5
        _, arr, gam = draw_streams(sc, 500, substream(8))
        outs.append(run_learning_episode(a, 3.0, arr, gam, learning=False))
    assert np.array_equal(*outs)


def test_robust_agent_p_estimate_one_episode():
    sc = scenario_from("bernoulli", 0.5, 10)
    a = Agent("RCA", sc.capacity_c, AgentConfig(epsilon=0.02), substream(6))
    b0, arr, gam = draw_streams(sc, 10_000, substream(6, 1))
    run_learning_episode(a, b0, arr, gam)
    assert a.p == pytest.approx(0.5, abs=0.05)


def test_snapshot_round_trip():
    sc = scenario_from("exponential", 0.5, 10)
    a = Agent("CLK-OCA", sc.capacity_c, AgentConfig(), substream(7))
    b0, arr, gam = draw_streams(sc, 500, substream(7, 1))
    run_learning_episode(a, b0, arr, gam)
    text = a.to_text()
    assert "theta = " in text and "g_hat = " in text
    b = Agent.from_text(text)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.est, b.est)
    assert np.array_equal(a.adam_v, b.adam_v) and b.steps == 500
    assert b.to_text() == text


def test_onepoint_bernoulli_scheme_sanity():
    # learned robust agent should beat spending nothing by a wide margin
    sc = ScenarioSpec(4.0, Bernoulli(0.5, 4.0), Deterministic(1.0))
    a = Agent("RCA", 4.0, AgentConfig(epsilon=0.02), substream(11))
    b0, arr, gam = draw_streams(sc, 5000, substream(11, 1))
    r = run_learning_episode(a, b0, arr, gam)
    assert r.mean() > 0.5 * math.log1p(2.0)
