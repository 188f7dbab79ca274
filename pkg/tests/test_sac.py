import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from ngt import nn_core as nn
from ngt import sac as S


def _batch(rng, n=16, obs=3, act=2, done=None):
    return {
        "s": rng.standard_normal((n, obs)),
        "a": rng.uniform(-0.9, 0.9, (n, act)),
        "s_next": rng.standard_normal((n, obs)),
        "done": np.zeros(n, bool) if done is None else done,
    }


def test_buffer_stores_no_reward_and_wraps_fifo(rng):
    buf = S.ReplayBuffer(2, 1, capacity=3, dtype=np.float64)
    assert not hasattr(S.Transition(1, 2, 3, False), "r")
    for k in range(5):
        buf.add(np.full((1, 2), k), np.full((1, 1), k), np.full((1, 2), k + 1), [False])
    assert len(buf) == 3
    assert sorted(buf.s[:, 0].tolist()) == [2.0, 3.0, 4.0]
    b = buf.sample(100, rng)
    assert set(b["s"][:, 0].tolist()) <= {2.0, 3.0, 4.0}
    assert np.all(b["s_next"][:, 0] == b["s"][:, 0] + 1)


def test_buffer_empty_sample_rejected(rng):
    with pytest.raises(ValueError):
        S.ReplayBuffer(1, 1, 4).sample(2, rng)


def test_make_sac_targets_equal_critics_and_entropy_target(rng):
    p = S.make_sac(3, 2, (8, 8), rng, dtype=np.float64)
    assert p.q1_target.fingerprint() == p.q1.fingerprint()
    assert p.q2_target.fingerprint() == p.q2.fingerprint()
    assert p.target_entropy == -2.0
    assert p.alpha == pytest.approx(0.2)


def test_actions_in_open_interval_and_deterministic_mode(rng):
    p = S.make_sac(3, 2, (8, 8), rng, dtype=np.float64)
    s = rng.standard_normal((500, 3)) * 5
    a, logp = S.sample_action(p.policy, s, rng)
    assert np.all(np.abs(a) < 1) and np.all(np.isfinite(logp))
    ad, _ = S.sample_action(p.policy, s, rng, deterministic=True)
    mu, _ = S.policy_dist(p.policy, s)
    assert np.array_equal(ad, np.tanh(mu))


def test_tiny_std_zero_mean_gives_zero_action():
    a, logp = S.squashed_log_prob(np.zeros((1, 1)), np.full((1, 1), S.LOG_STD_MIN), np.array([[0.3]]))
    assert abs(a[0, 0]) < 0.01 and np.isfinite(logp[0])


@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (0.7, 0.4), (-1.5, 1.2)])
def test_log_prob_matches_quadrature(mu, sigma):
    def dens(a):
        noise = (math.atanh(a) - mu) / sigma
        _, lp = S.squashed_log_prob(np.array([[mu]]), np.array([[math.log(sigma)]]), np.array([[noise]]))
        return math.exp(lp[0])

    for x in (-0.8, 0.0, 0.5, 0.95):
        mass, _ = quad(dens, -1 + 1e-12, x, limit=200)
        assert mass == pytest.approx(norm.cdf((math.atanh(x) - mu) / sigma), abs=1e-3)


def test_log_std_range():
    raw = np.array([-100.0, 0.0, 100.0])
    ls = S._log_std(raw)
    assert ls[0] == pytest.approx(S.LOG_STD_MIN) and ls[2] == pytest.approx(S.LOG_STD_MAX)


def test_critic_target_examples(rng):
    p = S.make_sac(3, 2, (8, 8), rng, dtype=np.float64)
    b = _batch(rng)
    r = rng.standard_normal(16)
    assert np.allclose(S.critic_target(b, r, p, 0.0, rng), r)
    done = _batch(rng, done=np.ones(16, bool))
    assert np.allclose(S.critic_target(done, r, p, 0.99, rng), r)
    # constant target critics: zero weights, bias c
    for q in (p.q1_target, p.q2_target):
        for layer in q.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        q.layers[-1].bias[:] = 2.5
    y = S.critic_target(b, r, p, 0.9, rng, alpha=0.0)
    assert np.allclose(y, r + 0.9 * 2.5)
    with pytest.raises(ValueError):
        S.critic_target(b, r[:3], p, 0.9, rng)


def test_critic_loss_zero_at_own_prediction_and_fd(rng):
    p = S.make_sac(3, 2, (8, 8), rng, dtype=np.float64)
    b = _batch(rng)
    y = S.q_value(p.q1, b["s"], b["a"])
    loss, grads = S.critic_loss(p.q1, b["s"], b["a"], y)
    assert loss == 0 and all(np.all(g == 0) for g in grads)
    y = y + rng.standard_normal(16)
    loss, grads = S.critic_loss(p.q1, b["s"], b["a"], y)
    arr = p.q1.arrays()
    eps = 1e-6
    for k, a in enumerate(arr):
        idx = tuple(int(rng.integers(d)) for d in a.shape)
        old = a[idx]
        a[idx] = old + eps
        hi = S.critic_loss(p.q1, b["s"], b["a"], y)[0]
        a[idx] = old - eps
        lo = S.critic_loss(p.q1, b["s"], b["a"], y)[0]
        a[idx] = old
        assert grads[k][idx] == pytest.approx((hi - lo) / (2 * eps), rel=1e-5, abs=1e-9)


def test_critic_step_moves_toward_target(rng):
    agent = S.SacAgent(3, 2, (8, 8), rng=0, dtype=np.float64, lr_q=1e-3)
    b = _batch(rng)
    y = S.q_value(agent.params.q1, b["s"], b["a"]) + 1.0
    before = np.mean((S.q_value(agent.params.q1, b["s"], b["a"]) - y) ** 2)
    agent.critic_update(b, y)
    after = np.mean((S.q_value(agent.params.q1, b["s"], b["a"]) - y) ** 2)
    assert after < before
    with pytest.raises(nn.NumericFault):
        agent.critic_update(b, np.full(16, np.nan))


@pytest.mark.parametrize("alpha", [0.0, 0.3])
def test_actor_gradient_matches_finite_differences(rng, alpha):
    p = S.make_sac(3, 2, (16, 16), rng, dtype=np.float64)
    for layer in p.policy.layers:
        layer.weight *= 20.0  # leave the near-zero output-gain regime
    s = rng.standard_normal((8, 3))
    noise = rng.standard_normal((8, 2))
    _, grads, _ = S.actor_loss(p, s, noise, alpha)
    arrs = p.policy.arrays()
    eps = 1e-6
    for k, a in enumerate(arrs):
        for _ in range(4):
            idx = tuple(int(rng.integers(d)) for d in a.shape)
            old = a[idx]
            a[idx] = old + eps
            hi = S.actor_loss(p, s, noise, alpha)[0]
            a[idx] = old - eps
            lo = S.actor_loss(p, s, noise, alpha)[0]
            a[idx] = old
            assert grads[k][idx] == pytest.approx((hi - lo) / (2 * eps), rel=1e-4, abs=1e-8)


def _linear_critic(q, slope):
    # Q(s, a) = slope * a_0 through a ReLU trunk kept in the positive region
    in_dim = q.in_dim
    for layer in q.layers:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    q.layers[0].weight[0, in_dim - 1] = 1.0
    q.layers[0].bias[0] = 2.0
    q.layers[1].weight[0, 0] = 1.0
    q.layers[2].weight[0, 0] = slope


def test_actor_moves_mean_toward_higher_q(rng):
    agent = S.SacAgent(2, 1, (8, 8), rng=1, dtype=np.float64, init_alpha=1e-12, autotune=False)
    for q in (agent.params.q1, agent.params.q2):
        _linear_critic(q, 1.0)
    s = rng.standard_normal((64, 2))
    mu0, _ = S.policy_dist(agent.params.policy, s)
    for _ in range(20):
        agent.actor_update({"s": s})
    mu1, _ = S.policy_dist(agent.params.policy, s)
    assert np.mean(mu1) > np.mean(mu0)


def test_constant_q_actor_step_is_entropy_ascent(rng):
    p = S.make_sac(2, 1, (8, 8), rng, dtype=np.float64)
    for q in (p.q1, p.q2):
        for layer in q.layers:
            layer.weight[:] = 0.0
    s = rng.standard_normal((64, 2))
    noise = rng.standard_normal((64, 1))
    _, g_full, _ = S.actor_loss(p, s, noise, alpha=0.5)
    # the same gradient as descending 0.5 * log pi alone
    p2 = S.make_sac(2, 1, (8, 8), np.random.default_rng(0), dtype=np.float64)
    p2.policy = p.policy
    for q in (p2.q1, p2.q2):
        for layer in q.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 7.0
    _, g_shift, _ = S.actor_loss(p2, s, noise, alpha=0.5)
    for a, b in zip(g_full, g_shift):
        assert np.allclose(a, b)


def test_alpha_loss_fixed_point_and_signs():
    h = -2.0
    _, g = S.alpha_loss(math.log(0.2), np.full(10, 2.0), h)
    assert g == 0.0
    # more entropic than the target: log pi < -H, gradient positive, alpha shrinks
    _, g = S.alpha_loss(math.log(0.2), np.full(10, 1.0), h)
    assert g > 0


def test_alpha_update_direction_and_positivity():
    agent = S.SacAgent(2, 2, (8, 8), rng=0, dtype=np.float64)
    a0 = agent.params.alpha
    for _ in range(10):
        agent.alpha_update(np.full(32, -5.0))  # entropy well above target
    assert agent.params.alpha < a0 and agent.params.alpha > 0
    fixed = S.SacAgent(2, 2, (8, 8), rng=0, autotune=False)
    fixed.alpha_update(np.full(4, -5.0))
    assert fixed.params.alpha == pytest.approx(0.2)


def test_polyak_examples(rng):
    p = S.make_sac(2, 1, (4,), rng, dtype=np.float64)
    for layer in p.q1.layers:
        layer.weight += 1.0
    t = p.q1_target.copy()
    S.polyak_update([p.q1], [t], 0.0)
    assert t.fingerprint() == p.q1_target.fingerprint()
    S.polyak_update([p.q1], [t], 1.0)
    assert t.fingerprint() == p.q1.fingerprint()
    with pytest.raises(ValueError):
        S.polyak_update([p.q1], [t], 1.5)


def test_polyak_contraction_after_200_steps(rng):
    p = S.make_sac(2, 1, (4,), rng, dtype=np.float64)
    for layer in p.q1.layers:
        layer.weight += 1.0
    t = p.q1_target
    d0 = nn.global_norm([a - b for a, b in zip(p.q1.arrays(), t.arrays())])
    prev = d0
    for _ in range(200):
        S.polyak_update([p.q1], [t], 0.005)
        d = nn.global_norm([a - b for a, b in zip(p.q1.arrays(), t.arrays())])
        assert d <= prev
        prev = d
    assert prev / d0 == pytest.approx(0.995**200, rel=1e-9)
    assert 0.995**200 == pytest.approx(0.36696, abs=1e-5)


def test_agent_update_finite_and_saves(tmp_path, rng):
    agent = S.SacAgent(3, 2, (8, 8), rng=0)
    b = {k: v.astype(np.float32) if v.dtype != bool else v for k, v in _batch(rng, n=32).items()}
    info = agent.update(b, rng.standard_normal(32))
    assert all(np.isfinite(v) for v in info.values())
    agent.save(tmp_path / "a.ckpt", {"task": "x"})
    pol, meta = S.load_policy(tmp_path / "a.ckpt")
    assert meta["task"] == "x" and np.isclose(meta["log_alpha"], agent.params.log_alpha)
    s = rng.standard_normal((4, 3)).astype(np.float32)
    assert np.allclose(S.deterministic_policy(pol)(s), S.deterministic_policy(agent.params.policy)(s), atol=1e-6)
