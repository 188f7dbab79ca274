"""Soft actor-critic with twin critics, Polyak targets and a tanh-squashed Gaussian policy.

Gradients are written out by hand on top of :mod:`ngt.nn_core`.  The
replay buffer stores ``(s, a, s', done)`` only; rewards are recomputed for
every critic minibatch by whatever reward function the caller supplies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Ring buffer of transitions with uniform sampling (with replacement)."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 4_000_000, dtype=np.float32):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, obs_dim), dtype=dtype)
        self.a = np.zeros((self.capacity, act_dim), dtype=dtype)
        self.s_next = np.zeros((self.capacity, obs_dim), dtype=dtype)
        self.done = np.zeros(self.capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, s_next, done) -> None:
        s, a, s_next = np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s_next)
        done = np.atleast_1d(done)
        for i in range(len(s)):
            j = self.cursor
            self.s[j], self.a[j], self.s_next[j], self.done[j] = s[i], a[i], s_next[i], done[i]
            self.cursor = (j + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def add_transition(self, t: Transition) -> None:
        self.add(t.s, t.a, t.s_next, t.done)

    def get(self, idx) -> dict[str, np.ndarray]:
        return {"s": self.s[idx], "a": self.a[idx], "s_next": self.s_next[idx], "done": self.done[idx]}

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.get(rng.integers(self.size, size=batch_size))


@dataclass
class SacParams:
    policy: nn.MlpParams
    q1: nn.MlpParams
    q2: nn.MlpParams
    q1_target: nn.MlpParams
    q2_target: nn.MlpParams
    log_alpha: float
    target_entropy: float

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def act_dim(self) -> int:
        return self.policy.out_dim // 2


def make_sac(
    obs_dim: int,
    act_dim: int,
    hidden=(256, 256),
    rng=None,
    init_alpha: float = 0.2,
    dtype=np.float32,
) -> SacParams:
    rng = np.random.default_rng(rng)
    policy = nn.build_mlp([obs_dim, *hidden, 2 * act_dim], "relu", "identity", rng, output_gain=0.01, dtype=dtype)
    q1 = nn.build_mlp([obs_dim + act_dim, *hidden, 1], "relu", "identity", rng, dtype=dtype)
    q2 = nn.build_mlp([obs_dim + act_dim, *hidden, 1], "relu", "identity", rng, dtype=dtype)
    return SacParams(policy, q1, q2, q1.copy(), q2.copy(), math.log(init_alpha), -float(act_dim))


def _log_std(raw: np.ndarray) -> np.ndarray:
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(mu, log_std, noise) -> tuple[np.ndarray, np.ndarray]:
    """Action ``tanh(mu + std * noise)`` and its log density (change of variables included)."""
    u = mu + np.exp(log_std) * noise
    a = np.tanh(u)
    logp = np.sum(-0.5 * noise * noise - _HALF_LOG_2PI - log_std - _log1m_tanh2(u), axis=-1)
    return a, logp


def policy_dist(policy: nn.MlpParams, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = nn.predict(policy, s)
    k = out.shape[-1] // 2
    return out[..., :k], _log_std(out[..., k:])


def sample_action(policy: nn.MlpParams, s: np.ndarray, rng, deterministic: bool = False):
    """Sample ``a ~ pi(.|s)``; deterministic mode returns ``tanh(mu)`` with the density at ``noise = 0``."""
    mu, log_std = policy_dist(policy, s)
    noise = np.zeros_like(mu) if deterministic else rng.standard_normal(mu.shape).astype(mu.dtype)
    return squashed_log_prob(mu, log_std, noise)


def _q_input(s, a):
    return np.concatenate([s, a], axis=-1)


def q_value(q: nn.MlpParams, s, a) -> np.ndarray:
    return nn.predict(q, _q_input(s, a))[:, 0]


def critic_target(batch: dict, rewards: np.ndarray, params: SacParams, gamma: float, rng, alpha: float | None = None):
    """``y = r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s'))`` with fresh ``a'``."""
    rewards = np.asarray(rewards)
    if rewards.shape != (len(batch["s"]),):
        raise ValueError(f"reward batch shape {rewards.shape} does not match {len(batch['s'])} transitions")
    alpha = params.alpha if alpha is None else alpha
    a2, logp2 = sample_action(params.policy, batch["s_next"], rng)
    qn = np.minimum(q_value(params.q1_target, batch["s_next"], a2), q_value(params.q2_target, batch["s_next"], a2))
    return rewards + gamma * (1.0 - batch["done"].astype(np.float64)) * (qn - alpha * logp2)


def critic_loss(q: nn.MlpParams, s, a, y) -> tuple[float, list[np.ndarray]]:
    """Mean squared error to fixed targets and its parameter gradients."""
    out, cache = nn.forward(q, _q_input(s, a))
    err = out[:, 0] - y
    loss = float(np.mean(err * err))
    g = (2.0 * err / len(err)).astype(out.dtype)[:, None]
    grads, _ = nn.backward(q, cache, g)
    return loss, grads


def actor_loss(params: SacParams, s, noise, alpha: float | None = None):
    """``mean(alpha log pi(a|s) - min_i Q_i(s, a))`` with ``a`` reparameterized by ``noise``.

    Returns ``(loss, policy_grads, log_probs)``; critics are held fixed.
    """
    alpha = params.alpha if alpha is None else alpha
    out, cache = nn.forward(params.policy, s)
    k = out.shape[1] // 2
    mu, raw = out[:, :k], out[:, k:]
    log_std = _log_std(raw)
    std = np.exp(log_std)
    a, logp = squashed_log_prob(mu, log_std, noise)

    qin = _q_input(s, a)
    o1, c1 = nn.forward(params.q1, qin)
    o2, c2 = nn.forward(params.q2, qin)
    use1 = o1[:, 0] <= o2[:, 0]
    qmin = np.where(use1, o1[:, 0], o2[:, 0])
    n = len(s)
    loss = float(np.mean(alpha * logp - qmin))

    w1 = (use1 / n).astype(out.dtype)[:, None]
    w2 = (~use1 / n).astype(out.dtype)[:, None]
    _, gin1 = nn.backward(params.q1, c1, w1, need_param_grads=False)
    _, gin2 = nn.backward(params.q2, c2, w2, need_param_grads=False)
    dq_da = (gin1 + gin2)[:, -k:]  # d(mean qmin)/da

    # d logp/du = 2 tanh(u) = 2a ; du/dmu = 1 ; du/dlog_std = std * noise
    da_du = 1.0 - a * a
    dl_du = alpha * 2.0 * a / n - dq_da * da_du
    g_mu = dl_du
    g_ls = dl_du * std * noise - alpha / n
    g_raw = g_ls * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(raw) ** 2)
    grads, _ = nn.backward(params.policy, cache, np.concatenate([g_mu, g_raw], axis=1).astype(out.dtype))
    return loss, grads, logp


def alpha_loss(log_alpha: float, log_probs: np.ndarray, target_entropy: float) -> tuple[float, float]:
    """``-mean(alpha (log pi + H))`` and its derivative w.r.t. ``log alpha``."""
    alpha = math.exp(log_alpha)
    m = float(np.mean(log_probs + target_entropy))
    return -alpha * m, -alpha * m


def polyak_update(sources: list[nn.MlpParams], targets: list[nn.MlpParams], tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for src, tgt in zip(sources, targets):
        tgt.set_arrays([tau * s + (1.0 - tau) * t for s, t in zip(src.arrays(), tgt.arrays())])


class SacAgent:
    """Parameters, optimizers and the per-minibatch update sequence."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden=(256, 256),
        lr_policy: float = 3e-4,
        lr_q: float = 1e-3,
        lr_alpha: float = 1e-3,
        gamma: float = 0.99,
        tau: float = 0.005,
        init_alpha: float = 0.2,
        autotune: bool = True,
        target_entropy: float | None = None,
        actor_clip: float = 20.0,
        rng=None,
        dtype=np.float32,
    ):
        self.rng = np.random.default_rng(rng)
        self.params = make_sac(obs_dim, act_dim, hidden, self.rng, init_alpha, dtype)
        if target_entropy is not None:
            self.params.target_entropy = float(target_entropy)
        self.gamma, self.tau = gamma, tau
        self.autotune = autotune
        self.actor_clip = actor_clip
        self.opt_policy = nn.AdamState.like(self.params.policy.arrays(), lr=lr_policy)
        self.opt_q1 = nn.AdamState.like(self.params.q1.arrays(), lr=lr_q)
        self.opt_q2 = nn.AdamState.like(self.params.q2.arrays(), lr=lr_q)
        self.opt_alpha = nn.AdamState.like([np.zeros(1)], lr=lr_alpha)

    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        a, _ = sample_action(self.params.policy, obs.astype(self.params.policy.dtype), self.rng, deterministic)
        return a

    def critic_update(self, batch: dict, y: np.ndarray) -> float:
        if not np.all(np.isfinite(y)):
            raise nn.NumericFault("non-finite critic targets")
        p = self.params
        l1, g1 = critic_loss(p.q1, batch["s"], batch["a"], y)
        l2, g2 = critic_loss(p.q2, batch["s"], batch["a"], y)
        nn.adam_update(p.q1, g1, self.opt_q1)
        nn.adam_update(p.q2, g2, self.opt_q2)
        return 0.5 * (l1 + l2)

    def actor_update(self, batch: dict) -> tuple[float, np.ndarray]:
        p = self.params
        noise = self.rng.standard_normal((len(batch["s"]), p.act_dim)).astype(p.policy.dtype)
        loss, grads, logp = actor_loss(p, batch["s"], noise)
        grads, _ = nn.clip_by_global_norm(grads, self.actor_clip)
        nn.adam_update(p.policy, grads, self.opt_policy)
        return loss, logp

    def alpha_update(self, log_probs: np.ndarray) -> float:
        if not self.autotune:
            return self.params.alpha
        _, g = alpha_loss(self.params.log_alpha, log_probs, self.params.target_entropy)
        (new,) = nn.adam_step([np.array([self.params.log_alpha])], [np.array([g])], self.opt_alpha)
        self.params.log_alpha = float(new[0])
        return self.params.alpha

    def update(self, batch: dict, rewards: np.ndarray) -> dict:
        """Critic, actor, temperature and target updates on one minibatch."""
        p = self.params
        y = critic_target(batch, rewards, p, self.gamma, self.rng).astype(p.q1.dtype)
        closs = self.critic_update(batch, y)
        aloss, logp = self.actor_update(batch)
        alpha = self.alpha_update(logp)
        polyak_update([p.q1, p.q2], [p.q1_target, p.q2_target], self.tau)
        if not (math.isfinite(closs) and math.isfinite(aloss)):
            raise nn.NumericFault(f"SAC losses diverged (critic {closs}, actor {aloss})")
        return {"critic_loss": closs, "actor_loss": aloss, "alpha": alpha}

    def networks(self) -> dict[str, nn.MlpParams]:
        p = self.params
        return {"policy": p.policy, "q1": p.q1, "q2": p.q2, "q1_target": p.q1_target, "q2_target": p.q2_target}

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"log_alpha": self.params.log_alpha, "target_entropy": self.params.target_entropy}
        meta.update(extra or {})
        nn.save_checkpoint(path, self.networks(), meta)


def load_policy(path, dtype=np.float32) -> tuple[nn.MlpParams, dict]:
    nets, meta = nn.load_checkpoint(path, dtype)
    return nets["policy"], meta


def deterministic_policy(policy: nn.MlpParams):
    def act(obs):
        mu, _ = policy_dist(policy, np.asarray(obs, dtype=policy.dtype))
        return np.tanh(mu)

    return act
