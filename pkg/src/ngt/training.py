"""The interleaved imitation loop: environment steps, reward updates and SAC updates."""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .config import RunConfig
from .envs import NormalizationRefs, VecEnv, get_task, normalized_return, rollout_returns
from .losses import HlgConfig
from .reward import RewardModel, input_dim, project_input
from .sac import ReplayBuffer, SacAgent, deterministic_policy

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "eval_return_mean", "eval_return_norm", "reward_loss", "critic_loss", "actor_loss", "alpha")


@dataclass
class TrainResult:
    agent: SacAgent
    reward_model: RewardModel | None
    steps: int
    window_return: float
    window_normalized: float | None
    rows: list[dict] = field(default_factory=list)


def build_reward_model(cfg: RunConfig, obs_dim: int, act_dim: int, rng) -> RewardModel:
    hlg = dict(a=cfg.hlg_a, b=cfg.hlg_b, n_bins=cfg.hlg_bins)
    return RewardModel(
        cfg.method,
        input_dim(cfg.input_mode, obs_dim, act_dim),
        input_mode=cfg.input_mode,
        pairing=cfg.pairing,
        embed_dim=cfg.embed_dim,
        hidden=cfg.reward_hidden,
        lr=cfg.lr_reward,
        spectral_norm=cfg.spectral_norm,
        output_rescale=cfg.output_rescale,
        hlg_expert=HlgConfig(sigma=cfg.hlg_sigma_expert, **hlg),
        hlg_agent=HlgConfig(sigma=cfg.hlg_sigma_agent, **hlg),
        rng=rng,
        dtype=np.dtype(cfg.dtype).type,
    )


def evaluate_policy(task: str, policy, seeds) -> np.ndarray:
    """Deterministic-action returns, one episode per seed."""
    return rollout_returns(task, deterministic_policy(policy), seeds)


class _Means:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, d: dict) -> None:
        for k, v in d.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
            self.counts[k] = self.counts.get(k, 0) + 1

    def pop(self, key: str) -> float:
        n = self.counts.pop(key, 0)
        s = self.sums.pop(key, 0.0)
        return s / n if n else math.nan


def train_loop(
    cfg: RunConfig,
    seed: int,
    expert_x: np.ndarray | None = None,
    refs: NormalizationRefs | None = None,
    metrics_path=None,
) -> TrainResult:
    """Run SAC for ``cfg.total_steps`` environment steps (counted across all envs).

    With ``cfg.reward_source == "learned"`` each gradient step updates the
    reward model on an expert batch and an agent batch, then samples a fresh
    agent batch and hands its rescaled learned reward to the critic.  With ``"env"`` the
    task reward is recomputed from the stored ``(s', a)`` instead.
    """
    task = get_task(cfg.task)
    dtype = np.dtype(cfg.dtype).type
    root = np.random.SeedSequence(seed)
    s_env, s_agent, s_reward, s_batch, s_eval = root.spawn(5)
    env = VecEnv(cfg.task, cfg.num_envs, seed=int(s_env.generate_state(1)[0]))
    agent = SacAgent(
        task.obs_dim, task.act_dim, cfg.hidden, cfg.lr_policy, cfg.lr_q, cfg.lr_alpha, cfg.gamma, cfg.tau,
        cfg.alpha_init, cfg.alpha_autotune, cfg.target_entropy, cfg.actor_clip_norm,
        rng=np.random.default_rng(s_agent), dtype=dtype,
    )
    learned = cfg.reward_source == "learned"
    reward_model = None
    if learned:
        if cfg.method not in ("ngt", "red_star", "w_potential"):
            raise ValueError(f"method {cfg.method!r} does not learn a reward")
        if expert_x is None or len(expert_x) == 0:
            raise ValueError("learned-reward training needs expert inputs")
        reward_model = build_reward_model(cfg, task.obs_dim, task.act_dim, np.random.default_rng(s_reward))
        expert_x = np.asarray(expert_x, dtype=dtype)
        if expert_x.shape[1] != reward_model.model.in_dim:
            raise ValueError(f"expert inputs have dimension {expert_x.shape[1]}, reward expects {reward_model.model.in_dim}")
    buffer = ReplayBuffer(task.obs_dim, task.act_dim, min(cfg.buffer_size, cfg.total_steps), dtype=dtype)
    batch_rng = np.random.default_rng(s_batch)
    eval_rng = np.random.default_rng(s_eval)

    window: deque[float] = deque(maxlen=cfg.eval_window)
    rows: list[dict] = []
    means = _Means()
    writer = None
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()

    def run_eval() -> None:
        check_finite_params(agent)
        seeds = eval_rng.integers(2**31 - 1, size=cfg.eval_episodes)
        returns = evaluate_policy(cfg.task, agent.params.policy, seeds)
        window.extend(returns.tolist())
        mean = float(np.mean(returns))
        row = {
            "step": env.global_step,
            "eval_return_mean": mean,
            "eval_return_norm": normalized_return(mean, refs) if refs else math.nan,
            "reward_loss": means.pop("reward_loss"),
            "critic_loss": means.pop("critic_loss"),
            "actor_loss": means.pop("actor_loss"),
            "alpha": agent.params.alpha,
        }
        rows.append(row)
        if writer is not None:
            writer.writerow(row)
            fh.flush()
        log.info("step %d return %.3f norm %.3f", env.global_step, mean, row["eval_return_norm"])

    obs = env.observe().astype(dtype)
    next_eval = cfg.eval_every
    try:
        while env.global_step < cfg.total_steps:
            for _ in range(cfg.env_steps_per_update):
                action = agent.act(obs)
                res = env.step(action)
                buffer.add(obs, action, res.final_obs, res.terminated)
                obs = res.obs.astype(dtype)
            if env.global_step > cfg.learning_starts:
                for _ in range(cfg.grad_steps_per_update):
                    if learned:
                        # the reward model and the actor-critic each get their own agent minibatch
                        rb = buffer.sample(cfg.batch_size, batch_rng)
                        ex = expert_x[batch_rng.integers(len(expert_x), size=cfg.batch_size)]
                        means.add(reward_model.update(ex, project_input(rb["s"], rb["a"], rb["s_next"], cfg.input_mode)))
                    batch = buffer.sample(cfg.batch_size, batch_rng)
                    if learned:
                        rewards = reward_model.reward(project_input(batch["s"], batch["a"], batch["s_next"], cfg.input_mode))
                    else:
                        rewards = task.reward_from_obs(batch["s_next"], batch["a"])
                    means.add(agent.update(batch, rewards))
            if env.global_step >= next_eval:
                run_eval()
                next_eval += cfg.eval_every
        if not rows or rows[-1]["step"] != env.global_step:
            run_eval()
    finally:
        if fh is not None:
            fh.close()

    window_return = float(np.mean(window))
    return TrainResult(
        agent, reward_model, env.global_step, window_return,
        normalized_return(window_return, refs) if refs else None, rows,
    )


def check_finite_params(agent: SacAgent) -> None:
    for name, net in agent.networks().items():
        if not all(np.all(np.isfinite(a)) for a in net.arrays()):
            raise nn.NumericFault(f"{name} parameters are not finite")
