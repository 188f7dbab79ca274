"""Expert training, demonstration collection and storage, subsampling and behavioral cloning."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .config import RunConfig
from .envs import NormalizationRefs, get_task, random_policy, rollout_returns
from .reward import INPUT_MODES, project_input
from .sac import Transition, deterministic_policy
from .training import TrainResult, evaluate_policy, train_loop

MAGIC = "NGTDEMO1"
REF_EPISODES = 50


class ExpertTrainingError(RuntimeError):
    pass


class DemoFormatError(ValueError):
    pass


@dataclass
class DemonstrationSet:
    """Transitions grouped by episode, stored as float32 arrays.

    ``lengths[i]`` is the number of transitions of episode ``i``; rows are
    laid out episode after episode.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    lengths: list[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=np.float32)
        self.a = np.asarray(self.a, dtype=np.float32)
        self.s_next = np.asarray(self.s_next, dtype=np.float32)
        self.done = np.asarray(self.done, dtype=bool)
        self.lengths = [int(n) for n in self.lengths]
        n = len(self.s)
        if not (len(self.a) == len(self.s_next) == len(self.done) == n == sum(self.lengths)):
            raise DemoFormatError("array lengths disagree with episode lengths")

    def __len__(self) -> int:
        return len(self.s)

    @property
    def n_episodes(self) -> int:
        return len(self.lengths)

    def episode_slices(self) -> list[slice]:
        out, start = [], 0
        for n in self.lengths:
            out.append(slice(start, start + n))
            start += n
        return out

    def transitions(self) -> list[Transition]:
        return [Transition(self.s[i], self.a[i], self.s_next[i], bool(self.done[i])) for i in range(len(self))]

    def inputs(self, mode: str | None = None) -> np.ndarray:
        return project_input(self.s, self.a, self.s_next, mode or self.meta.get("input_mode", "state_action"))

    def save(self, path) -> None:
        header = {
            "format": MAGIC,
            "meta": self.meta,
            "lengths": self.lengths,
            "obs_dim": int(self.s.shape[1]),
            "act_dim": int(self.a.shape[1]),
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
            for arr in (self.s, self.a, self.s_next):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            fh.write(np.packbits(self.done, bitorder="little").tobytes())

    @classmethod
    def load(cls, path) -> "DemonstrationSet":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        try:
            header = json.loads(raw[:nl])
        except (ValueError, UnicodeDecodeError):
            raise DemoFormatError(f"{path}: unreadable header") from None
        if header.get("format") != MAGIC:
            raise DemoFormatError(f"{path}: not a demonstration file")
        n = sum(header["lengths"])
        od, ad = header["obs_dim"], header["act_dim"]
        off = nl + 1
        blocks = []
        for dim in (od, ad, od):
            size = n * dim * 4
            if off + size > len(raw):
                raise DemoFormatError(f"{path}: truncated payload")
            blocks.append(np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).astype(np.float32))
            off += size
        nbytes = (n + 7) // 8
        if off + nbytes != len(raw):
            raise DemoFormatError(f"{path}: payload size mismatch")
        done = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=off), count=n, bitorder="little").astype(bool)
        return cls(*blocks, done, header["lengths"], header["meta"])


def collect(policy, task: str, n_episodes: int, seed: int, input_mode: str = "state_action",
            expert_seed: int | None = None, max_attempts: int = 10) -> DemonstrationSet:
    """Full-horizon deterministic rollouts of ``policy`` (``obs batch -> actions``).

    Episodes that hit a numerical fault are dropped and replaced by episodes
    from fresh seeds.
    """
    if input_mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {input_mode!r}")
    t = get_task(task)
    rng = np.random.default_rng(seed)
    kept: list[tuple[np.ndarray, ...]] = []
    for _ in range(max_attempts):
        need = n_episodes - len(kept)
        if need == 0:
            break
        states = [t.reset(int(sd)) for sd in rng.integers(2**31 - 1, size=need)]
        S = np.zeros((need, t.horizon, t.obs_dim))
        A = np.zeros((need, t.horizon, t.act_dim))
        S2 = np.zeros_like(S)
        faulty = np.zeros(need, dtype=bool)
        for k in range(t.horizon):
            obs = np.stack([t.observe(s) for s in states])
            act = np.clip(np.asarray(policy(obs), dtype=np.float64), -1.0, 1.0)
            for i in range(need):
                if faulty[i]:
                    continue
                states[i], _, _ = t.step(states[i], act[i])
                faulty[i] = states[i].fault
                S[i, k], A[i, k], S2[i, k] = obs[i], act[i], t.observe(states[i])
        kept.extend((S[i], A[i], S2[i]) for i in range(need) if not faulty[i])
    if len(kept) < n_episodes:
        raise ExpertTrainingError(f"could not collect {n_episodes} fault-free episodes")
    s = np.concatenate([e[0] for e in kept])
    a = np.concatenate([e[1] for e in kept])
    s2 = np.concatenate([e[2] for e in kept])
    done = np.zeros(len(s), dtype=bool)  # time-limit ends are truncations, not terminations
    meta = {
        "task": task,
        "expert_seed": expert_seed,
        "collect_seed": seed,
        "n_episodes": n_episodes,
        "subsample_rate": 1,
        "subsample_offset": 0,
        "input_mode": input_mode,
    }
    return DemonstrationSet(s, a, s2, done, [t.horizon] * n_episodes, meta)


def subsample(demos: DemonstrationSet, rate: int, offset: int = 0) -> DemonstrationSet:
    """Keep steps ``offset, offset + rate, ...`` of every episode."""
    if rate < 1:
        raise ValueError("subsampling rate must be at least 1")
    if not 0 <= offset < rate:
        raise ValueError("offset must satisfy 0 <= offset < rate")
    idx, lengths = [], []
    for sl in demos.episode_slices():
        keep = np.arange(sl.start + offset, sl.stop, rate)
        idx.append(keep)
        lengths.append(len(keep))
    idx = np.concatenate(idx) if idx else np.zeros(0, dtype=int)
    prev_rate = demos.meta.get("subsample_rate", 1)
    prev_off = demos.meta.get("subsample_offset", 0)
    meta = dict(demos.meta, subsample_rate=prev_rate * rate, subsample_offset=prev_off + prev_rate * offset)
    return DemonstrationSet(demos.s[idx], demos.a[idx], demos.s_next[idx], demos.done[idx], lengths, meta)


def kept_count(length: int, rate: int, offset: int) -> int:
    return max(0, math.ceil((length - offset) / rate))


def random_reference(task: str, seed: int, episodes: int = REF_EPISODES) -> np.ndarray:
    t = get_task(task)
    seeds = np.random.default_rng(seed).integers(2**31 - 1, size=episodes)
    return rollout_returns(task, random_policy(t.act_dim, seed), seeds)


def measure_refs(task: str, policy: nn.MlpParams, seed: int, episodes: int = REF_EPISODES):
    """Mean random and expert returns over ``episodes`` episodes each, plus the
    standard error of the random mean."""
    rnd = random_reference(task, seed, episodes)
    seeds = np.random.default_rng(seed + 1).integers(2**31 - 1, size=episodes)
    exp = evaluate_policy(task, policy, seeds)
    return float(rnd.mean()), float(exp.mean()), float(rnd.std(ddof=1) / math.sqrt(episodes))


def train_expert(task: str, seed: int, budget: int, cfg: RunConfig | None = None):
    """SAC on the true reward, then reference returns over 50 episodes each.

    Raises :class:`ExpertTrainingError` if the expert does not beat the random
    policy by more than five standard errors of the random mean.
    Returns ``(policy, refs, train_result)``.
    """
    cfg = replace(cfg or RunConfig(task=task), task=task, reward_source="env", total_steps=budget)
    result: TrainResult = train_loop(cfg, seed)
    policy = result.agent.params.policy
    rnd, exp, spread = measure_refs(task, policy, seed + 7919)
    if exp - rnd <= 5.0 * spread:
        raise ExpertTrainingError(
            f"expert return {exp:.3f} does not clear random {rnd:.3f} by 5x its spread {spread:.3f}"
        )
    return policy, NormalizationRefs(rnd, exp), result


def scripted_point_mass(obs: np.ndarray, kp: float = 16.0, kd: float = 2.0) -> np.ndarray:
    """Saturated PD controller toward the origin; a near-optimal return oracle for point-mass reach."""
    return np.clip(-kp * obs[:, :2] - kd * obs[:, 2:4], -1.0, 1.0)


def behavior_cloning(demos: DemonstrationSet, hidden=(256, 256), iterations: int = 10_000,
                     batch_size: int = 256, lr: float = 3e-4, rng=None, dtype=np.float32) -> nn.MlpParams:
    """Regress ``tanh(mean head)`` onto expert actions with the SAC policy architecture."""
    rng = np.random.default_rng(rng)
    if len(demos) == 0:
        raise ValueError("empty demonstration set")
    obs_dim, act_dim = demos.s.shape[1], demos.a.shape[1]
    policy = nn.build_mlp([obs_dim, *hidden, 2 * act_dim], "relu", "identity", rng, output_gain=0.01, dtype=dtype)
    opt = nn.AdamState.like(policy.arrays(), lr=lr)
    s = demos.s.astype(dtype)
    target = np.clip(demos.a, -1.0, 1.0).astype(dtype)
    for _ in range(iterations):
        idx = rng.integers(len(s), size=batch_size)
        out, cache = nn.forward(policy, s[idx])
        act = np.tanh(out[:, :act_dim])
        err = act - target[idx]
        g = np.zeros_like(out)
        g[:, :act_dim] = 2.0 * err * (1.0 - act * act) / err.size
        grads, _ = nn.backward(policy, cache, g)
        nn.adam_update(policy, grads, opt)
    return policy


def bc_loss(policy: nn.MlpParams, demos: DemonstrationSet) -> float:
    act = deterministic_policy(policy)(demos.s)
    return float(np.mean((act - demos.a) ** 2))
