"""Small deterministic continuous-control tasks and a 4-way vectorized runner.

Each task is a set of pure functions over :class:`EnvState`; the control
period is 0.02 s and dynamics use semi-implicit Euler.  The true reward is
only used for expert training and evaluation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DT = 0.02


@dataclass(frozen=True)
class EnvState:
    task: str
    physics: tuple[float, ...]
    t: int = 0
    horizon: int = 200
    fault: bool = False


class UnknownTaskError(KeyError):
    pass


class Task:
    name: str
    obs_dim: int
    act_dim: int
    horizon: int

    def sample_physics(self, rng: np.random.Generator) -> tuple[float, ...]:
        raise NotImplementedError

    def integrate(self, physics: tuple[float, ...], action: np.ndarray) -> tuple[float, ...]:
        raise NotImplementedError

    def observe(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def reward(self, physics: tuple[float, ...], action: np.ndarray) -> float:
        raise NotImplementedError

    def reward_from_obs(self, next_obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Batched true reward recomputed from ``(s', a)``; lets buffers skip storing it."""
        raise NotImplementedError

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        return EnvState(self.name, self.sample_physics(rng), 0, self.horizon)

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        """Advance one control period.

        Returns ``(next_state, true_reward, done)`` where ``done`` marks the
        time limit or a numerical fault (flagged on the state).
        """
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.act_dim), -1.0, 1.0)
        physics = self.integrate(state.physics, a)
        fault = not all(math.isfinite(v) for v in physics)
        r = 0.0 if fault else self.reward(physics, a)
        nxt = replace(state, physics=physics, t=state.t + 1, fault=fault)
        return nxt, r, fault or nxt.t >= nxt.horizon


class PointMassReach(Task):
    """Planar point mass pushed toward the origin.

    State (x, y, vx, vy); actions are forces in [-1, 1]^2.  Walls at |x|, |y| = 2
    stop the mass.
    """

    name = "point_mass_reach"
    obs_dim = 4
    act_dim = 2
    horizon = 200
    force = 5.0
    damping = 1.0
    wall = 2.0
    radius = 1.0

    def sample_physics(self, rng):
        r = self.radius * math.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * math.pi)
        return (r * math.cos(phi), r * math.sin(phi), 0.0, 0.0)

    def integrate(self, physics, action):
        x, y, vx, vy = physics
        vx += DT * (self.force * action[0] - self.damping * vx)
        vy += DT * (self.force * action[1] - self.damping * vy)
        x += DT * vx
        y += DT * vy
        if abs(x) > self.wall:
            x, vx = math.copysign(self.wall, x), 0.0
        if abs(y) > self.wall:
            y, vy = math.copysign(self.wall, y), 0.0
        return (x, y, vx, vy)

    def observe(self, state):
        return np.array(state.physics)

    def reward(self, physics, action):
        x, y = physics[0], physics[1]
        return -(x * x + y * y) - 0.01 * float(action @ action)

    def reward_from_obs(self, next_obs, action):
        a = np.clip(action, -1.0, 1.0)
        return -np.sum(next_obs[:, :2] ** 2, axis=1) - 0.01 * np.sum(a * a, axis=1)


class PendulumSwingup(Task):
    """Frictionless torque-limited pendulum; theta = 0 is upright.

    Observation (cos theta, sin theta, theta_dot).  Torque alone cannot lift
    the pole, so the policy has to pump energy.
    """

    name = "pendulum_swingup"
    obs_dim = 3
    act_dim = 1
    horizon = 200
    g_over_l = 9.81
    torque = 4.0
    max_speed = 8.0
    substeps = 100

    def sample_physics(self, rng):
        return (rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0))

    def integrate(self, physics, action):
        th, w = physics
        h = DT / self.substeps
        u = self.torque * float(action[0])
        g = self.g_over_l
        sin = math.sin
        for _ in range(self.substeps):
            w += h * (g * sin(th) + u)
            th += h * w
        w = min(max(w, -self.max_speed), self.max_speed)
        th = (th + math.pi) % (2.0 * math.pi) - math.pi
        return (th, w)

    def observe(self, state):
        th, w = state.physics
        return np.array([math.cos(th), math.sin(th), w])

    def reward(self, physics, action):
        th, w = physics
        return math.cos(th) - 0.01 * w * w - 0.001 * float(action[0]) ** 2

    def reward_from_obs(self, next_obs, action):
        a = np.clip(action[:, 0], -1.0, 1.0)
        return next_obs[:, 0] - 0.01 * next_obs[:, 2] ** 2 - 0.001 * a * a

    def energy(self, physics) -> float:
        """Mechanical energy in units of m*g*l."""
        th, w = physics
        return math.cos(th) + 0.5 * w * w / self.g_over_l


class CartpoleSwingup(Task):
    """Cart-pole on a bounded rail, pole starting anywhere; theta = 0 upright.

    Observation (x, cos theta, sin theta, x_dot, theta_dot).
    """

    name = "cartpole_swingup"
    obs_dim = 5
    act_dim = 1
    horizon = 500
    gravity = 9.81
    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    force = 10.0
    rail = 3.0
    substeps = 10

    def sample_physics(self, rng):
        return (rng.uniform(-1.0, 1.0), rng.uniform(-math.pi, math.pi), 0.0, rng.uniform(-1.0, 1.0))

    def integrate(self, physics, action):
        x, th, xd, thd = physics
        f = self.force * float(action[0])
        mp, l = self.pole_mass, self.half_length
        total = self.cart_mass + mp
        h = DT / self.substeps
        for _ in range(self.substeps):
            s, c = math.sin(th), math.cos(th)
            tmp = (f + mp * l * thd * thd * s) / total
            thacc = (self.gravity * s - c * tmp) / (l * (4.0 / 3.0 - mp * c * c / total))
            xacc = tmp - mp * l * thacc * c / total
            xd += h * xacc
            thd += h * thacc
            x += h * xd
            th += h * thd
            if abs(x) > self.rail:
                x, xd = math.copysign(self.rail, x), 0.0
        th = (th + math.pi) % (2.0 * math.pi) - math.pi
        return (x, th, xd, thd)

    def observe(self, state):
        x, th, xd, thd = state.physics
        return np.array([x, math.cos(th), math.sin(th), xd, thd])

    def reward(self, physics, action):
        x, th, _, thd = physics
        return math.cos(th) - 0.01 * thd * thd - 0.001 * float(action[0]) ** 2 - 0.1 * x * x

    def reward_from_obs(self, next_obs, action):
        a = np.clip(action[:, 0], -1.0, 1.0)
        x = next_obs[:, 0]
        return next_obs[:, 1] - 0.01 * next_obs[:, 4] ** 2 - 0.001 * a * a - 0.1 * x * x


TASKS: dict[str, Task] = {t.name: t for t in (PointMassReach(), PendulumSwingup(), CartpoleSwingup())}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise UnknownTaskError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def reset(task: str, seed: int) -> EnvState:
    return get_task(task).reset(seed)


def step(state: EnvState, action) -> tuple[EnvState, float, bool]:
    return get_task(state.task).step(state, action)


@dataclass
class StepResult:
    obs: np.ndarray  # observation after reset where an episode ended
    final_obs: np.ndarray  # true next observation, before any auto-reset
    reward: np.ndarray
    terminated: np.ndarray  # genuine termination (faults); bootstrap cut
    truncated: np.ndarray  # time limit
    episode_returns: list[tuple[int, float]] = field(default_factory=list)


class VecEnv:
    """``n`` independent copies of one task with auto-reset.

    Each reset draws a fresh seed from a generator seeded once, so runs are
    reproducible while every episode sees a new initial state.
    """

    def __init__(self, task: str, n: int = 4, seed: int = 0):
        self.task = get_task(task)
        self.n = n
        self._seeds = np.random.default_rng(seed)
        self.states = [self.task.reset(self._next_seed()) for _ in range(n)]
        self.returns = np.zeros(n)
        self.global_step = 0

    def _next_seed(self) -> int:
        return int(self._seeds.integers(2**31 - 1))

    def observe(self) -> np.ndarray:
        return np.stack([self.task.observe(s) for s in self.states])

    def step(self, actions: np.ndarray) -> StepResult:
        actions = np.asarray(actions)
        if actions.shape != (self.n, self.task.act_dim):
            raise ValueError(f"expected actions of shape {(self.n, self.task.act_dim)}, got {actions.shape}")
        obs, final, rew = [], [], np.zeros(self.n)
        term = np.zeros(self.n, dtype=bool)
        trunc = np.zeros(self.n, dtype=bool)
        finished = []
        for i in range(self.n):
            nxt, r, done = self.task.step(self.states[i], actions[i])
            rew[i] = r
            self.returns[i] += r
            f = self.task.observe(nxt)
            if nxt.fault:
                f = np.nan_to_num(f, nan=0.0, posinf=0.0, neginf=0.0)
            final.append(f)
            if done:
                term[i] = nxt.fault
                trunc[i] = not nxt.fault
                finished.append((i, float(self.returns[i])))
                self.returns[i] = 0.0
                nxt = self.task.reset(self._next_seed())
                f = self.task.observe(nxt)
            self.states[i] = nxt
            obs.append(f)
        self.global_step += self.n
        return StepResult(np.stack(obs), np.stack(final), rew, term, trunc, finished)


def rollout_returns(task: str, policy, seeds, batch: bool = True) -> np.ndarray:
    """Undiscounted episode returns of ``policy(obs_batch) -> actions`` from each seed.

    Episodes run side by side so the policy sees one batch per time step.
    """
    t = get_task(task)
    states = [t.reset(int(s)) for s in seeds]
    totals = np.zeros(len(states))
    for _ in range(t.horizon):
        obs = np.stack([t.observe(s) for s in states])
        acts = np.asarray(policy(obs))
        for i, s in enumerate(states):
            if s.fault or s.t >= s.horizon:
                continue
            states[i], r, _ = t.step(s, acts[i])
            totals[i] += r
    return totals


def random_policy(act_dim: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return lambda obs: rng.uniform(-1.0, 1.0, size=(len(obs), act_dim))


@dataclass(frozen=True)
class NormalizationRefs:
    random_return: float
    expert_return: float

    def __post_init__(self) -> None:
        if not self.expert_return > self.random_return:
            raise ValueError(
                f"degenerate references: expert {self.expert_return} <= random {self.random_return}"
            )


def normalized_return(raw: float, refs: NormalizationRefs) -> float:
    return (raw - refs.random_return) / (refs.expert_return - refs.random_return)


def write_refs(path, refs: dict[str, NormalizationRefs]) -> None:
    """Refs manifest: one ``task random_return expert_return`` line per task."""
    lines = ["# task random_return expert_return"]
    for name in sorted(refs):
        r = refs[name]
        lines.append(f"{name} {r.random_return!r} {r.expert_return!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_refs(path) -> dict[str, NormalizationRefs]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, rnd, exp = line.split()
        out[name] = NormalizationRefs(float(rnd), float(exp))
    return out


def merge_refs(path, name: str, refs: NormalizationRefs) -> None:
    p = Path(path)
    current = read_refs(p) if p.exists() else {}
    current[name] = refs
    write_refs(p, current)


def describe(task: str) -> str:
    t = get_task(task)
    return json.dumps({"task": t.name, "obs_dim": t.obs_dim, "act_dim": t.act_dim, "horizon": t.horizon})
