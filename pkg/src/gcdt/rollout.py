"""Evaluation-time control loop and success-rate benchmarking.

Per episode the loop keeps a history cache of (time-to-goal, goal,
observation, action) groups. At each step the current group is appended
without its action, the cache is embedded (trailing action slot absent),
the action head is read at the current observation token, and the result is
executed verbatim — tanh already bounds it to (-1, 1). When the cache would
exceed its capacity, the earliest whole timestep group is discarded.

Ground-truth time-to-goal does not exist during evaluation, so it is
estimated by a time-delayed rule from the task's expected overall steps:
max(expected_steps - t + 1, 1), floored at 1 to match the training
convention that the value is never 0 inside an episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import ModelBundle
from .data import NormStats, Window
from .envs import KinematicEnv, make_env
from .model import SequenceBatch, batch_from_windows, predict_action
from .rng import derive_seed


def estimate_time_to_goal(t: int, expected_steps: int) -> int:
    """Time-delayed estimate in raw steps; t is the 1-based current timestep."""
    if t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    return max(expected_steps - t + 1, 1)


class HistoryCache:
    """Rolling window of executed timestep groups, capacity K timesteps."""

    def __init__(self, capacity: int, goal: np.ndarray):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.goal = np.asarray(goal, dtype=np.float64).copy()
        self.first_timestep = 1  # absolute index of the oldest retained group
        self.time_to_goal: list[float] = []
        self.observations: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.time_to_goal)

    def timesteps(self) -> np.ndarray:
        return np.arange(
            self.first_timestep, self.first_timestep + len(self), dtype=np.int64
        )

    def begin_step(self, time_to_goal: float, observation: np.ndarray) -> None:
        """Append the pre-action items of a new timestep, evicting if full."""
        if len(self.actions) != len(self.time_to_goal):
            raise RuntimeError("previous step is missing its action")
        if len(self) == self.capacity:
            self.time_to_goal.pop(0)
            self.observations.pop(0)
            self.actions.pop(0)
            self.first_timestep += 1
        self.time_to_goal.append(float(time_to_goal))
        self.observations.append(np.asarray(observation, dtype=np.float64).copy())

    def complete_step(self, action: np.ndarray) -> None:
        if len(self.actions) != len(self.time_to_goal) - 1:
            raise RuntimeError("no open step to complete")
        self.actions.append(np.asarray(action, dtype=np.float64).copy())

    def as_batch(self, stats: NormStats, act_dim: int) -> SequenceBatch:
        """Single-sample batch; an open step gets a zero placeholder action
        (its token is dropped before the backbone ever sees it)."""
        n = len(self)
        acts = list(self.actions)
        if len(acts) < n:
            acts.append(np.zeros(act_dim))
        w = Window(
            task_id=stats.task_id,
            timesteps=self.timesteps(),
            time_to_goal=np.asarray(self.time_to_goal),
            goal=self.goal,
            observations=np.asarray(self.observations),
            actions=np.asarray(acts),
        )
        return batch_from_windows([w], stats)


@dataclass
class RolloutResult:
    success: bool
    steps: int
    observations: np.ndarray
    actions: np.ndarray
    goal: np.ndarray
    achieved_goals: np.ndarray


def rollout_episode(
    env: KinematicEnv,
    bundle: ModelBundle,
    seed: int,
    max_timesteps: int | None = None,
) -> RolloutResult:
    """One closed-loop episode; deterministic in (bundle, seed)."""
    task = env.name
    spec = bundle.task_specs.get(task)
    stats = bundle.norm_stats.get(task)
    if spec is None or stats is None:
        raise KeyError(f"checkpoint has no adapters/stats for task {task!r}")
    env_spec = env.spec
    if (env_spec.obs_dim, env_spec.goal_dim, env_spec.act_dim) != (
        spec.obs_dim,
        spec.goal_dim,
        spec.act_dim,
    ):
        raise ValueError(
            f"environment dims {(env_spec.obs_dim, env_spec.goal_dim, env_spec.act_dim)}"
            f" conflict with checkpoint {(spec.obs_dim, spec.goal_dim, spec.act_dim)}"
        )
    model = bundle.model
    capacity = max_timesteps or model.config.max_timesteps
    capacity = min(capacity, model.config.max_timesteps)
    obs = env.reset(seed)
    goal = env.goal.copy()
    observations = [obs.vector.copy()]
    actions: list[np.ndarray] = []
    achieved = [obs.achieved_goal.copy()]
    if obs.success:
        # degenerate reset already at the goal: zero-step success
        return RolloutResult(
            True, 0, np.asarray(observations), np.zeros((0, spec.act_dim)),
            goal, np.asarray(achieved),
        )
    cache = HistoryCache(capacity, goal)
    success = False
    steps = 0
    for t in range(1, env_spec.max_episode_steps + 1):
        tto = estimate_time_to_goal(t, spec.expected_steps)
        cache.begin_step(tto, obs.vector)
        batch = cache.as_batch(stats, spec.act_dim)
        seq = model.embed_sequence(batch, drop_trailing_action=True)
        hidden = model.backbone_forward(seq)
        action = predict_action(model, hidden, task, len(cache))
        obs = env.step(action)
        cache.complete_step(action)
        observations.append(obs.vector.copy())
        actions.append(np.asarray(action, dtype=np.float64))
        achieved.append(obs.achieved_goal.copy())
        steps = t
        if obs.success:
            success = True
            break
    return RolloutResult(
        success=success,
        steps=steps,
        observations=np.asarray(observations),
        actions=np.asarray(actions),
        goal=goal,
        achieved_goals=np.asarray(achieved),
    )


@dataclass
class EvalReport:
    """Success-rate statistics over an (evaluation seed x episode) grid."""

    task: str
    seeds: list[int]
    episodes: int
    per_seed_rates: list[float]
    mean: float
    std: float
    mean_episode_length: float
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "seeds": self.seeds,
            "episodes": self.episodes,
            "per_seed_rates": self.per_seed_rates,
            "mean": self.mean,
            "std": self.std,
            "mean_episode_length": self.mean_episode_length,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def evaluate(
    env_name: str,
    bundle: ModelBundle,
    episodes: int = 100,
    seeds=(0, 1, 2, 3, 4),
    max_timesteps: int | None = None,
) -> EvalReport:
    """Success rate over `episodes` rollouts for each seed.

    Episode reset seeds are derive_seed(seed, episode_index), so the full
    grid is reproducible from the seed list alone. Mean and std (population)
    are over the per-seed rates.
    """
    seeds = list(seeds)
    env = make_env(env_name)
    rates = []
    lengths = []
    for seed in seeds:
        wins = 0
        for ep in range(episodes):
            result = rollout_episode(
                env, bundle, derive_seed(seed, ep), max_timesteps=max_timesteps
            )
            wins += int(result.success)
            lengths.append(result.steps)
        rates.append(wins / episodes)
    rates_arr = np.asarray(rates)
    return EvalReport(
        task=env_name,
        seeds=seeds,
        episodes=episodes,
        per_seed_rates=[float(r) for r in rates],
        mean=float(rates_arr.mean()),
        std=float(rates_arr.std()),
        mean_episode_length=float(np.mean(lengths)) if lengths else 0.0,
    )
