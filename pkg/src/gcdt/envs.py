"""Deterministic goal-conditioned kinematic environments with scripted experts.

Three tasks in a unit workspace [0,1]^3:

  reach3d      one arm moves its end effector to a target point
  pickplace3d  one arm grasps an object and carries it to a target point
  bireach3d    two arms reach two targets simultaneously

Kinematics per step, in order: (1) actions clamped to [-1,1] (a warning
flag is set if any component was out of range); (2) each end effector moves
by 0.05 * its three movement components, clamped to the workspace; (3) the
gripper command takes effect — negative closes, zero or positive opens;
closing within 0.03 of a free object attaches it; opening releases;
(4) attached objects snap to their arm's end effector (grip offset zero).

Success is distance(achieved_goal, goal) < 0.02; for bireach3d the distance
is the worse of the two per-arm distances. Resets sample entities uniformly
inside [0.05, 0.95]^3 and redraw the goal until it is at least 0.2 from the
relevant start entity, so zero-length episodes cannot occur.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .data import Dataset, TaskSpec, Trajectory, save_dataset
from .rng import Pcg32, derive_seed

STEP_SIZE = 0.05
ATTACH_RADIUS = 0.03
SUCCESS_THRESHOLD = 0.02
MIN_SEPARATION = 0.2
SPAWN_LO = 0.05
SPAWN_HI = 0.95
HOVER_HEIGHT = 0.08

ENV_NAMES = ("reach3d", "pickplace3d", "bireach3d")

GRIPPER_OPEN = 1.0
GRIPPER_CLOSED = -1.0


class UnknownEnvError(ValueError):
    pass


class EpisodeOverrunError(RuntimeError):
    """step() called past max_episode_steps."""


@dataclass
class EnvObservation:
    vector: np.ndarray  # (obs_dim,)
    achieved_goal: np.ndarray  # (goal_dim,)
    success: bool
    clipped: bool = False  # an action component was clamped into [-1, 1]


def _clamp_workspace(p: np.ndarray) -> np.ndarray:
    return np.clip(p, 0.0, 1.0)


def _sample_point(rng: Pcg32) -> np.ndarray:
    return np.array([rng.uniform_in(SPAWN_LO, SPAWN_HI) for _ in range(3)])


def _sample_separated(rng: Pcg32, anchor: np.ndarray) -> np.ndarray:
    """A point at least MIN_SEPARATION from anchor (rejection sampling)."""
    while True:
        p = _sample_point(rng)
        if float(np.linalg.norm(p - anchor)) >= MIN_SEPARATION:
            return p


class KinematicEnv:
    """Base: one or two arms, optional object, step/reset/expert interface."""

    name: str
    n_arms: int = 1
    has_object: bool = False

    def __init__(self, seed: int = 0):
        self._base_seed = seed
        self._reset_index = 0
        self.step_count = 0
        self.ee = np.zeros((self.n_arms, 3))
        self.gripper_closed = np.zeros(self.n_arms, dtype=bool)
        self.object_pos = np.zeros(3) if self.has_object else None
        self.attached_to: int | None = None  # arm index holding the object
        self.goal = np.zeros(self.spec.goal_dim)
        self.reset()

    @property
    def spec(self) -> TaskSpec:
        return self.task_spec()

    def task_spec(self, expected_steps: int | None = None) -> TaskSpec:
        raise NotImplementedError

    # -- per-task layout -------------------------------------------------------

    def _sample_start(self, rng: Pcg32) -> None:
        raise NotImplementedError

    def _achieved(self) -> np.ndarray:
        raise NotImplementedError

    def _observation_vector(self) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self) -> np.ndarray:
        raise NotImplementedError

    # -- shared mechanics --------------------------------------------------------

    def _success(self) -> bool:
        a = self._achieved()
        if self.n_arms == 2:
            d = max(
                float(np.linalg.norm(a[0:3] - self.goal[0:3])),
                float(np.linalg.norm(a[3:6] - self.goal[3:6])),
            )
        else:
            d = float(np.linalg.norm(a - self.goal))
        return d < self.spec.success_threshold

    def _observe(self, clipped: bool = False) -> EnvObservation:
        return EnvObservation(
            vector=self._observation_vector(),
            achieved_goal=self._achieved().copy(),
            success=self._success(),
            clipped=clipped,
        )

    def reset(self, seed: int | None = None) -> EnvObservation:
        """Seeded start; omitted seed draws the env's next auto substream."""
        if seed is None:
            seed = derive_seed(self._base_seed, self._reset_index)
            self._reset_index += 1
        rng = Pcg32(seed)
        self.step_count = 0
        self.gripper_closed[:] = False
        self.attached_to = None
        self._sample_start(rng)
        return self._observe()

    def step(self, action) -> EnvObservation:
        spec = self.spec
        if self.step_count >= spec.max_episode_steps:
            raise EpisodeOverrunError(
                f"episode already ran {spec.max_episode_steps} steps"
            )
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (spec.act_dim,):
            raise ValueError(
                f"action shape {action.shape} != ({spec.act_dim},) for {self.name}"
            )
        clipped = bool(np.any(np.abs(action) > 1.0))
        action = np.clip(action, -1.0, 1.0)
        for arm in range(self.n_arms):
            move = action[4 * arm : 4 * arm + 3]
            self.ee[arm] = _clamp_workspace(self.ee[arm] + STEP_SIZE * move)
            close_cmd = action[4 * arm + 3] < 0.0
            if close_cmd:
                self.gripper_closed[arm] = True
                if (
                    self.has_object
                    and self.attached_to is None
                    and float(np.linalg.norm(self.ee[arm] - self.object_pos))
                    <= ATTACH_RADIUS
                ):
                    self.attached_to = arm
            else:
                self.gripper_closed[arm] = False
                if self.attached_to == arm:
                    self.attached_to = None
        if self.has_object and self.attached_to is not None:
            self.object_pos = self.ee[self.attached_to].copy()
        self.step_count += 1
        return self._observe(clipped=clipped)

    def _gripper_flags(self) -> np.ndarray:
        return np.where(self.gripper_closed, GRIPPER_CLOSED, GRIPPER_OPEN)

    @staticmethod
    def _reach_move(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        return np.clip((dst - src) / STEP_SIZE, -1.0, 1.0)


class ReachEnv(KinematicEnv):
    name = "reach3d"
    n_arms = 1

    def task_spec(self, expected_steps: int | None = None) -> TaskSpec:
        return TaskSpec(
            task_id=self.name,
            obs_dim=4,
            goal_dim=3,
            act_dim=4,
            max_episode_steps=50,
            expected_steps=expected_steps or 50,
            success_threshold=SUCCESS_THRESHOLD,
        )

    def _sample_start(self, rng: Pcg32) -> None:
        self.ee[0] = _sample_point(rng)
        self.goal = _sample_separated(rng, self.ee[0])

    def _achieved(self) -> np.ndarray:
        return self.ee[0]

    def _observation_vector(self) -> np.ndarray:
        return np.concatenate([self.ee[0], self._gripper_flags()])

    def expert_action(self) -> np.ndarray:
        return np.concatenate([self._reach_move(self.ee[0], self.goal), [0.0]])


class PickPlaceEnv(KinematicEnv):
    name = "pickplace3d"
    n_arms = 1
    has_object = True

    def task_spec(self, expected_steps: int | None = None) -> TaskSpec:
        return TaskSpec(
            task_id=self.name,
            obs_dim=10,
            goal_dim=3,
            act_dim=4,
            max_episode_steps=60,
            expected_steps=expected_steps or 60,
            success_threshold=SUCCESS_THRESHOLD,
        )

    def _sample_start(self, rng: Pcg32) -> None:
        self.ee[0] = _sample_point(rng)
        self.object_pos = _sample_point(rng)
        self.goal = _sample_separated(rng, self.object_pos)

    def _achieved(self) -> np.ndarray:
        return self.object_pos

    def _observation_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.ee[0],
                self._gripper_flags(),
                self.object_pos,
                self.object_pos - self.ee[0],
            ]
        )

    def expert_action(self) -> np.ndarray:
        """Phased controller: hover above the object, descend, grasp, carry,
        release once the object sits at the goal."""
        ee = self.ee[0]
        if self.attached_to is None:
            d_obj = float(np.linalg.norm(ee - self.object_pos))
            if d_obj <= ATTACH_RADIUS:
                return np.array([0.0, 0.0, 0.0, -1.0])  # grasp in place
            hover = _clamp_workspace(self.object_pos + np.array([0, 0, HOVER_HEIGHT]))
            lateral = float(np.linalg.norm(ee[:2] - self.object_pos[:2]))
            if lateral > STEP_SIZE and float(np.linalg.norm(ee - hover)) > SUCCESS_THRESHOLD:
                return np.concatenate([self._reach_move(ee, hover), [0.0]])
            return np.concatenate([self._reach_move(ee, self.object_pos), [0.0]])
        if float(np.linalg.norm(self.object_pos - self.goal)) >= SUCCESS_THRESHOLD:
            return np.concatenate([self._reach_move(ee, self.goal), [-1.0]])
        return np.array([0.0, 0.0, 0.0, 1.0])  # release


class BiReachEnv(KinematicEnv):
    name = "bireach3d"
    n_arms = 2

    def task_spec(self, expected_steps: int | None = None) -> TaskSpec:
        return TaskSpec(
            task_id=self.name,
            obs_dim=8,
            goal_dim=6,
            act_dim=8,
            max_episode_steps=50,
            expected_steps=expected_steps or 50,
            success_threshold=SUCCESS_THRESHOLD,
        )

    def _sample_start(self, rng: Pcg32) -> None:
        self.ee[0] = _sample_point(rng)
        self.ee[1] = _sample_point(rng)
        g0 = _sample_separated(rng, self.ee[0])
        g1 = _sample_separated(rng, self.ee[1])
        self.goal = np.concatenate([g0, g1])

    def _achieved(self) -> np.ndarray:
        return np.concatenate([self.ee[0], self.ee[1]])

    def _observation_vector(self) -> np.ndarray:
        flags = self._gripper_flags()
        return np.concatenate([self.ee[0], [flags[0]], self.ee[1], [flags[1]]])

    def expert_action(self) -> np.ndarray:
        return np.concatenate(
            [
                self._reach_move(self.ee[0], self.goal[0:3]),
                [0.0],
                self._reach_move(self.ee[1], self.goal[3:6]),
                [0.0],
            ]
        )


_ENV_CLASSES = {cls.name: cls for cls in (ReachEnv, PickPlaceEnv, BiReachEnv)}


def make_env(name: str, seed: int = 0) -> KinematicEnv:
    cls = _ENV_CLASSES.get(name)
    if cls is None:
        raise UnknownEnvError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    return cls(seed=seed)


def rollout_expert(env: KinematicEnv, reset_seed: int):
    """Run the scripted expert for one episode.

    Returns (trajectory | None, steps); None when the episode failed.
    """
    obs = env.reset(reset_seed)
    spec = env.spec
    observations, actions, achieved = [], [], []
    goal = env.goal.copy()
    for _ in range(spec.max_episode_steps):
        action = env.expert_action()
        observations.append(obs.vector)
        actions.append(action)
        obs = env.step(action)
        achieved.append(obs.achieved_goal)
        if obs.success:
            traj = Trajectory(
                task_id=env.name,
                observations=np.array(observations),
                actions=np.array(actions),
                goal=goal,
                achieved_goals=np.array(achieved),
            )
            return traj, len(actions)
    return None, spec.max_episode_steps


def generate_demos(env_name: str, episodes: int, seed: int, out_path) -> dict:
    """Roll the expert and write a dataset file plus its TaskSpec sidecar.

    Only successful episodes are written; failures are re-drawn with
    incremented reset-seed indices and counted in the returned report.
    The stored expected_steps is the ceiling of the mean demo length.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = make_env(env_name, seed)
    trajectories: list[Trajectory] = []
    attempts = 0
    failures = 0
    while len(trajectories) < episodes:
        traj, _ = rollout_expert(env, derive_seed(seed, attempts))
        attempts += 1
        if traj is None:
            failures += 1
            continue
        trajectories.append(traj)
    lengths = [t.length for t in trajectories]
    expected = math.ceil(float(np.mean(lengths)))
    spec = env.task_spec(expected_steps=expected)
    dataset = Dataset(trajectories, {env_name: spec})
    save_dataset(dataset, out_path)
    return {
        "env": env_name,
        "episodes": episodes,
        "attempts": attempts,
        "failures": failures,
        "mean_length": float(np.mean(lengths)),
        "min_length": int(min(lengths)),
        "max_length": int(max(lengths)),
        "expected_steps": expected,
    }
