"""Trajectory data model, dataset file IO, hindsight relabeling, and windowing.

Dataset files are UTF-8 JSON Lines, one trajectory per line with keys
exactly: "task", "obs", "act", "goal", "achieved" (plus "provenance" once a
file has been augmented). A sidecar "<name>.tasks.json" holds the TaskSpec
records keyed by task id.

Conventions:
  - observations[t] is the state BEFORE executing actions[t];
    achieved_goals[t] is the achieved goal AFTER executing actions[t].
  - the derived time-to-goal at (1-based) timestep t of a length-T
    trajectory is T - t + 1: actions remaining, inclusive, never 0.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Pcg32

STD_FLOOR = 1e-6

_LINE_KEYS = {"task", "obs", "act", "goal", "achieved"}
_PROVENANCE_VALUES = ("original", "relabeled")


class DatasetError(ValueError):
    """Invalid dataset content; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class TaskSpec:
    """Dimensional and episodic metadata for one task."""

    task_id: str
    obs_dim: int
    goal_dim: int
    act_dim: int
    max_episode_steps: int
    expected_steps: int
    success_threshold: float

    def __post_init__(self):
        for name in ("obs_dim", "goal_dim", "act_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if not 1 <= self.expected_steps <= self.max_episode_steps:
            raise ValueError(
                f"expected_steps must be in [1, max_episode_steps], got "
                f"{self.expected_steps} vs {self.max_episode_steps}"
            )

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "obs_dim": self.obs_dim,
            "goal_dim": self.goal_dim,
            "act_dim": self.act_dim,
            "max_episode_steps": self.max_episode_steps,
            "expected_steps": self.expected_steps,
            "success_threshold": self.success_threshold,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        return cls(**obj)


@dataclass
class Trajectory:
    """One demonstration episode; per-timestep arrays all share length T."""

    task_id: str
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, act_dim), components in [-1, 1]
    goal: np.ndarray  # (goal_dim,), constant over the episode
    achieved_goals: np.ndarray  # (T, goal_dim), post-action
    provenance: str = "original"

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        self.achieved_goals = np.asarray(self.achieved_goals, dtype=np.float64)

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    def time_to_goal(self) -> np.ndarray:
        """[T, T-1, ..., 1] — actions remaining at each timestep, inclusive."""
        return np.arange(self.length, 0, -1, dtype=np.float64)

    def validate(self, spec: TaskSpec, line: int | None = None) -> None:
        t = self.length
        if t < 1:
            raise DatasetError("trajectory must have at least one timestep", line)
        if self.provenance not in _PROVENANCE_VALUES:
            raise DatasetError(f"unknown provenance {self.provenance!r}", line)
        checks = (
            ("obs", self.observations, (t, spec.obs_dim)),
            ("act", self.actions, (t, spec.act_dim)),
            ("goal", self.goal, (spec.goal_dim,)),
            ("achieved", self.achieved_goals, (t, spec.goal_dim)),
        )
        for name, arr, want in checks:
            if arr.shape != want:
                raise DatasetError(
                    f"{name} has shape {arr.shape}, expected {want} for task "
                    f"{spec.task_id!r}",
                    line,
                )
        if not np.all(np.isfinite(self.observations)) or not np.all(
            np.isfinite(self.actions)
        ):
            raise DatasetError("non-finite values in trajectory", line)
        if np.any(np.abs(self.actions) > 1.0):
            raise DatasetError("action components must lie in [-1, 1]", line)


@dataclass
class Dataset:
    """Immutable-after-load collection of trajectories plus their TaskSpecs."""

    trajectories: list[Trajectory] = field(default_factory=list)
    specs: dict[str, TaskSpec] = field(default_factory=dict)
    _cumlen: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.trajectories)

    def originals(self) -> list[Trajectory]:
        return [t for t in self.trajectories if t.provenance == "original"]

    def relabeled(self) -> list[Trajectory]:
        return [t for t in self.trajectories if t.provenance == "relabeled"]

    def task_ids(self) -> list[str]:
        seen = dict.fromkeys(t.task_id for t in self.trajectories)
        return list(seen)

    def total_timesteps(self) -> int:
        return sum(t.length for t in self.trajectories)

    def cumulative_lengths(self) -> np.ndarray:
        if self._cumlen is None or self._cumlen.size != len(self.trajectories):
            self._cumlen = np.cumsum([t.length for t in self.trajectories])
        return self._cumlen


def sidecar_path(path) -> Path:
    """TaskSpec sidecar for a dataset file: d.jsonl -> d.tasks.json."""
    p = Path(path)
    return p.with_suffix(".tasks.json") if p.suffix else p.with_name(p.name + ".tasks.json")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path, specs: dict[str, TaskSpec] | None = None) -> Dataset:
    """Read a JSON-Lines dataset, validating every line against its TaskSpec.

    Specs come from the sidecar file unless passed explicitly. Errors cite
    the offending 1-based line number.
    """
    path = Path(path)
    if specs is None:
        sc = sidecar_path(path)
        specs = load_task_specs(sc) if sc.exists() else {}
    trajectories = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise DatasetError(f"malformed JSON ({e.msg})", lineno) from e
            if not isinstance(obj, dict):
                raise DatasetError("each line must be a JSON object", lineno)
            keys = set(obj)
            extra = keys - _LINE_KEYS - {"provenance"}
            missing = _LINE_KEYS - keys
            if extra or missing:
                raise DatasetError(
                    f"bad keys: missing {sorted(missing)}, unexpected {sorted(extra)}",
                    lineno,
                )
            task_id = obj["task"]
            spec = specs.get(task_id)
            if spec is None:
                raise DatasetError(f"unknown task_id {task_id!r}", lineno)
            try:
                traj = Trajectory(
                    task_id=task_id,
                    observations=obj["obs"],
                    actions=obj["act"],
                    goal=obj["goal"],
                    achieved_goals=obj["achieved"],
                    provenance=obj.get("provenance", "original"),
                )
            except (TypeError, ValueError) as e:
                raise DatasetError(f"bad array content: {e}", lineno) from e
            traj.validate(spec, line=lineno)
            trajectories.append(traj)
    return Dataset(trajectories, dict(specs))


def save_dataset(dataset: Dataset, path) -> None:
    """Write JSON Lines plus the TaskSpec sidecar; both written atomically.

    The "provenance" key is emitted only for augmented datasets (any
    relabeled trajectory present), so expert dumps keep the base schema.
    """
    path = Path(path)
    augmented = any(t.provenance == "relabeled" for t in dataset.trajectories)
    lines = []
    for t in dataset.trajectories:
        obj = {
            "task": t.task_id,
            "obs": t.observations.tolist(),
            "act": t.actions.tolist(),
            "goal": t.goal.tolist(),
            "achieved": t.achieved_goals.tolist(),
        }
        if augmented:
            obj["provenance"] = t.provenance
        lines.append(json.dumps(obj, separators=(",", ":")))
    _atomic_write(path, "".join(line + "\n" for line in lines))
    save_task_specs(dataset.specs, sidecar_path(path))


def load_task_specs(path) -> dict[str, TaskSpec]:
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    return {k: TaskSpec.from_json(v) for k, v in obj.items()}


def save_task_specs(specs: dict[str, TaskSpec], path) -> None:
    obj = {k: specs[k].to_json() for k in sorted(specs)}
    _atomic_write(Path(path), json.dumps(obj, indent=2) + "\n")


# -- hindsight relabeling ------------------------------------------------------


def hindsight_relabel(dataset: Dataset) -> Dataset:
    """Augment: for each original trajectory and every truncation timestep t,
    emit the first t steps with the goal replaced by the goal achieved at t.

    Output is originals followed by all relabeled instances, so
    |output| = N + sum of lengths. Input must contain only originals.
    """
    if any(t.provenance != "original" for t in dataset.trajectories):
        raise ValueError("hindsight_relabel expects an un-augmented dataset")
    out = list(dataset.trajectories)
    for traj in dataset.trajectories:
        for t in range(1, traj.length + 1):
            out.append(
                Trajectory(
                    task_id=traj.task_id,
                    observations=traj.observations[:t].copy(),
                    actions=traj.actions[:t].copy(),
                    goal=traj.achieved_goals[t - 1].copy(),
                    achieved_goals=traj.achieved_goals[:t].copy(),
                    provenance="relabeled",
                )
            )
    return Dataset(out, dict(dataset.specs))


# -- normalization -------------------------------------------------------------


@dataclass
class NormStats:
    """Per-task normalization: z-score for obs/goal/action inputs, and the
    time-to-goal scale (max_episode_steps). Stds are floored at 1e-6."""

    task_id: str
    obs_mean: np.ndarray
    obs_std: np.ndarray
    goal_mean: np.ndarray
    goal_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    tto_scale: float

    def normalize_obs(self, x):
        return (np.asarray(x, dtype=np.float64) - self.obs_mean) / self.obs_std

    def normalize_goal(self, x):
        return (np.asarray(x, dtype=np.float64) - self.goal_mean) / self.goal_std

    def normalize_act(self, x):
        return (np.asarray(x, dtype=np.float64) - self.act_mean) / self.act_std

    def normalize_tto(self, x):
        return np.asarray(x, dtype=np.float64) / self.tto_scale

    def denormalize_obs(self, x):
        return np.asarray(x, dtype=np.float64) * self.obs_std + self.obs_mean

    def denormalize_goal(self, x):
        return np.asarray(x, dtype=np.float64) * self.goal_std + self.goal_mean

    def denormalize_act(self, x):
        return np.asarray(x, dtype=np.float64) * self.act_std + self.act_mean

    def denormalize_tto(self, x):
        return np.asarray(x, dtype=np.float64) * self.tto_scale

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "goal_mean": self.goal_mean.tolist(),
            "goal_std": self.goal_std.tolist(),
            "act_mean": self.act_mean.tolist(),
            "act_std": self.act_std.tolist(),
            "tto_scale": self.tto_scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        kw = {
            k: np.asarray(v, dtype=np.float64) if k.endswith(("_mean", "_std")) else v
            for k, v in obj.items()
        }
        return cls(**kw)


def compute_norm_stats(dataset: Dataset, task_id: str | None = None) -> NormStats:
    """Population mean/std over all timesteps of all trajectories of one task.

    Goals count once per timestep (constant within a trajectory), so longer
    episodes weigh their goals accordingly. Computed over the training
    dataset as given (normally post-augmentation).
    """
    if len(dataset) == 0:
        raise ValueError("cannot compute normalization stats on an empty dataset")
    tasks = dataset.task_ids()
    if task_id is None:
        if len(tasks) != 1:
            raise ValueError(f"dataset has tasks {tasks}; pass task_id explicitly")
        task_id = tasks[0]
    trajs = [t for t in dataset.trajectories if t.task_id == task_id]
    if not trajs:
        raise ValueError(f"no trajectories for task {task_id!r}")
    spec = dataset.specs.get(task_id)
    if spec is None:
        raise ValueError(f"no TaskSpec registered for task {task_id!r}")
    obs = np.concatenate([t.observations for t in trajs])
    act = np.concatenate([t.actions for t in trajs])
    goal = np.concatenate([np.tile(t.goal, (t.length, 1)) for t in trajs])

    def _stats(a):
        return a.mean(axis=0), np.maximum(a.std(axis=0), STD_FLOOR)

    om, os_ = _stats(obs)
    gm, gs = _stats(goal)
    am, as_ = _stats(act)
    return NormStats(
        task_id=task_id,
        obs_mean=om,
        obs_std=os_,
        goal_mean=gm,
        goal_std=gs,
        act_mean=am,
        act_std=as_,
        tto_scale=float(spec.max_episode_steps),
    )


# -- window sampling -----------------------------------------------------------


@dataclass
class Window:
    """Suffix-aligned slice of one trajectory ending at sampled timestep e.

    Timestep indices are absolute (1-based) within the source trajectory and
    time_to_goal is relative to the FULL trajectory: T - t + 1.
    """

    task_id: str
    timesteps: np.ndarray  # (L,) ints, consecutive, ending at e
    time_to_goal: np.ndarray  # (L,) floats, raw step counts
    goal: np.ndarray  # (goal_dim,)
    observations: np.ndarray  # (L, obs_dim)
    actions: np.ndarray  # (L, act_dim)

    @property
    def length(self) -> int:
        return self.timesteps.shape[0]


def sample_window(dataset: Dataset, rng: Pcg32, max_timesteps: int) -> Window:
    """Draw one window: trajectory weighted by length, end index uniform.

    Length weighting makes every (trajectory, end) pair — i.e. every
    timestep in the dataset — equally likely to be the window end. The
    window is the last min(max_timesteps, e) steps ending at e.
    """
    if max_timesteps < 1:
        raise ValueError("max_timesteps must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    cum = dataset.cumulative_lengths()
    flat = rng.randint(int(cum[-1]))
    tri = int(np.searchsorted(cum, flat, side="right"))
    traj = dataset.trajectories[tri]
    e = flat - (int(cum[tri - 1]) if tri > 0 else 0) + 1  # 1-based end index
    start = max(1, e - max_timesteps + 1)
    ts = np.arange(start, e + 1, dtype=np.int64)
    total = traj.length
    return Window(
        task_id=traj.task_id,
        timesteps=ts,
        time_to_goal=(total - ts + 1).astype(np.float64),
        goal=traj.goal.copy(),
        observations=traj.observations[start - 1 : e].copy(),
        actions=traj.actions[start - 1 : e].copy(),
    )


def full_window(traj: Trajectory) -> Window:
    """The whole trajectory as one window (used when overfitting/inspecting)."""
    ts = np.arange(1, traj.length + 1, dtype=np.int64)
    return Window(
        task_id=traj.task_id,
        timesteps=ts,
        time_to_goal=traj.time_to_goal(),
        goal=traj.goal.copy(),
        observations=traj.observations.copy(),
        actions=traj.actions.copy(),
    )
