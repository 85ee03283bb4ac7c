"""Training orchestration: cross-task pretraining and single-task finetuning.

Configs are flat key=value text files ('#' starts a comment). Unknown keys
are hard errors — silent typos in training configs are costly. Finetune
mode targets exactly one task and forces the loss weights to the action
objective only.

The training log is JSON Lines: one meta line (parameter count, resolved
config), one line per step with the per-objective losses, and optional
periodic evaluation lines. Logs are deterministic per (seed, config,
platform) except for the wall-time fields.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .checkpoint import ModelBundle, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    NormStats,
    compute_norm_stats,
    hindsight_relabel,
    load_dataset,
)
from .envs import ENV_NAMES
from .model import GoalConditionedTransformer, ModelConfig
from .objectives import LossWeights, pretraining_step
from .optim import AdamW
from .rng import Pcg32
from .rollout import evaluate


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "pretrain"  # pretrain | finetune
    tasks: list[str] = field(default_factory=list)
    data: dict[str, str] = field(default_factory=dict)  # task -> dataset path
    steps: int = 1000
    batch_size: int = 64
    max_window: int = 100  # K, in timesteps
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 128
    dropout: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 1.0
    warmup_steps: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mask_ratio: float = 0.15
    seed: int = 0
    augment: bool = True
    eval_every: int = 0
    eval_episodes: int = 20
    checkpoint_out: str = "model.gcdt"
    log_out: str | None = None

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ConfigError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.mode == "finetune":
            if len(self.tasks) != 1:
                raise ConfigError("finetune mode requires exactly one task")
            self.weights = LossWeights.action_only()
        if not self.tasks:
            raise ConfigError("at least one task is required")
        for t in self.tasks:
            if t not in self.data:
                raise ConfigError(f"missing dataset path for task {t!r} (data.{t}=...)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            max_timesteps=self.max_window,
            dropout=self.dropout,
        )

    def to_json(self) -> dict:
        out = {
            "mode": self.mode,
            "tasks": self.tasks,
            "data": self.data,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "max_window": self.max_window,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "dropout": self.dropout,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "grad_clip": self.grad_clip,
            "warmup_steps": self.warmup_steps,
            "weights": {
                "action": self.weights.action,
                "dynamics": self.weights.dynamics,
                "time_to_goal": self.weights.time_to_goal,
                "reconstruction": self.weights.reconstruction,
            },
            "mask_ratio": self.mask_ratio,
            "seed": self.seed,
            "augment": self.augment,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "checkpoint_out": self.checkpoint_out,
            "log_out": self.log_out,
        }
        return out


_INT_KEYS = {
    "steps", "batch_size", "max_window", "n_layers", "n_heads", "d_model",
    "warmup_steps", "seed", "eval_every", "eval_episodes",
}
_FLOAT_KEYS = {
    "dropout", "lr", "weight_decay", "beta1", "beta2", "epsilon", "grad_clip",
    "mask_ratio",
}
_STR_KEYS = {"mode", "checkpoint_out", "log_out"}
_BOOL_KEYS = {"augment"}
_WEIGHT_KEYS = {
    "weight.action": "action",
    "weight.dynamics": "dynamics",
    "weight.time_to_goal": "time_to_goal",
    "weight.reconstruction": "reconstruction",
}


def parse_config(path) -> TrainConfig:
    """Parse a flat key=value config file; errors cite key and line."""
    values: dict[str, object] = {}
    weights = {}
    data = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            try:
                if key in _INT_KEYS:
                    values[key] = int(val)
                elif key in _FLOAT_KEYS:
                    values[key] = float(val)
                elif key in _STR_KEYS:
                    values[key] = val
                elif key in _BOOL_KEYS:
                    if val.lower() not in ("true", "false"):
                        raise ValueError("expected true or false")
                    values[key] = val.lower() == "true"
                elif key == "tasks":
                    values[key] = [t.strip() for t in val.split(",") if t.strip()]
                elif key in _WEIGHT_KEYS:
                    weights[_WEIGHT_KEYS[key]] = float(val)
                elif key.startswith("data."):
                    data[key[5:]] = val
                else:
                    raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    if weights:
        values["weights"] = LossWeights(**{**LossWeights().__dict__, **weights})
    if data:
        values["data"] = data
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


class TrainLog:
    """Append-only JSON-Lines writer; None path keeps records in memory only."""

    def __init__(self, path: str | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, separators=(",", ":")) + "\n")


def _load_training_dataset(path: str, augment: bool) -> Dataset:
    ds = load_dataset(path)
    if augment:
        if any(t.provenance != "original" for t in ds.trajectories):
            raise ValueError(
                f"{path} already contains relabeled trajectories; "
                "set augment=false or pass the raw expert file"
            )
        ds = hindsight_relabel(ds)
    return ds


def _lr_scale(step: int, warmup: int) -> float:
    if warmup <= 0:
        return 1.0
    return min(1.0, step / warmup)


def _maybe_eval(
    config: TrainConfig,
    model: GoalConditionedTransformer,
    stats: dict[str, NormStats],
    step: int,
    log: TrainLog,
) -> None:
    if config.eval_every <= 0 or step % config.eval_every != 0:
        return
    bundle = ModelBundle(model=model, norm_stats=stats)
    for task in config.tasks:
        if task not in ENV_NAMES:
            continue
        report = evaluate(
            task, bundle, episodes=config.eval_episodes, seeds=[config.seed]
        )
        log.write(
            {
                "type": "eval",
                "step": step,
                "env": task,
                "rate": report.per_seed_rates[0],
            }
        )


def _run_training(
    config: TrainConfig,
    model: GoalConditionedTransformer,
    datasets: dict[str, Dataset],
    stats: dict[str, NormStats],
    trainable: dict[str, object],
) -> TrainLog:
    optimizer = AdamW(
        trainable,
        lr=config.lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
    )
    master = Pcg32(config.seed)
    sample_rng = master.spawn(1)
    drop_rng = master.spawn(2)
    log = TrainLog(config.log_out)
    log.write(
        {
            "type": "meta",
            "parameter_count": model.parameter_count(),
            "config": config.to_json(),
        }
    )
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        losses = pretraining_step(
            model,
            datasets,
            stats,
            optimizer,
            sample_rng,
            drop_rng,
            config.weights,
            config.batch_size,
            config.max_window,
            mask_ratio=config.mask_ratio,
            grad_clip=config.grad_clip,
            lr_scale=_lr_scale(step, config.warmup_steps),
        )
        log.write(
            {
                "type": "step",
                "step": step,
                "losses": {k.value: v for k, v in losses.items()},
                "wall_time_s": round(time.perf_counter() - t0, 6),
            }
        )
        _maybe_eval(config, model, stats, step, log)
    return log


def pretrain(config: TrainConfig) -> tuple[ModelBundle, TrainLog]:
    """Multi-task multi-objective pretraining; saves backbone + all adapters."""
    datasets = {
        t: _load_training_dataset(config.data[t], config.augment)
        for t in config.tasks
    }
    specs = {}
    stats = {}
    for t, ds in datasets.items():
        if t not in ds.specs:
            raise ConfigError(f"dataset for {t!r} has no TaskSpec sidecar entry")
        specs[t] = ds.specs[t]
        stats[t] = compute_norm_stats(ds, t)
    model = GoalConditionedTransformer(
        config.model_config(), specs, init_seed=config.seed
    )
    log = _run_training(config, model, datasets, stats, model.parameters())
    save_checkpoint(model, stats, config.checkpoint_out)
    return ModelBundle(model=model, norm_stats=stats), log


def finetune(
    config: TrainConfig, init_checkpoint: str | None = None
) -> tuple[ModelBundle, TrainLog]:
    """Single-task action-only training, optionally from a pretrained model.

    Adapters for other tasks found in the init checkpoint stay in memory but
    receive no updates and are dropped from the saved result. Norm stats for
    the target task are kept from the checkpoint when present (the backbone
    was trained against them); otherwise computed from the finetune data.
    """
    task = config.tasks[0]
    dataset = _load_training_dataset(config.data[task], config.augment)
    if task not in dataset.specs:
        raise ConfigError(f"dataset for {task!r} has no TaskSpec sidecar entry")
    spec = dataset.specs[task]
    fresh_adapters = []
    if init_checkpoint is not None:
        # architecture comes from the checkpoint; config's model keys are
        # ignored, and the sampling window is clamped to its capacity
        bundle = load_checkpoint(init_checkpoint)
        model = bundle.model
        config = replace(
            config,
            n_layers=model.config.n_layers,
            n_heads=model.config.n_heads,
            d_model=model.config.d_model,
            dropout=model.config.dropout,
            max_window=min(config.max_window, model.config.max_timesteps),
        )
        stats = dict(bundle.norm_stats)
        if task in model.task_specs:
            stored = model.task_specs[task]
            if (stored.obs_dim, stored.goal_dim, stored.act_dim) != (
                spec.obs_dim,
                spec.goal_dim,
                spec.act_dim,
            ):
                raise ConfigError(
                    f"task {task!r} dimensions in checkpoint conflict with dataset"
                )
        else:
            model.add_task(spec)
            fresh_adapters.append(task)
        if task not in stats:
            stats[task] = compute_norm_stats(dataset, task)
    else:
        model = GoalConditionedTransformer(
            config.model_config(), {task: spec}, init_seed=config.seed
        )
        stats = {task: compute_norm_stats(dataset, task)}
        fresh_adapters.append(task)
    trainable = dict(model.backbone_parameters())
    trainable.update(model.adapter_parameters(task))
    log = _run_training(config, model, {task: dataset}, {task: stats[task]}, trainable)
    log.write({"type": "finetune_summary", "fresh_adapters": fresh_adapters})
    save_checkpoint(model, stats, config.checkpoint_out, task_filter=[task])
    return (
        ModelBundle(model=model, norm_stats={task: stats[task]}),
        log,
    )
