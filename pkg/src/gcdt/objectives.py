"""Masked batch construction and the training losses.

Four pretraining objectives share one sequence geometry and differ only in
which input items are replaced by mask embeddings and which positions are
supervised:

  ActionPrediction        no input masks; targets every a_t
  ForwardDynamics         mask all time-to-goal and goal tokens; predict o_t
                          (t >= 2) from the a_{t-1} hidden state
  TimeToGoal              mask all time-to-goal tokens; predict the scalar
                          (t >= 2) from the a_{t-1} hidden state
  SequenceReconstruction  Bernoulli(ratio) mask per item position; rebuild
                          exactly the masked items at their own positions

All losses are mean squared error over the included target components.
A pretraining step runs one batch per objective in fixed round-robin order,
each on a task drawn proportionally to its training-set size, with one
optimizer update per batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Dataset, NormStats, sample_window
from .model import (
    ITEM_TYPES,
    GoalConditionedTransformer,
    SequenceBatch,
    batch_from_windows,
)
from .optim import AdamW, clip_grad_norm
from .rng import Pcg32
from .tensor import Tensor, record


class ObjectiveKind(Enum):
    ACTION_PREDICTION = "action"
    FORWARD_DYNAMICS = "dynamics"
    TIME_TO_GOAL = "time_to_goal"
    SEQUENCE_RECONSTRUCTION = "reconstruction"


PRETRAIN_ORDER = (
    ObjectiveKind.ACTION_PREDICTION,
    ObjectiveKind.FORWARD_DYNAMICS,
    ObjectiveKind.TIME_TO_GOAL,
    ObjectiveKind.SEQUENCE_RECONSTRUCTION,
)


@dataclass(frozen=True)
class LossWeights:
    action: float = 1.0
    dynamics: float = 1.0
    time_to_goal: float = 1.0
    reconstruction: float = 1.0

    def __post_init__(self):
        vals = (self.action, self.dynamics, self.time_to_goal, self.reconstruction)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def of(self, kind: ObjectiveKind) -> float:
        return getattr(self, kind.value)

    @classmethod
    def action_only(cls) -> "LossWeights":
        return cls(action=1.0, dynamics=0.0, time_to_goal=0.0, reconstruction=0.0)


@dataclass
class MaskPlan:
    """Input substitution flags plus loss inclusion flags, both (B, L) bool."""

    kind: ObjectiveKind
    input_masks: dict[str, np.ndarray]
    target_masks: dict[str, np.ndarray]


def build_mask_plan(
    kind: ObjectiveKind,
    lengths: np.ndarray,
    max_length: int,
    rng: Pcg32 | None = None,
    mask_ratio: float = 0.15,
) -> MaskPlan:
    """Construct the per-objective mask geometry for a padded batch."""
    b = lengths.shape[0]
    valid = np.arange(max_length)[None, :] < lengths[:, None]
    after_first = valid.copy()
    after_first[:, 0] = False
    all_on = np.ones((b, max_length), dtype=bool)
    if kind is ObjectiveKind.ACTION_PREDICTION:
        return MaskPlan(kind, {}, {"action": valid})
    if kind is ObjectiveKind.FORWARD_DYNAMICS:
        return MaskPlan(
            kind,
            {"time_to_goal": all_on, "goal": all_on.copy()},
            {"observation": after_first},
        )
    if kind is ObjectiveKind.TIME_TO_GOAL:
        return MaskPlan(kind, {"time_to_goal": all_on}, {"time_to_goal": after_first})
    if kind is ObjectiveKind.SEQUENCE_RECONSTRUCTION:
        if not 0.0 < mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
        if rng is None:
            raise ValueError("sequence reconstruction needs an rng for mask draws")
        masks = {
            item: rng.bernoulli(mask_ratio, (b, max_length)) & valid
            for item in ITEM_TYPES
        }
        return MaskPlan(kind, masks, {k: v.copy() for k, v in masks.items()})
    raise ValueError(f"unknown objective kind {kind!r}")


def build_batch(
    dataset: Dataset,
    rng: Pcg32,
    kind: ObjectiveKind,
    batch_size: int,
    max_timesteps: int,
    stats: NormStats,
    mask_ratio: float = 0.15,
) -> tuple[SequenceBatch, MaskPlan]:
    """Sample windows, pad, normalize, and attach the objective's mask plan."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    windows = [sample_window(dataset, rng, max_timesteps) for _ in range(batch_size)]
    batch = batch_from_windows(windows, stats)
    plan = build_mask_plan(
        kind, batch.lengths, batch.max_length, rng=rng, mask_ratio=mask_ratio
    )
    return batch, plan


def masked_error_parts(
    preds: Tensor, targets: np.ndarray, mask: np.ndarray
) -> tuple[Tensor | None, int]:
    """(sum of squared errors over included components, component count)."""
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target {targets.shape}")
    if mask.shape != preds.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} incompatible with {preds.shape}")
    count = int(mask.sum()) * preds.shape[-1]
    if count == 0:
        return None, 0
    diff = preds - Tensor(targets.astype(np.float32))
    sq = diff * diff
    masked = sq * Tensor(mask[:, :, None].astype(np.float32))
    return masked.sum(), count


def compute_loss(preds: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """MSE over included target components only; empty mask -> exactly 0."""
    total, count = masked_error_parts(preds, targets, mask)
    if total is None:
        return Tensor(np.float32(0.0))
    return total / count


def objective_loss(
    model: GoalConditionedTransformer,
    batch: SequenceBatch,
    plan: MaskPlan,
    train: bool = False,
    rng: Pcg32 | None = None,
) -> Tensor:
    """Embed, run the backbone, and score the plan's targets."""
    seq = model.embed_sequence(batch, plan.input_masks, train=train, rng=rng)
    hidden = model.backbone_forward(seq, train=train, rng=rng)
    l = batch.max_length
    kind = plan.kind
    if kind is ObjectiveKind.ACTION_PREDICTION:
        preds = model.apply_head(batch.task_id, "action", hidden[:, 2::4, :])
        return compute_loss(preds, batch.actions_raw, plan.target_masks["action"])
    if kind is ObjectiveKind.FORWARD_DYNAMICS:
        if l < 2:
            return Tensor(np.float32(0.0))
        read = hidden[:, 3::4, :][:, : l - 1, :]
        preds = model.apply_head(batch.task_id, "observation", read)
        return compute_loss(
            preds, batch.observations[:, 1:], plan.target_masks["observation"][:, 1:]
        )
    if kind is ObjectiveKind.TIME_TO_GOAL:
        if l < 2:
            return Tensor(np.float32(0.0))
        read = hidden[:, 3::4, :][:, : l - 1, :]
        preds = model.apply_head(batch.task_id, "time_to_goal", read)
        return compute_loss(
            preds,
            batch.time_to_goal[:, 1:, None],
            plan.target_masks["time_to_goal"][:, 1:],
        )
    if kind is ObjectiveKind.SEQUENCE_RECONSTRUCTION:
        item_targets = {
            "time_to_goal": batch.time_to_goal[:, :, None],
            "goal": batch.goal,
            "observation": batch.observations,
            "action": batch.actions_raw,
        }
        total = None
        count = 0
        for offset, item in enumerate(ITEM_TYPES):
            mask = plan.target_masks.get(item)
            if mask is None or not mask.any():
                continue
            preds = model.apply_head(batch.task_id, item, hidden[:, offset::4, :])
            part, n = masked_error_parts(preds, item_targets[item], mask)
            if part is None:
                continue
            total = part if total is None else total + part
            count += n
        if total is None:
            return Tensor(np.float32(0.0))
        return total / count
    raise ValueError(f"unknown objective kind {kind!r}")


def sample_task(rng: Pcg32, sizes: dict[str, int]) -> str:
    """Draw a task id with probability proportional to its dataset size."""
    names = list(sizes)
    weights = np.array([sizes[n] for n in names], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("all datasets are empty")
    cum = np.cumsum(weights / weights.sum())
    return names[int(np.searchsorted(cum, rng.uniform(), side="right").clip(0, len(names) - 1))]


def pretraining_step(
    model: GoalConditionedTransformer,
    datasets: dict[str, Dataset],
    stats: dict[str, NormStats],
    optimizer: AdamW,
    rng: Pcg32,
    drop_rng: Pcg32 | None,
    weights: LossWeights,
    batch_size: int,
    max_timesteps: int,
    mask_ratio: float = 0.15,
    grad_clip: float = 1.0,
    lr_scale: float = 1.0,
    train: bool = True,
) -> dict[ObjectiveKind, float]:
    """One cycle: a batch per objective, round-robin, one update per batch.

    Objectives with zero weight are skipped entirely (no data or mask draws).
    Returned values are the raw (unweighted) per-objective MSEs.
    """
    if not datasets:
        raise ValueError("no datasets registered")
    sizes = {k: len(d) for k, d in datasets.items()}
    losses: dict[ObjectiveKind, float] = {}
    for kind in PRETRAIN_ORDER:
        w = weights.of(kind)
        if w == 0.0:
            continue
        task = sample_task(rng, sizes)
        batch, plan = build_batch(
            datasets[task], rng, kind, batch_size, max_timesteps, stats[task], mask_ratio
        )
        with record() as tape:
            loss = objective_loss(model, batch, plan, train=train, rng=drop_rng)
            weighted = loss * w if w != 1.0 else loss
        grads = tape.gradients(weighted, optimizer.params)
        if grad_clip > 0:
            clip_grad_norm(grads, grad_clip)
        optimizer.step(grads, lr_scale=lr_scale)
        losses[kind] = float(loss.data)
    return losses
