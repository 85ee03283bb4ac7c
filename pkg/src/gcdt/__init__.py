"""Goal-conditioned decision transformer toolkit.

A self-contained stack for goal-reaching control from demonstrations:
a numpy tensor core with reverse-mode autodiff and AdamW, a four-token
sequence model with a causal GPT backbone and per-task adapters, hindsight
goal relabeling, multi-objective cross-task pretraining, deterministic
kinematic environments with scripted experts, and success-rate evaluation.
"""

from .checkpoint import (
    CheckpointError,
    ModelBundle,
    load_checkpoint,
    parameter_count_formula,
    read_header,
    save_checkpoint,
)
from .data import (
    Dataset,
    DatasetError,
    NormStats,
    TaskSpec,
    Trajectory,
    Window,
    compute_norm_stats,
    full_window,
    hindsight_relabel,
    load_dataset,
    sample_window,
    save_dataset,
    sidecar_path,
)
from .envs import (
    ENV_NAMES,
    EnvObservation,
    KinematicEnv,
    generate_demos,
    make_env,
    rollout_expert,
)
from .model import (
    ITEM_TYPES,
    GoalConditionedTransformer,
    ModelConfig,
    SequenceBatch,
    TokenSequence,
    batch_from_windows,
    predict_action,
    predict_observation,
    predict_time_to_goal,
)
from .objectives import (
    LossWeights,
    MaskPlan,
    ObjectiveKind,
    build_batch,
    build_mask_plan,
    compute_loss,
    objective_loss,
    pretraining_step,
)
from .optim import AdamW, NonFiniteGradientError, clip_grad_norm
from .rng import Pcg32, derive_seed, mix64
from .rollout import (
    EvalReport,
    HistoryCache,
    estimate_time_to_goal,
    evaluate,
    rollout_episode,
)
from .tensor import ShapeMismatchError, Tape, Tensor, record
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainLog,
    finetune,
    parse_config,
    pretrain,
)

__version__ = "0.1.0"
