"""Goal-conditioned decision transformer.

Each timestep contributes four tokens in fixed order — time-to-goal, goal,
observation, action — produced by per-task affine tokenizers followed by
layer normalization. Masked items are replaced by a learned per-item-type
mask vector before the (shared, learned) within-window timestep embedding
is added. A pre-layer-norm causal GPT backbone maps tokens to hidden
states; per-task affine heads decode predictions:

  action        read at the o_t token, tanh-squashed into (-1, 1)
  observation   read at the a_{t-1} token (so t >= 2), normalized units
  time-to-goal  read at the a_{t-1} token (so t >= 2), normalized units
  reconstruction reads each masked position at itself

The backbone is shared across tasks; tokenizers and heads are per task and
disjoint from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import NormStats, TaskSpec
from .rng import Pcg32, derive_seed, mix64
from .tensor import Tensor

ITEM_TYPES = ("time_to_goal", "goal", "observation", "action")
ITEM_OFFSET = {name: i for i, name in enumerate(ITEM_TYPES)}

_NEG_INF = float("-inf")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 128
    max_timesteps: int = 100  # window capacity K, in timesteps
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if min(self.n_layers, self.n_heads, self.d_model, self.max_timesteps) < 1:
            raise ValueError("all size fields must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def feedforward_width(self) -> int:
        return 4 * self.d_model

    @property
    def max_tokens(self) -> int:
        return 4 * self.max_timesteps

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "max_timesteps": self.max_timesteps,
            "dropout": self.dropout,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class SequenceBatch:
    """Padded batch of windows, already normalized for tokenization.

    actions_raw keeps the un-normalized [-1,1] actions: the action head is
    tanh-squashed and supervised in raw units, while action *inputs* are
    z-scored like everything else. Positions at t > lengths[b] are padding;
    causal attention guarantees they cannot influence real positions.
    """

    task_id: str
    lengths: np.ndarray  # (B,)
    time_to_goal: np.ndarray  # (B, L) normalized
    goal: np.ndarray  # (B, L, goal_dim) normalized
    observations: np.ndarray  # (B, L, obs_dim) normalized
    actions: np.ndarray  # (B, L, act_dim) normalized
    actions_raw: np.ndarray  # (B, L, act_dim)
    timesteps: np.ndarray  # (B, L) absolute 1-based indices (metadata)

    @property
    def batch_size(self) -> int:
        return self.time_to_goal.shape[0]

    @property
    def max_length(self) -> int:
        return self.time_to_goal.shape[1]

    def valid_mask(self) -> np.ndarray:
        return np.arange(self.max_length)[None, :] < self.lengths[:, None]


def batch_from_windows(windows, stats: NormStats) -> SequenceBatch:
    """Pad windows to a common length and normalize all inputs."""
    if not windows:
        raise ValueError("empty window list")
    task = windows[0].task_id
    if any(w.task_id != task for w in windows):
        raise ValueError("all windows in a batch must share one task")
    b = len(windows)
    lmax = max(w.length for w in windows)
    goal_dim = windows[0].goal.shape[0]
    obs_dim = windows[0].observations.shape[1]
    act_dim = windows[0].actions.shape[1]
    tto = np.zeros((b, lmax), dtype=np.float32)
    goal = np.zeros((b, lmax, goal_dim), dtype=np.float32)
    obs = np.zeros((b, lmax, obs_dim), dtype=np.float32)
    act = np.zeros((b, lmax, act_dim), dtype=np.float32)
    act_raw = np.zeros((b, lmax, act_dim), dtype=np.float32)
    steps = np.zeros((b, lmax), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, w in enumerate(windows):
        n = w.length
        lengths[i] = n
        tto[i, :n] = stats.normalize_tto(w.time_to_goal)
        goal[i, :n] = stats.normalize_goal(np.tile(w.goal, (n, 1)))
        obs[i, :n] = stats.normalize_obs(w.observations)
        act[i, :n] = stats.normalize_act(w.actions)
        act_raw[i, :n] = w.actions
        steps[i, :n] = w.timesteps
    return SequenceBatch(
        task_id=task,
        lengths=lengths,
        time_to_goal=tto,
        goal=goal,
        observations=obs,
        actions=act,
        actions_raw=act_raw,
        timesteps=steps,
    )


@dataclass
class TokenSequence:
    """Embedded token stream: four tokens per timestep, interleaved."""

    tokens: Tensor  # (B, n_tokens, d_model)
    lengths: np.ndarray  # (B,) timesteps per sample
    timestep_index: np.ndarray  # (n_tokens,) 0-based within-window position
    masked: np.ndarray  # (B, n_tokens) bool, True where a mask vector was substituted

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


def _string_seed(s: str) -> int:
    h = 0
    for byte in s.encode("utf-8"):
        h = mix64(h ^ byte)
    return h


def _trunc_normal(rng: Pcg32, shape, std: float) -> np.ndarray:
    """Normal(0, std) redrawn until within 2 std (applied pre-scaling)."""
    out = rng.normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


class GoalConditionedTransformer:
    """Shared backbone plus per-task adapters; parameters in a flat registry.

    Parameter names use the prefixes "backbone." and "adapter.<task>.".
    Construction order (and therefore the checkpoint manifest order) is
    deterministic: backbone first, then adapters in registration order.
    """

    def __init__(
        self,
        config: ModelConfig,
        task_specs: dict[str, TaskSpec],
        init_seed: int = 0,
    ):
        self.config = config
        self.task_specs: dict[str, TaskSpec] = {}
        self.init_seed = init_seed
        self.params: dict[str, Tensor] = {}
        self._init_backbone(Pcg32(derive_seed(init_seed, 0), stream=11))
        for spec in task_specs.values():
            self.add_task(spec)

    # -- parameter construction -------------------------------------------------

    def _add_param(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(data.astype(np.float32), requires_grad=True)

    def _init_backbone(self, rng: Pcg32) -> None:
        cfg = self.config
        d = cfg.d_model
        self._add_param(
            "backbone.timestep_emb", _trunc_normal(rng, (cfg.max_timesteps, d), 0.02)
        )
        for item in ITEM_TYPES:
            self._add_param(f"backbone.mask_emb.{item}", _trunc_normal(rng, (d,), 0.02))
        resid_std = 0.02 / np.sqrt(2.0 * cfg.n_layers)
        for i in range(cfg.n_layers):
            p = f"backbone.block{i}"
            self._add_param(f"{p}.ln1.gain", np.ones(d, dtype=np.float32))
            self._add_param(f"{p}.ln1.bias", np.zeros(d, dtype=np.float32))
            self._add_param(f"{p}.attn.w_qkv", _trunc_normal(rng, (d, 3 * d), 0.02))
            self._add_param(f"{p}.attn.b_qkv", np.zeros(3 * d, dtype=np.float32))
            self._add_param(f"{p}.attn.w_proj", _trunc_normal(rng, (d, d), resid_std))
            self._add_param(f"{p}.attn.b_proj", np.zeros(d, dtype=np.float32))
            self._add_param(f"{p}.ln2.gain", np.ones(d, dtype=np.float32))
            self._add_param(f"{p}.ln2.bias", np.zeros(d, dtype=np.float32))
            self._add_param(
                f"{p}.mlp.w_fc", _trunc_normal(rng, (d, cfg.feedforward_width), 0.02)
            )
            self._add_param(f"{p}.mlp.b_fc", np.zeros(cfg.feedforward_width, dtype=np.float32))
            self._add_param(
                f"{p}.mlp.w_proj", _trunc_normal(rng, (cfg.feedforward_width, d), resid_std)
            )
            self._add_param(f"{p}.mlp.b_proj", np.zeros(d, dtype=np.float32))
        self._add_param("backbone.ln_f.gain", np.ones(d, dtype=np.float32))
        self._add_param("backbone.ln_f.bias", np.zeros(d, dtype=np.float32))

    def add_task(self, spec: TaskSpec) -> None:
        """Register a task and create its tokenizers and prediction heads."""
        if spec.task_id in self.task_specs:
            raise ValueError(f"task {spec.task_id!r} already registered")
        rng = Pcg32(derive_seed(self.init_seed, 1 + _string_seed(spec.task_id) % (2**62)))
        d = self.config.d_model
        dims = self._item_dims(spec)
        p = f"adapter.{spec.task_id}"
        for item in ITEM_TYPES:
            k = dims[item]
            self._add_param(f"{p}.tok_{item}.w", _trunc_normal(rng, (k, d), 0.02))
            self._add_param(f"{p}.tok_{item}.b", np.zeros(d, dtype=np.float32))
            self._add_param(f"{p}.tok_{item}.ln_gain", np.ones(d, dtype=np.float32))
            self._add_param(f"{p}.tok_{item}.ln_bias", np.zeros(d, dtype=np.float32))
        for item in ITEM_TYPES:
            k = dims[item]
            self._add_param(f"{p}.head_{item}.w", _trunc_normal(rng, (d, k), 0.02))
            self._add_param(f"{p}.head_{item}.b", np.zeros(k, dtype=np.float32))
        self.task_specs[spec.task_id] = spec

    @staticmethod
    def _item_dims(spec: TaskSpec) -> dict[str, int]:
        return {
            "time_to_goal": 1,
            "goal": spec.goal_dim,
            "observation": spec.obs_dim,
            "action": spec.act_dim,
        }

    # -- registry views ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def backbone_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("backbone.")}

    def adapter_parameters(self, task_id: str) -> dict[str, Tensor]:
        prefix = f"adapter.{task_id}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _require_task(self, task_id: str) -> TaskSpec:
        spec = self.task_specs.get(task_id)
        if spec is None:
            raise KeyError(f"no adapters registered for task {task_id!r}")
        return spec

    # -- forward -------------------------------------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng: Pcg32 | None) -> Tensor:
        rate = self.config.dropout
        if not train or rate <= 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode forward needs a dropout rng")
        keep = (rng.uniform(x.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
        return T.mul(x, Tensor(keep))

    def _tokenize(self, task_id: str, item: str, values: Tensor) -> Tensor:
        p = f"adapter.{task_id}.tok_{item}"
        h = T.matmul(values, self._p(f"{p}.w")) + self._p(f"{p}.b")
        return T.layer_norm(h, self._p(f"{p}.ln_gain"), self._p(f"{p}.ln_bias"))

    def embed_sequence(
        self,
        batch: SequenceBatch,
        input_masks: dict[str, np.ndarray] | None = None,
        train: bool = False,
        rng: Pcg32 | None = None,
        drop_trailing_action: bool = False,
    ) -> TokenSequence:
        """Tokenize a batch into the interleaved (tto, g, o, a) stream.

        input_masks maps item type -> (B, L) bool; True positions are
        replaced by the item's learned mask vector (substitution happens
        before the timestep embedding is added). With drop_trailing_action
        the final action token is omitted — the evaluation-time layout where
        the current action does not exist yet.
        """
        spec = self._require_task(batch.task_id)
        b, l = batch.time_to_goal.shape
        if l > self.config.max_timesteps:
            raise ValueError(
                f"window of {l} timesteps exceeds capacity {self.config.max_timesteps}"
            )
        input_masks = input_masks or {}
        arrays = {
            "time_to_goal": batch.time_to_goal[:, :, None],
            "goal": batch.goal,
            "observation": batch.observations,
            "action": batch.actions,
        }
        pos_emb = T.take(self._p("backbone.timestep_emb"), np.arange(l))  # (L, d)
        streams = []
        masked_flags = []
        for item in ITEM_TYPES:
            tok = self._tokenize(batch.task_id, item, Tensor(arrays[item].astype(np.float32)))
            mask = input_masks.get(item)
            if mask is not None and mask.any():
                tok = T.where(
                    mask[:, :, None], self._p(f"backbone.mask_emb.{item}"), tok
                )
                masked_flags.append(np.broadcast_to(mask[:, :, None], (b, l, 1)))
            else:
                masked_flags.append(np.zeros((b, l, 1), dtype=bool))
            streams.append(tok + pos_emb)
        grouped = T.concat([s.reshape(b, l, 1, -1) for s in streams], axis=2)
        tokens = grouped.reshape(b, 4 * l, self.config.d_model)
        masked = np.concatenate(masked_flags, axis=2).reshape(b, 4 * l)
        timestep_index = np.repeat(np.arange(l), 4)
        if drop_trailing_action:
            tokens = tokens[:, : 4 * l - 1, :]
            masked = masked[:, : 4 * l - 1]
            timestep_index = timestep_index[: 4 * l - 1]
        tokens = self._dropout(tokens, train, rng)
        return TokenSequence(
            tokens=tokens,
            lengths=batch.lengths.copy(),
            timestep_index=timestep_index,
            masked=masked,
        )

    def backbone_forward(
        self, seq: TokenSequence, train: bool = False, rng: Pcg32 | None = None
    ) -> Tensor:
        """Causal pre-LN transformer over the token stream -> hidden states."""
        cfg = self.config
        x = seq.tokens
        b, s, d = x.shape
        if s > cfg.max_tokens:
            raise ValueError(f"{s} tokens exceeds capacity {cfg.max_tokens}")
        h = cfg.n_heads
        hd = d // h
        causal = np.tril(np.ones((s, s), dtype=bool))
        neg_inf = Tensor(np.float32(_NEG_INF))
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.n_layers):
            p = f"backbone.block{i}"
            ln1 = T.layer_norm(x, self._p(f"{p}.ln1.gain"), self._p(f"{p}.ln1.bias"))
            qkv = T.matmul(ln1, self._p(f"{p}.attn.w_qkv")) + self._p(f"{p}.attn.b_qkv")
            q = qkv[:, :, 0:d].reshape(b, s, h, hd).transpose(0, 2, 1, 3)
            k = qkv[:, :, d : 2 * d].reshape(b, s, h, hd).transpose(0, 2, 1, 3)
            v = qkv[:, :, 2 * d : 3 * d].reshape(b, s, h, hd).transpose(0, 2, 1, 3)
            scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * scale
            scores = T.where(causal, scores, neg_inf)
            attn = T.softmax(scores, axis=-1)
            attn = self._dropout(attn, train, rng)
            ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, d)
            proj = T.matmul(ctx, self._p(f"{p}.attn.w_proj")) + self._p(f"{p}.attn.b_proj")
            x = x + self._dropout(proj, train, rng)
            ln2 = T.layer_norm(x, self._p(f"{p}.ln2.gain"), self._p(f"{p}.ln2.bias"))
            ff = T.gelu(T.matmul(ln2, self._p(f"{p}.mlp.w_fc")) + self._p(f"{p}.mlp.b_fc"))
            ff = T.matmul(ff, self._p(f"{p}.mlp.w_proj")) + self._p(f"{p}.mlp.b_proj")
            x = x + self._dropout(ff, train, rng)
        return T.layer_norm(x, self._p("backbone.ln_f.gain"), self._p("backbone.ln_f.bias"))

    def apply_head(self, task_id: str, item: str, hidden: Tensor) -> Tensor:
        """Decode hidden states with a task head; actions are tanh-squashed."""
        self._require_task(task_id)
        p = f"adapter.{task_id}.head_{item}"
        out = T.matmul(hidden, self._p(f"{p}.w")) + self._p(f"{p}.b")
        if item == "action":
            out = T.tanh(out)
        return out


# -- single-sequence head reads (evaluation-style access) -----------------------


def _check_t(seq_timesteps: int, t: int, minimum: int) -> None:
    if not minimum <= t <= seq_timesteps:
        raise ValueError(
            f"timestep {t} outside valid range [{minimum}, {seq_timesteps}]"
        )


def predict_action(
    model: GoalConditionedTransformer, hidden: Tensor, task_id: str, t: int
) -> np.ndarray:
    """Action forecast for timestep t, read at the o_t token."""
    n_timesteps = (hidden.shape[1] + 1) // 4
    _check_t(n_timesteps, t, 1)
    h = hidden[:, 4 * (t - 1) + 2, :]
    return model.apply_head(task_id, "action", h).data[0]

def predict_observation(
    model: GoalConditionedTransformer, hidden: Tensor, task_id: str, t: int
) -> np.ndarray:
    """Next-observation forecast (normalized units), read at a_{t-1}."""
    n_timesteps = hidden.shape[1] // 4
    _check_t(n_timesteps, t, 2)
    h = hidden[:, 4 * (t - 2) + 3, :]
    return model.apply_head(task_id, "observation", h).data[0]


def predict_time_to_goal(
    model: GoalConditionedTransformer, hidden: Tensor, task_id: str, t: int
) -> float:
    """Time-to-goal forecast (normalized units), read at a_{t-1}."""
    n_timesteps = hidden.shape[1] // 4
    _check_t(n_timesteps, t, 2)
    h = hidden[:, 4 * (t - 2) + 3, :]
    return float(model.apply_head(task_id, "time_to_goal", h).data[0, 0])
