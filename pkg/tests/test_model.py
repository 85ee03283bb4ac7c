import numpy as np
import pytest

from gcdt.data import NormStats, TaskSpec, Window
from gcdt.model import (
    GoalConditionedTransformer,
    ModelConfig,
    SequenceBatch,
    batch_from_windows,
    predict_action,
    predict_observation,
    predict_time_to_goal,
)
from gcdt.rng import Pcg32
from gcdt.tensor import record

SPEC = TaskSpec("toy", obs_dim=3, goal_dim=2, act_dim=2,
                max_episode_steps=12, expected_steps=6, success_threshold=0.02)
CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, max_timesteps=8, dropout=0.1)


def identity_stats(spec=SPEC) -> NormStats:
    return NormStats(
        task_id=spec.task_id,
        obs_mean=np.zeros(spec.obs_dim), obs_std=np.ones(spec.obs_dim),
        goal_mean=np.zeros(spec.goal_dim), goal_std=np.ones(spec.goal_dim),
        act_mean=np.zeros(spec.act_dim), act_std=np.ones(spec.act_dim),
        tto_scale=float(spec.max_episode_steps),
    )


def fresh_model(cfg=CFG, specs=None, seed=0):
    return GoalConditionedTransformer(cfg, specs or {SPEC.task_id: SPEC}, init_seed=seed)


def random_window(rng: Pcg32, length: int, spec=SPEC, total=None) -> Window:
    total = total or length
    ts = np.arange(1, length + 1, dtype=np.int64)
    return Window(
        task_id=spec.task_id,
        timesteps=ts,
        time_to_goal=(total - ts + 1).astype(np.float64),
        goal=rng.normal(size=spec.goal_dim),
        observations=rng.normal(size=(length, spec.obs_dim)),
        actions=np.clip(rng.normal(size=(length, spec.act_dim)), -1, 1),
    )


def random_batch(rng: Pcg32, lengths, spec=SPEC) -> SequenceBatch:
    return batch_from_windows(
        [random_window(rng, ln, spec) for ln in lengths], identity_stats(spec)
    )


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(n_heads=3, d_model=16)
    assert CFG.max_tokens == 32
    assert CFG.feedforward_width == 64


def test_token_layout_and_timestep_indices():
    model = fresh_model()
    batch = random_batch(Pcg32(0), [2])
    seq = model.embed_sequence(batch)
    assert seq.tokens.shape == (1, 8, CFG.d_model)
    assert list(seq.timestep_index) == [0, 0, 0, 0, 1, 1, 1, 1]


def test_window_longer_than_capacity_rejected():
    model = fresh_model()
    batch = random_batch(Pcg32(0), [CFG.max_timesteps + 1])
    with pytest.raises(ValueError, match="exceeds capacity"):
        model.embed_sequence(batch)


def test_masked_positions_get_mask_vector_plus_timestep_embedding():
    model = fresh_model()
    batch = random_batch(Pcg32(1), [2])
    b, l = 1, 2
    masks = {
        "time_to_goal": np.ones((b, l), dtype=bool),
        "goal": np.ones((b, l), dtype=bool),
    }
    seq = model.embed_sequence(batch, input_masks=masks)
    pos = model.params["backbone.timestep_emb"].data
    for t in range(l):
        for item, offset in (("time_to_goal", 0), ("goal", 1)):
            vec = model.params[f"backbone.mask_emb.{item}"].data + pos[t]
            np.testing.assert_array_equal(seq.tokens.data[0, 4 * t + offset], vec)
    assert seq.masked[0].tolist() == [True, True, False, False] * 2


def test_dynamics_mask_ignores_goal_values_bitwise():
    model = fresh_model()
    rng = Pcg32(2)
    w1 = random_window(rng, 3)
    w2 = Window(
        task_id=w1.task_id,
        timesteps=w1.timesteps,
        time_to_goal=w1.time_to_goal + 3.0,  # different tto too
        goal=w1.goal + 5.0,  # entirely different goal
        observations=w1.observations,
        actions=w1.actions,
    )
    stats = identity_stats()
    masks = {
        "time_to_goal": np.ones((1, 3), dtype=bool),
        "goal": np.ones((1, 3), dtype=bool),
    }
    s1 = model.embed_sequence(batch_from_windows([w1], stats), input_masks=masks)
    s2 = model.embed_sequence(batch_from_windows([w2], stats), input_masks=masks)
    assert np.array_equal(s1.tokens.data, s2.tokens.data)
    h1 = model.backbone_forward(s1)
    h2 = model.backbone_forward(s2)
    assert np.array_equal(h1.data, h2.data)


def test_causality_hidden_states_before_perturbation_unchanged():
    model = fresh_model()
    rng = Pcg32(3)
    for trial in range(10):
        length = 2 + rng.randint(5)
        w = random_window(rng, length)
        batch = batch_from_windows([w], identity_stats())
        h_ref = model.backbone_forward(model.embed_sequence(batch)).data
        # perturb one item at timestep j; tokens strictly before 4*(j-1)+offset
        # must be unchanged bitwise
        j = 1 + rng.randint(length)
        item = ("time_to_goal", "goal", "observation", "action")[rng.randint(4)]
        w2 = Window(
            w.task_id, w.timesteps, w.time_to_goal.copy(), w.goal.copy(),
            w.observations.copy(), w.actions.copy(),
        )
        offset = {"time_to_goal": 0, "goal": 1, "observation": 2, "action": 3}[item]
        if item == "time_to_goal":
            w2.time_to_goal[j - 1] += 1.0
        elif item == "goal":
            # goal is shared across timesteps; perturbing it touches every
            # goal token, so the earliest affected position is offset 1
            w2 = Window(w.task_id, w.timesteps, w.time_to_goal, w.goal + 1.0,
                        w.observations, w.actions)
            j = 1
        elif item == "observation":
            w2.observations[j - 1] += 1.0
        else:
            w2.actions[j - 1] = np.clip(w2.actions[j - 1] + 0.5, -1, 1)
        batch2 = batch_from_windows([w2], identity_stats())
        h_new = model.backbone_forward(model.embed_sequence(batch2)).data
        cut = 4 * (j - 1) + offset
        assert np.array_equal(h_ref[:, :cut], h_new[:, :cut])


def test_single_token_input_shape():
    model = fresh_model()
    batch = random_batch(Pcg32(4), [1])
    seq = model.embed_sequence(batch, drop_trailing_action=True)
    assert seq.tokens.shape == (1, 3, CFG.d_model)
    h = model.backbone_forward(seq)
    assert h.shape == (1, 3, CFG.d_model)


def test_duplicate_batch_rows_identical_outputs():
    model = fresh_model()
    w = random_window(Pcg32(5), 4)
    batch = batch_from_windows([w, w], identity_stats())
    h = model.backbone_forward(model.embed_sequence(batch)).data
    assert np.array_equal(h[0], h[1])


def test_action_head_range_and_read_position():
    model = fresh_model()
    rng = Pcg32(6)
    w = random_window(rng, 4)
    batch = batch_from_windows([w], identity_stats())
    hidden = model.backbone_forward(model.embed_sequence(batch))
    a = predict_action(model, hidden, "toy", 2)
    assert a.shape == (SPEC.act_dim,)
    assert np.all(np.abs(a) < 1.0)
    # changing a_t itself must not change the prediction of a_t
    w2 = Window(w.task_id, w.timesteps, w.time_to_goal, w.goal,
                w.observations, w.actions.copy())
    w2.actions[1] = np.clip(w2.actions[1] + 0.7, -1, 1)
    hidden2 = model.backbone_forward(
        model.embed_sequence(batch_from_windows([w2], identity_stats()))
    )
    a2 = predict_action(model, hidden2, "toy", 2)
    np.testing.assert_array_equal(a, a2)


def test_observation_and_tto_heads_validate_t():
    model = fresh_model()
    batch = random_batch(Pcg32(7), [3])
    hidden = model.backbone_forward(model.embed_sequence(batch))
    obs = predict_observation(model, hidden, "toy", 2)
    assert obs.shape == (SPEC.obs_dim,)
    tto = predict_time_to_goal(model, hidden, "toy", 3)
    assert isinstance(tto, float)
    with pytest.raises(ValueError, match="outside valid range"):
        predict_observation(model, hidden, "toy", 1)
    with pytest.raises(ValueError, match="outside valid range"):
        predict_time_to_goal(model, hidden, "toy", 1)
    with pytest.raises(ValueError, match="outside valid range"):
        predict_action(model, hidden, "toy", 4)


def test_adapter_isolation_gradients():
    spec_b = TaskSpec("other", obs_dim=4, goal_dim=3, act_dim=3,
                      max_episode_steps=9, expected_steps=4, success_threshold=0.02)
    model = fresh_model(specs={SPEC.task_id: SPEC, "other": spec_b})
    batch = random_batch(Pcg32(8), [3, 2])
    with record() as tape:
        hidden = model.backbone_forward(model.embed_sequence(batch))
        preds = model.apply_head("toy", "action", hidden[:, 2::4, :])
        loss = (preds * preds).mean()
    grads = tape.gradients(loss, model.parameters())
    for name, g in grads.items():
        if name.startswith("adapter.other."):
            assert not g.any(), f"gradient leaked into {name}"
    assert any(
        g.any() for n, g in grads.items() if n.startswith("adapter.toy.")
    )
    assert any(g.any() for n, g in grads.items() if n.startswith("backbone."))


def test_head_output_dims_match_task():
    model = fresh_model()
    batch = random_batch(Pcg32(9), [2])
    hidden = model.backbone_forward(model.embed_sequence(batch))
    for item, dim in (("time_to_goal", 1), ("goal", 2), ("observation", 3), ("action", 2)):
        out = model.apply_head("toy", item, hidden[:, 0::4, :])
        assert out.shape == (1, 2, dim)


def test_init_is_deterministic_and_task_order_independent():
    m1 = fresh_model(seed=7)
    m2 = fresh_model(seed=7)
    assert all(
        np.array_equal(m1.params[k].data, m2.params[k].data) for k in m1.params
    )
    spec_b = TaskSpec("b", 2, 2, 2, 5, 3, 0.1)
    ma = GoalConditionedTransformer(CFG, {}, init_seed=1)
    ma.add_task(SPEC)
    ma.add_task(spec_b)
    mb = GoalConditionedTransformer(CFG, {}, init_seed=1)
    mb.add_task(spec_b)
    mb.add_task(SPEC)
    for k in ma.params:
        assert np.array_equal(ma.params[k].data, mb.params[k].data), k


def test_training_dropout_changes_with_rng_but_inference_does_not():
    model = fresh_model()
    batch = random_batch(Pcg32(10), [3])
    seq = lambda: model.embed_sequence(batch)  # noqa: E731
    h1 = model.backbone_forward(seq()).data
    h2 = model.backbone_forward(seq()).data
    assert np.array_equal(h1, h2)
    d1 = model.backbone_forward(seq(), train=True, rng=Pcg32(1)).data
    d2 = model.backbone_forward(seq(), train=True, rng=Pcg32(1)).data
    d3 = model.backbone_forward(seq(), train=True, rng=Pcg32(2)).data
    assert np.array_equal(d1, d2)
    assert not np.array_equal(d1, d3)
