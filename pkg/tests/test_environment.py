from __future__ import annotations

import numpy as np
import pytest

from rlmerge.environment import (
    BACK,
    SKIP,
    EnvConfig,
    MergeAction,
    MergePlan,
    assemble,
    legal_action_mask,
    legal_actions,
    observation,
    plan_from_json,
    plan_to_json,
    reset,
    step,
)
from rlmerge.errors import (
    ArchMismatch,
    DimensionBreak,
    EmptyPlan,
    IllegalAction,
    InvalidConfig,
)
from rlmerge.operators import MergeOpConfig
from rlmerge.params import Checkpoint, ParamGroup


CFG = EnvConfig(n_models=2, n_ops=2, n_layers=4, max_steps=8)


def affine_checkpoint(arch_id, dims, seed):
    """Random chain-compatible model: dims = [(out, in), ...]."""
    rng = np.random.default_rng(seed)
    groups = []
    for i, (out, d_in) in enumerate(dims):
        vals = rng.standard_normal(out * (d_in + 1)).astype(np.float32)
        groups.append(ParamGroup(f"layer_{i:02d}", (out, d_in + 1), vals))
    return Checkpoint(arch_id, tuple(groups))


TOY_DIMS = [(3, 2), (3, 3), (3, 3), (4, 3)]


@pytest.fixture
def models():
    return [affine_checkpoint("fam", TOY_DIMS, s) for s in (1, 2)]


@pytest.fixture
def pt():
    return affine_checkpoint("fam", TOY_DIMS, 0)


def test_reset_zero_state():
    state = reset(CFG)
    assert state.counts.shape == (4, 4)
    assert not state.counts.any()
    assert state.cursor_k == 1 and state.step_t == 0
    state2 = reset(CFG)
    assert np.array_equal(state.counts, state2.counts)


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        EnvConfig(n_models=2, n_ops=2, n_layers=4, max_steps=3)
    with pytest.raises(InvalidConfig):
        EnvConfig(n_models=0, n_ops=0, n_layers=2, max_steps=4)
    with pytest.raises(InvalidConfig):
        EnvConfig(n_models=2, n_ops=2, n_layers=2, max_steps=4, forced_emit_layers={5})
    # single-model, zero-operator spaces are allowed
    EnvConfig(n_models=1, n_ops=0, n_layers=2, max_steps=2)


def test_action_indexing_round_trip():
    for idx in range(CFG.n_actions):
        assert CFG.action_index(CFG.action_from_index(idx)) == idx
    assert CFG.action_from_index(0) == MergeAction.model(1)
    assert CFG.action_from_index(2) == MergeAction.merge(1)
    assert CFG.action_from_index(4) == SKIP
    assert CFG.action_from_index(5) == BACK
    with pytest.raises(IllegalAction):
        CFG.action_from_index(6)


def test_legal_actions_masks():
    state = reset(CFG)
    # cursor 1: Back masked, Skip masked (forced emit layer 1)
    acts = legal_actions(state, CFG)
    assert BACK not in acts and SKIP not in acts
    assert len(acts) == 4

    # interior cursor with slack budget: everything legal
    state, _, _ = step(state, MergeAction.model(1), CFG)
    acts = legal_actions(state, CFG)
    assert len(acts) == CFG.n_actions
    assert SKIP in acts and BACK in acts

    # forced emit layer (the last): Skip masked
    s = state
    for _ in range(2):
        s, _, _ = step(s, MergeAction.model(1), CFG)
    assert s.cursor_k == 4
    acts = legal_actions(s, CFG)
    assert SKIP not in acts and BACK in acts


def test_must_emit_when_budget_tight():
    cfg = EnvConfig(n_models=2, n_ops=2, n_layers=4, max_steps=4)
    state = reset(cfg)
    for k in range(4):
        acts = legal_actions(state, cfg)
        assert SKIP not in acts and BACK not in acts, f"layer actions leak at step {k}"
        state, _, done = step(state, MergeAction.merge(1), cfg)
    assert done


def test_step_updates_counts_and_emits():
    state = reset(CFG)
    nxt, emitted, done = step(state, MergeAction.model(1), CFG)
    assert emitted == (1, MergeAction.model(1))
    assert nxt.counts[0, 0] == 1 and nxt.counts.sum() == 1
    assert nxt.cursor_k == 2 and nxt.step_t == 1 and not done
    # original state untouched
    assert state.counts.sum() == 0 and state.cursor_k == 1


def test_skip_moves_cursor_without_counting():
    state = reset(CFG)
    state, _, _ = step(state, MergeAction.model(2), CFG)
    nxt, emitted, _ = step(state, SKIP, CFG)
    assert emitted is None
    assert nxt.cursor_k == 3
    assert np.array_equal(nxt.counts, state.counts)


def test_back_then_reemit_stacks():
    state = reset(CFG)
    state, _, _ = step(state, MergeAction.model(1), CFG)
    state, e1, _ = step(state, MergeAction.model(1), CFG)   # layer 2
    state, _, _ = step(state, BACK, CFG)                    # back to layer 2
    state, e2, _ = step(state, MergeAction.model(1), CFG)   # layer 2 again
    assert e1 == (2, MergeAction.model(1)) and e2 == (2, MergeAction.model(1))
    assert state.counts[0, 1] == 2


def test_illegal_actions_raise():
    state = reset(CFG)
    with pytest.raises(IllegalAction):
        step(state, BACK, CFG)
    with pytest.raises(IllegalAction):
        step(state, SKIP, CFG)  # layer 1 is forced-emit
    # terminal state rejects further queries
    cfg = EnvConfig(n_models=1, n_ops=0, n_layers=1, max_steps=1)
    s = reset(cfg)
    s, _, done = step(s, MergeAction.model(1), cfg)
    assert done
    with pytest.raises(IllegalAction):
        legal_actions(s, cfg)


def test_counts_change_iff_emitting():
    rng = np.random.default_rng(0)
    state = reset(CFG)
    done = False
    while not done:
        legal = sorted(legal_actions(state, CFG), key=CFG.action_index)
        action = legal[rng.integers(len(legal))]
        nxt, emitted, done = step(state, action, CFG)
        if emitted is None:
            assert np.array_equal(nxt.counts, state.counts)
        else:
            assert nxt.counts.sum() == state.counts.sum() + 1
        state = nxt


def test_replay_reproduces_state_and_plan():
    rng = np.random.default_rng(42)

    def roll(actions=None):
        state, plan, taken = reset(CFG), [], []
        done, i = False, 0
        while not done:
            if actions is None:
                legal = sorted(legal_actions(state, CFG), key=CFG.action_index)
                action = legal[rng.integers(len(legal))]
            else:
                action = actions[i]
            state, emitted, done = step(state, action, CFG)
            taken.append(action)
            if emitted:
                plan.append(emitted)
            i += 1
        return state, MergePlan(tuple(plan)), taken

    for _ in range(50):
        s1, p1, actions = roll()
        s2, p2, _ = roll(actions)
        assert np.array_equal(s1.counts, s2.counts)
        assert s1.cursor_k == s2.cursor_k and s1.step_t == s2.step_t
        assert p1.key() == p2.key()


def test_observation_layout():
    state = reset(CFG)
    obs = observation(state, CFG)
    assert obs.shape == (CFG.obs_dim,) == ((2 + 2 + 1) * 4,)
    assert obs[-4] == 1.0 and np.count_nonzero(obs) == 1

    state, _, _ = step(state, MergeAction.model(1), CFG)
    obs = observation(state, CFG)
    assert np.count_nonzero(obs) == 2  # one count, one cursor bit


def test_legal_action_mask_matches_set():
    state = reset(CFG)
    mask = legal_action_mask(state, CFG)
    acts = legal_actions(state, CFG)
    for idx in range(CFG.n_actions):
        assert mask[idx] == (CFG.action_from_index(idx) in acts)


# --- assembly -----------------------------------------------------------------

def plan_of(*steps):
    return MergePlan(tuple(steps))


def test_assemble_pure_copy_is_bitwise_identical(models, pt):
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    plan = plan_of(*(((k, MergeAction.model(1))) for k in range(1, 5)))
    merged = assemble(plan, models, pt, ops)
    assert merged.allclose_bits(models[0])


def test_assemble_uniform_average(models, pt):
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    plan = plan_of(*(((k, MergeAction.merge(1))) for k in range(1, 5)))
    merged = assemble(plan, models, pt, ops)
    for k, g in enumerate(merged.groups):
        expect = (models[0].groups[k].values.astype(np.float64)
                  + models[1].groups[k].values) / 2
        np.testing.assert_array_equal(g.values, expect.astype(np.float32))


def test_assemble_stacked_interior_layer(models, pt):
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    plan = plan_of(
        (1, MergeAction.model(1)),
        (2, MergeAction.model(2)),
        (2, MergeAction.model(2)),  # hierarchical stack
        (3, MergeAction.model(1)),
        (4, MergeAction.model(1)),
    )
    merged = assemble(plan, models, pt, ops)
    assert merged.n_layers == 5
    names = [g.name for g in merged.groups]
    assert names[1] == "layer_01" and names[2] == "layer_01~2"
    assert merged.arch_id.endswith("#merged")


def test_assemble_skipped_interior_layer(models, pt):
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    plan = plan_of(
        (1, MergeAction.model(1)),
        (3, MergeAction.model(2)),
        (4, MergeAction.model(1)),
    )
    merged = assemble(plan, models, pt, ops)
    assert merged.n_layers == 3


def test_assemble_dimension_break(models, pt):
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    # stacking the input layer breaks the chain: (3,2+1) cannot follow (3,2+1)
    plan = plan_of((1, MergeAction.model(1)), (1, MergeAction.model(1)))
    with pytest.raises(DimensionBreak):
        assemble(plan, models, pt, ops)


def test_assemble_errors(models, pt):
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    with pytest.raises(EmptyPlan):
        assemble(MergePlan(()), models, pt, ops)
    alien = affine_checkpoint("other", TOY_DIMS, 9)
    with pytest.raises(ArchMismatch):
        assemble(plan_of((1, MergeAction.model(1))), [models[0], alien], pt, ops)


def test_assemble_model_permutation_symmetric_ops(models, pt):
    # swapping the model list and remapping model indices gives the
    # identical checkpoint for symmetric operators
    ops = MergeOpConfig(op_ids=("avg", "ties"))
    plan_a = plan_of(
        (1, MergeAction.model(1)),
        (2, MergeAction.merge(1)),
        (3, MergeAction.merge(2)),
        (4, MergeAction.model(2)),
    )
    plan_b = plan_of(
        (1, MergeAction.model(2)),
        (2, MergeAction.merge(1)),
        (3, MergeAction.merge(2)),
        (4, MergeAction.model(1)),
    )
    a = assemble(plan_a, models, pt, ops)
    b = assemble(plan_b, list(reversed(models)), pt, ops)
    assert a.allclose_bits(b)


def test_plan_json_round_trip():
    ops = MergeOpConfig(op_ids=("avg", "ta"))
    plan = plan_of((1, MergeAction.model(2)), (2, MergeAction.merge(2)), (4, MergeAction.merge(1)))
    data = plan_to_json(plan, ops)
    assert data == [
        {"layer": 1, "action": "model:2"},
        {"layer": 2, "action": "ta"},
        {"layer": 4, "action": "avg"},
    ]
    assert plan_from_json(data, ops).key() == plan.key()
    with pytest.raises(IllegalAction):
        plan_from_json([{"layer": 1, "action": "slerp"}], ops)
