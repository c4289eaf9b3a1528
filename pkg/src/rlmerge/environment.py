"""Merging environment: action space, visit-count state, transitions, assembly.

The state is an (M+N) x L matrix of visit counts plus a layer cursor.
Model and merge actions emit a layer for the plan and advance the
cursor; Skip and Back only move the cursor. An episode ends when the
cursor passes the last layer or the step budget runs out.

Action indexing is fixed: 0..N-1 are the model actions, N..N+M-1 the
merge operators (in MergeOpConfig.op_ids order), N+M is Skip and N+M+1
is Back. Count-matrix rows use the same order for the emitting actions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchMismatch,
    DimensionBreak,
    EmptyPlan,
    IllegalAction,
    InvalidConfig,
    ShapeMismatch,
)
from .operators import MergeOpConfig, apply_operator
from .params import Checkpoint, ParamGroup


@dataclass(frozen=True)
class MergeAction:
    """One discrete action: Model(i), Merge(j), Skip, or Back.

    i and j are 1-based, matching layer-aligned model and operator
    numbering everywhere else.
    """

    kind: str  # "model" | "merge" | "skip" | "back"
    index: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("model", "merge", "skip", "back"):
            raise IllegalAction(f"unknown action kind {self.kind!r}")
        if self.kind in ("model", "merge") and self.index < 1:
            raise IllegalAction(f"{self.kind} action index must be >= 1, got {self.index}")
        if self.kind in ("skip", "back") and self.index != 0:
            raise IllegalAction(f"{self.kind} action carries no index")

    @property
    def emits(self) -> bool:
        return self.kind in ("model", "merge")

    @staticmethod
    def model(i: int) -> MergeAction:
        return MergeAction("model", i)

    @staticmethod
    def merge(j: int) -> MergeAction:
        return MergeAction("merge", j)


SKIP = MergeAction("skip")
BACK = MergeAction("back")


@dataclass(frozen=True)
class EnvConfig:
    """Sizes and budget of one merging episode.

    max_steps == n_layers disables the layer actions outright: the
    must-emit mask then binds at every step, so each episode emits
    exactly one layer per position.
    """

    n_models: int
    n_ops: int
    n_layers: int
    max_steps: int
    forced_emit_layers: frozenset[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.forced_emit_layers is None:
            object.__setattr__(self, "forced_emit_layers", frozenset({1, self.n_layers}))
        else:
            object.__setattr__(self, "forced_emit_layers", frozenset(self.forced_emit_layers))
        if self.n_models < 1 or self.n_ops < 0 or self.n_models + self.n_ops < 1:
            raise InvalidConfig(
                f"need at least one emitting action, got N={self.n_models}, M={self.n_ops}"
            )
        if self.n_layers < 1:
            raise InvalidConfig(f"n_layers must be >= 1, got {self.n_layers}")
        if self.max_steps < self.n_layers:
            raise InvalidConfig(
                f"max_steps {self.max_steps} < n_layers {self.n_layers}: no complete model reachable"
            )
        if not self.forced_emit_layers <= set(range(1, self.n_layers + 1)):
            raise InvalidConfig(f"forced_emit_layers out of range: {self.forced_emit_layers}")

    @property
    def n_actions(self) -> int:
        return self.n_models + self.n_ops + 2

    @property
    def obs_dim(self) -> int:
        return (self.n_models + self.n_ops + 1) * self.n_layers

    def action_index(self, action: MergeAction) -> int:
        if action.kind == "model":
            if action.index > self.n_models:
                raise IllegalAction(f"model index {action.index} > N={self.n_models}")
            return action.index - 1
        if action.kind == "merge":
            if action.index > self.n_ops:
                raise IllegalAction(f"operator index {action.index} > M={self.n_ops}")
            return self.n_models + action.index - 1
        return self.n_models + self.n_ops + (0 if action.kind == "skip" else 1)

    def action_from_index(self, idx: int) -> MergeAction:
        if 0 <= idx < self.n_models:
            return MergeAction.model(idx + 1)
        if self.n_models <= idx < self.n_models + self.n_ops:
            return MergeAction.merge(idx - self.n_models + 1)
        if idx == self.n_models + self.n_ops:
            return SKIP
        if idx == self.n_models + self.n_ops + 1:
            return BACK
        raise IllegalAction(f"action index {idx} out of range")


@dataclass(frozen=True)
class MergingMap:
    """Episode state: visit counts, layer cursor, and step counter.

    counts[i][j] is how many times emitting action i was taken at layer
    j+1 this episode. The cursor sits at L+1 once the episode has moved
    past the last layer.
    """

    counts: np.ndarray  # (M+N, L) int64, read-only
    cursor_k: int
    step_t: int

    def __post_init__(self) -> None:
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    def is_done(self, cfg: EnvConfig) -> bool:
        return self.cursor_k > cfg.n_layers or self.step_t >= cfg.max_steps


@dataclass(frozen=True)
class MergePlan:
    """Ordered emitting steps (layer, action); rebuilds the merged model."""

    steps: tuple[tuple[int, MergeAction], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        for layer, action in self.steps:
            if not action.emits:
                raise IllegalAction("merge plans contain only emitting actions")
            if layer < 1:
                raise IllegalAction(f"layer index {layer} out of range")

    def __len__(self) -> int:
        return len(self.steps)

    def key(self) -> tuple:
        """Hashable identity used for dedup and tie-breaking."""
        return tuple((layer, a.kind, a.index) for layer, a in self.steps)


def reset(cfg: EnvConfig) -> MergingMap:
    """Zero counts, cursor at layer 1, step counter at 0."""
    counts = np.zeros((cfg.n_models + cfg.n_ops, cfg.n_layers), dtype=np.int64)
    return MergingMap(counts=counts, cursor_k=1, step_t=0)


def legal_actions(state: MergingMap, cfg: EnvConfig) -> set[MergeAction]:
    """All actions minus the masks that keep episodes finishable.

    Back is masked at layer 1, Skip at forced-emit layers, and both
    whenever the remaining budget exactly equals the remaining layers
    (every remaining step must emit to finish).
    """
    if state.is_done(cfg):
        raise IllegalAction("episode already terminated")
    actions: set[MergeAction] = {MergeAction.model(i + 1) for i in range(cfg.n_models)}
    actions |= {MergeAction.merge(j + 1) for j in range(cfg.n_ops)}
    budget = cfg.max_steps - state.step_t
    remaining_layers = cfg.n_layers - state.cursor_k + 1
    must_emit = budget == remaining_layers
    if not must_emit and state.cursor_k not in cfg.forced_emit_layers:
        actions.add(SKIP)
    if not must_emit and state.cursor_k > 1:
        actions.add(BACK)
    return actions


def legal_action_mask(state: MergingMap, cfg: EnvConfig) -> np.ndarray:
    """Boolean mask over action indices, aligned with EnvConfig indexing."""
    mask = np.zeros(cfg.n_actions, dtype=bool)
    for action in legal_actions(state, cfg):
        mask[cfg.action_index(action)] = True
    return mask


def step(
    state: MergingMap, action: MergeAction, cfg: EnvConfig
) -> tuple[MergingMap, tuple[int, MergeAction] | None, bool]:
    """Apply one action; returns (next state, emitted step or None, done)."""
    if action not in legal_actions(state, cfg):
        raise IllegalAction(f"{action} not legal at cursor {state.cursor_k}")
    emitted: tuple[int, MergeAction] | None = None
    cursor = state.cursor_k
    counts = state.counts
    if action.emits:
        counts = counts.copy()
        counts[cfg.action_index(action), cursor - 1] += 1
        emitted = (cursor, action)
        cursor += 1
    elif action.kind == "skip":
        cursor += 1
    else:  # back
        cursor -= 1
    nxt = MergingMap(counts=counts, cursor_k=cursor, step_t=state.step_t + 1)
    return nxt, emitted, nxt.is_done(cfg)


def observation(state: MergingMap, cfg: EnvConfig) -> np.ndarray:
    """Flattened counts plus a one-hot cursor, as one float vector.

    The raw count matrix is not Markov with respect to position (layer
    actions leave it untouched), so the cursor one-hot is appended.
    """
    onehot = np.zeros(cfg.n_layers, dtype=np.float64)
    if 1 <= state.cursor_k <= cfg.n_layers:
        onehot[state.cursor_k - 1] = 1.0
    return np.concatenate([state.counts.reshape(-1).astype(np.float64), onehot])


def _dedup_name(name: str, used: set[str]) -> str:
    candidate, k = name, 1
    while candidate in used:
        k += 1
        candidate = f"{name}~{k}"
    used.add(candidate)
    return candidate


def _check_chain(groups: list[ParamGroup]) -> None:
    """Affine-layer convention: group shape is [out, in + 1]."""
    for g in groups:
        if len(g.shape) != 2 or g.shape[1] < 2:
            raise DimensionBreak(f"group {g.name!r} is not an affine layer: shape {g.shape}")
    for prev, nxt in zip(groups, groups[1:]):
        if prev.shape[0] != nxt.shape[1] - 1:
            raise DimensionBreak(
                f"layer {nxt.name!r} expects {nxt.shape[1] - 1} inputs, "
                f"previous layer {prev.name!r} yields {prev.shape[0]}"
            )


def assemble(
    plan: MergePlan,
    models: list[Checkpoint],
    pt: Checkpoint,
    ops_cfg: MergeOpConfig,
) -> Checkpoint:
    """Build the merged checkpoint by executing the plan steps in order.

    Model(i) copies layer k of model i; Merge(j) applies operator
    op_ids[j-1] to the aligned layers of all models at position k. The
    resulting group sequence must chain dimensionally; repeated names
    from hierarchical stacking get a ~k suffix.
    """
    if len(plan) == 0:
        raise EmptyPlan("cannot assemble an empty plan")
    for m in models:
        if not m.same_family(pt):
            raise ArchMismatch(f"model arch {m.arch_id!r} incompatible with {pt.arch_id!r}")
    n_layers = pt.n_layers

    out_groups: list[ParamGroup] = []
    used_names: set[str] = set()
    for layer, action in plan.steps:
        if layer > n_layers:
            raise ShapeMismatch(f"plan step at layer {layer}, model has {n_layers}")
        if action.kind == "model":
            if action.index > len(models):
                raise ShapeMismatch(f"plan references model {action.index}, have {len(models)}")
            merged = models[action.index - 1].groups[layer - 1]
        else:
            if action.index > len(ops_cfg.op_ids):
                raise ShapeMismatch(
                    f"plan references operator {action.index}, have {len(ops_cfg.op_ids)}"
                )
            op_id = ops_cfg.op_ids[action.index - 1]
            merged = apply_operator(
                op_id, pt.groups[layer - 1], [m.groups[layer - 1] for m in models], ops_cfg
            )
        out_groups.append(
            ParamGroup(_dedup_name(merged.name, used_names), merged.shape, merged.values)
        )

    _check_chain(out_groups)
    family_layout = [(g.name, g.shape) for g in pt.groups]
    merged_layout = [(g.name, g.shape) for g in out_groups]
    arch_id = pt.arch_id if merged_layout == family_layout else f"{pt.arch_id}#merged"
    return Checkpoint(arch_id, tuple(out_groups))


def plan_to_json(plan: MergePlan, ops_cfg: MergeOpConfig) -> list[dict]:
    """Serializable form: [{"layer": k, "action": "model:i" | op id}, ...]."""
    rows = []
    for layer, action in plan.steps:
        if action.kind == "model":
            name = f"model:{action.index}"
        else:
            name = ops_cfg.op_ids[action.index - 1]
        rows.append({"layer": layer, "action": name})
    return rows


def plan_from_json(data: list[dict], ops_cfg: MergeOpConfig) -> MergePlan:
    """Inverse of plan_to_json; validates action names against op_ids."""
    steps: list[tuple[int, MergeAction]] = []
    for row in data:
        layer, name = int(row["layer"]), str(row["action"])
        if name.startswith("model:"):
            steps.append((layer, MergeAction.model(int(name.split(":", 1)[1]))))
        elif name in ops_cfg.op_ids:
            steps.append((layer, MergeAction.merge(ops_cfg.op_ids.index(name) + 1)))
        else:
            raise IllegalAction(f"unknown plan action {name!r}")
    return MergePlan(tuple(steps))


def save_plan(plan: MergePlan, ops_cfg: MergeOpConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_json(plan, ops_cfg), indent=2) + "\n")


def load_plan(path: str | Path, ops_cfg: MergeOpConfig) -> MergePlan:
    return plan_from_json(json.loads(Path(path).read_text()), ops_cfg)
