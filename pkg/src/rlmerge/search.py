"""Full merge-search loop, exhaustive oracle, and uniform baselines.

The loop collects episode batches under the frozen current policy,
scores each completed plan on data subsets, smooths the reward, and
updates the agent. Episodes that exhaust the step budget before
finishing, or whose plan does not assemble into a shape-legal model,
receive reward 0. Search-time rewards come from the given (training)
tasks; the final report re-scores the best candidate plans on the full
evaluation tasks.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .agent import Agent, PpoConfig, TrajStep, Trajectory, act, init_agent, state_value, update
from .data import TaskDataset
from .environment import (
    EnvConfig,
    MergePlan,
    assemble,
    legal_action_mask,
    observation,
    reset,
    step,
)
from .errors import DimensionBreak, IncompleteEpisode, InvalidConfig, SpaceTooLarge, UnknownOperator
from .operators import OPERATOR_IDS, MergeOpConfig, apply_operator
from .params import Checkpoint
from .rewards import DarState, EpisodeRecord, dar_update, episode_reward, make_cursor, mean_accuracy
from .seeding import derive_seed

RESCORE_TOP_K = 5
ORACLE_SPACE_BOUND = 1_000_000


@dataclass(frozen=True)
class SearchConfig:
    """Everything one search run needs, derived from a single root seed."""

    env: EnvConfig
    ppo: PpoConfig
    ops: MergeOpConfig
    data_fraction: float
    dar_lambda: float
    total_episodes: int
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.data_fraction <= 1:
            raise InvalidConfig(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if not 0 <= self.dar_lambda <= 1:
            raise InvalidConfig(f"dar_lambda must be in [0, 1], got {self.dar_lambda}")
        if self.total_episodes < self.ppo.episodes_per_batch:
            raise InvalidConfig(
                f"total_episodes {self.total_episodes} < one batch of {self.ppo.episodes_per_batch}"
            )
        if self.env.n_ops != 0 and self.env.n_ops != len(self.ops.op_ids):
            raise InvalidConfig(
                f"env.n_ops {self.env.n_ops} != {len(self.ops.op_ids)} configured operators"
            )


@dataclass(frozen=True)
class SearchResult:
    best_plan: MergePlan
    best_full_reward: float  # measured on the full evaluation tasks
    episode_log: tuple[EpisodeRecord, ...]
    wall_time_seconds: float
    top_plans: tuple[tuple[MergePlan, float], ...]  # rescored candidates
    incomplete_episodes: int


def _rollout(
    agent: Agent, env_cfg: EnvConfig, rng: np.random.Generator
) -> tuple[list[TrajStep], MergePlan, bool]:
    """One episode under the current policy; returns steps, plan, completeness."""
    state = reset(env_cfg)
    steps: list[TrajStep] = []
    plan_steps: list = []
    done = False
    while not done:
        obs = observation(state, env_cfg)
        mask = legal_action_mask(state, env_cfg)
        action_idx, log_prob, _ = act(agent.policy, obs, mask, rng)
        value = state_value(agent.value, obs)
        state, emitted, done = step(state, env_cfg.action_from_index(action_idx), env_cfg)
        steps.append(TrajStep(obs, action_idx, log_prob, value, mask))
        if emitted is not None:
            plan_steps.append(emitted)
    return steps, MergePlan(tuple(plan_steps)), state.cursor_k > env_cfg.n_layers


@dataclass
class _PlanEntry:
    plan: MergePlan
    smoothed: float
    first_episode: int


def run_search(
    models: list[Checkpoint],
    pt: Checkpoint,
    tasks: list[TaskDataset],
    cfg: SearchConfig,
    eval_tasks: list[TaskDataset] | None = None,
) -> SearchResult:
    """Search the layer-wise merge space for the best-scoring plan.

    Deterministic given cfg.seed. Tracks plans by their best smoothed
    reward, then re-scores the top candidates on the full evaluation
    data and reports the winner (earliest discovery breaks ties).
    """
    t_start = time.perf_counter()
    if len(models) != cfg.env.n_models:
        raise InvalidConfig(f"{len(models)} models for env.n_models={cfg.env.n_models}")
    if not tasks:
        raise InvalidConfig("need at least one task")
    full_tasks = tasks if eval_tasks is None else eval_tasks

    agent = init_agent(cfg.env.obs_dim, cfg.env.n_actions, cfg.ppo)
    rng = np.random.default_rng(derive_seed(cfg.seed, "rollout"))
    cursors = [
        make_cursor(t, cfg.data_fraction, derive_seed(cfg.seed, "subset")) for t in tasks
    ]
    dar = DarState(lam=cfg.dar_lambda, t=0, t_max=cfg.total_episodes)

    tracked: dict[tuple, _PlanEntry] = {}
    records: list[EpisodeRecord] = []
    incomplete = 0
    episode = 0
    while episode < cfg.total_episodes:
        batch: list[Trajectory] = []
        n = min(cfg.ppo.episodes_per_batch, cfg.total_episodes - episode)
        for _ in range(n):
            steps, plan, complete = _rollout(agent, cfg.env, rng)
            raw, wrapped, accs = 0.0, False, []
            plan_ok = False
            if complete:
                try:
                    merged = assemble(plan, models, pt, cfg.ops)
                    raw, wrapped, accs = episode_reward(merged, tasks, cursors)
                    plan_ok = True
                except DimensionBreak:
                    pass  # shape-illegal composition: scored 0, like incomplete
            if plan_ok:
                smoothed, dar = dar_update(dar, raw, wrapped)
            else:
                # no model was evaluated, so nothing enters the smoothing
                # chain; the trajectory itself still scores 0
                incomplete += 1
                smoothed = 0.0
            batch.append(Trajectory(tuple(steps), smoothed))
            records.append(EpisodeRecord(episode, raw, smoothed, wrapped, tuple(accs)))
            if plan_ok:
                entry = tracked.get(plan.key())
                if entry is None:
                    tracked[plan.key()] = _PlanEntry(plan, smoothed, episode)
                elif smoothed > entry.smoothed:
                    entry.smoothed = smoothed
            episode += 1
        agent, _ = update(agent, batch, cfg.ppo)

    if not tracked:
        raise IncompleteEpisode("no episode produced an assemblable plan")

    candidates = sorted(tracked.values(), key=lambda e: (-e.smoothed, e.first_episode))
    top: list[tuple[MergePlan, float, int]] = []
    for entry in candidates[:RESCORE_TOP_K]:
        merged = assemble(entry.plan, models, pt, cfg.ops)
        top.append((entry.plan, mean_accuracy(merged, full_tasks), entry.first_episode))
    best_plan, best_reward, _ = min(top, key=lambda t: (-t[1], t[2]))

    return SearchResult(
        best_plan=best_plan,
        best_full_reward=best_reward,
        episode_log=tuple(records),
        wall_time_seconds=time.perf_counter() - t_start,
        top_plans=tuple((p, r) for p, r, _ in top),
        incomplete_episodes=incomplete,
    )


def enumerate_plans(env_cfg: EnvConfig) -> list[MergePlan]:
    """All emit-only plans, lexicographic in action-index order."""
    n_emit = env_cfg.n_models + env_cfg.n_ops
    plans = []
    for combo in itertools.product(range(n_emit), repeat=env_cfg.n_layers):
        steps = tuple(
            (layer + 1, env_cfg.action_from_index(e)) for layer, e in enumerate(combo)
        )
        plans.append(MergePlan(steps))
    return plans


def brute_force_oracle(
    models: list[Checkpoint],
    pt: Checkpoint,
    tasks: list[TaskDataset],
    env_cfg: EnvConfig,
    ops_cfg: MergeOpConfig,
    n_workers: int = 1,
) -> tuple[MergePlan, float, list[tuple[MergePlan, float]]]:
    """Exact optimum over every emit-only plan, scored on the full tasks.

    Ties pick the lexicographically lowest plan. Refuses spaces larger
    than 10^6 plans.
    """
    n_emit = env_cfg.n_models + env_cfg.n_ops
    space = n_emit**env_cfg.n_layers
    if space > ORACLE_SPACE_BOUND:
        raise SpaceTooLarge(f"{n_emit}^{env_cfg.n_layers} = {space} plans exceeds {ORACLE_SPACE_BOUND}")
    plans = enumerate_plans(env_cfg)

    def score(plan: MergePlan) -> float:
        return mean_accuracy(assemble(plan, models, pt, ops_cfg), tasks)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rewards = list(pool.map(score, plans))
    else:
        rewards = [score(p) for p in plans]

    best_i = 0
    for i, r in enumerate(rewards):
        if r > rewards[best_i]:
            best_i = i
    return plans[best_i], rewards[best_i], list(zip(plans, rewards))


def run_uniform_baseline(
    models: list[Checkpoint],
    pt: Checkpoint,
    tasks: list[TaskDataset],
    op_id: str,
    ops_cfg: MergeOpConfig,
) -> float:
    """Apply one operator at every layer; full-data mean reward."""
    if op_id not in OPERATOR_IDS:
        raise UnknownOperator(f"unknown operator id {op_id!r}")
    merged = uniform_merge(models, pt, op_id, ops_cfg)
    return mean_accuracy(merged, tasks)


def uniform_merge(
    models: list[Checkpoint], pt: Checkpoint, op_id: str, ops_cfg: MergeOpConfig
) -> Checkpoint:
    """The merged model itself for a single-operator-everywhere plan."""
    if op_id not in OPERATOR_IDS:
        raise UnknownOperator(f"unknown operator id {op_id!r}")
    groups = tuple(
        apply_operator(op_id, pt.groups[k], [m.groups[k] for m in models], ops_cfg)
        for k in range(pt.n_layers)
    )
    return Checkpoint(pt.arch_id, groups)


def measure_episode_time(
    models: list[Checkpoint],
    pt: Checkpoint,
    tasks: list[TaskDataset],
    env_cfg: EnvConfig,
    ops_cfg: MergeOpConfig,
    fraction: float,
    episodes: int,
    seed: int = 0,
) -> float:
    """Mean wall seconds per episode (rollout + assembly + subset reward).

    Uses a freshly seeded agent so the measurement needs no training;
    one untimed warm-up episode absorbs lazy numpy initialization.
    """
    ppo_cfg = PpoConfig(seed=derive_seed(seed, "timing-agent"))
    agent = init_agent(env_cfg.obs_dim, env_cfg.n_actions, ppo_cfg)
    rng = np.random.default_rng(derive_seed(seed, "timing"))
    cursors = [make_cursor(t, fraction, derive_seed(seed, "timing-subset")) for t in tasks]

    def one_episode() -> None:
        _, plan, complete = _rollout(agent, env_cfg, rng)
        if complete:
            try:
                merged = assemble(plan, models, pt, ops_cfg)
                episode_reward(merged, tasks, cursors)
            except DimensionBreak:
                pass

    one_episode()
    t0 = time.perf_counter()
    for _ in range(episodes):
        one_episode()
    return (time.perf_counter() - t0) / episodes
