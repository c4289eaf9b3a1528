"""Layer-wise multi-task model merging with reinforcement-learning search."""

from .agent import Agent, PolicyNet, PpoConfig, Trajectory, ValueNet, act, advantage, init_agent, ppo_loss, update
from .data import TaskDataset, load_dataset, save_dataset
from .environment import (
    BACK,
    SKIP,
    EnvConfig,
    MergeAction,
    MergePlan,
    MergingMap,
    assemble,
    legal_actions,
    observation,
    reset,
    step,
)
from .operators import (
    OPERATOR_IDS,
    MergeOpConfig,
    dare_merge,
    task_arithmetic,
    ties_merge,
    weight_average,
)
from .params import Checkpoint, ParamGroup, TaskVector, load_checkpoint, save_checkpoint, task_vector
from .rewards import DarState, SubsetCursor, dar_update, episode_reward, evaluate, mean_accuracy
from .search import (
    SearchConfig,
    SearchResult,
    brute_force_oracle,
    run_search,
    run_uniform_baseline,
)
from .zoo import TaskSpec, ToyArch, TrainConfig, forward, generate_task, make_pretrained, train_finetuned

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "BACK",
    "Checkpoint",
    "DarState",
    "EnvConfig",
    "MergeAction",
    "MergeOpConfig",
    "MergePlan",
    "MergingMap",
    "OPERATOR_IDS",
    "ParamGroup",
    "PolicyNet",
    "PpoConfig",
    "SKIP",
    "SearchConfig",
    "SearchResult",
    "SubsetCursor",
    "TaskDataset",
    "TaskSpec",
    "TaskVector",
    "ToyArch",
    "TrainConfig",
    "Trajectory",
    "ValueNet",
    "act",
    "advantage",
    "assemble",
    "brute_force_oracle",
    "dar_update",
    "dare_merge",
    "episode_reward",
    "evaluate",
    "forward",
    "generate_task",
    "init_agent",
    "legal_actions",
    "load_checkpoint",
    "load_dataset",
    "make_pretrained",
    "mean_accuracy",
    "observation",
    "ppo_loss",
    "reset",
    "run_search",
    "run_uniform_baseline",
    "save_checkpoint",
    "save_dataset",
    "step",
    "task_arithmetic",
    "task_vector",
    "ties_merge",
    "train_finetuned",
    "update",
    "weight_average",
]
