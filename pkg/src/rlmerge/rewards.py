"""Subset evaluation, episode rewards, and dynamic average-reward smoothing.

Each task owns a cursor over a shuffled permutation of its data. An
episode draws the next batch (a fraction of the task) from every
cursor, scores the merged model by top-1 accuracy, and averages across
tasks. The smoothed reward blends previous and current episode rewards
with a weight that grows over the run and resets whenever any cursor
finishes a full pass over its data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import TaskDataset
from .errors import EmptyBatch, InvalidConfig
from .params import Checkpoint
from .seeding import derive_seed
from .zoo import ToyArch, forward


def evaluate(
    model: Checkpoint,
    batch: tuple[np.ndarray, np.ndarray],
    arch: ToyArch | None = None,
) -> float:
    """Top-1 accuracy on the batch; argmax ties go to the lowest class."""
    inputs, labels = batch
    if len(labels) == 0:
        raise EmptyBatch("cannot evaluate an empty batch")
    logits = forward(model, arch, inputs)
    preds = np.argmax(logits, axis=1)  # first max wins ties
    return float(np.mean(preds == np.asarray(labels)))


def mean_accuracy(model: Checkpoint, tasks: list[TaskDataset]) -> float:
    """Unweighted mean of full-dataset accuracies, one term per task."""
    return float(
        np.mean([evaluate(model, (t.inputs, t.labels)) for t in tasks])
    )


class SubsetCursor:
    """Without-replacement batch cursor over one task's data.

    A batch is max(1, ceil(fraction * n)) consecutive indices of the
    current permutation. When a draw exhausts the permutation it
    reshuffles with a freshly derived epoch seed and, if the batch is
    still short, keeps drawing from the new epoch; any reshuffle during
    a draw flags the draw as wrapped.

    With stratified=True the permutation interleaves per-class shuffles
    round-robin, so contiguous windows stay close to class-balanced.
    """

    def __init__(
        self,
        n: int,
        fraction: float,
        epoch_seed: int,
        labels: np.ndarray | None = None,
        stratified: bool = False,
    ) -> None:
        if not 0 < fraction <= 1:
            raise InvalidConfig(f"fraction must be in (0, 1], got {fraction}")
        if n < 1:
            raise InvalidConfig("cursor needs a non-empty dataset")
        if stratified and labels is None:
            raise InvalidConfig("stratified cursor needs labels")
        self.fraction = float(fraction)
        self.epoch_seed = int(epoch_seed)
        self.position = 0
        self._labels = None if labels is None else np.asarray(labels)
        self._stratified = stratified
        self._n = n
        self.permutation = self._make_permutation()

    @property
    def batch_size(self) -> int:
        return max(1, int(np.ceil(self.fraction * self._n)))

    def _make_permutation(self) -> np.ndarray:
        rng = np.random.default_rng(self.epoch_seed)
        if not self._stratified:
            return rng.permutation(self._n)
        by_class = [rng.permutation(np.flatnonzero(self._labels == c))
                    for c in np.unique(self._labels)]
        order = []
        for i in range(max(len(ix) for ix in by_class)):
            for ix in by_class:
                if i < len(ix):
                    order.append(ix[i])
        return np.asarray(order)

    def draw(self) -> tuple[np.ndarray, bool]:
        """Next batch of indices plus whether an epoch boundary was crossed."""
        need = self.batch_size
        taken: list[np.ndarray] = []
        wrapped = False
        while need > 0:
            chunk = self.permutation[self.position : self.position + need]
            taken.append(chunk)
            self.position += len(chunk)
            need -= len(chunk)
            if self.position >= len(self.permutation):
                self.epoch_seed = derive_seed(self.epoch_seed, "epoch")
                self.permutation = self._make_permutation()
                self.position = 0
                wrapped = True
        return np.concatenate(taken), wrapped


def make_cursor(
    task: TaskDataset, fraction: float, seed: int, stratified: bool = False
) -> SubsetCursor:
    return SubsetCursor(
        len(task),
        fraction,
        derive_seed(seed, "cursor", task.task_id),
        labels=task.labels,
        stratified=stratified,
    )


def episode_reward(
    model: Checkpoint,
    tasks: list[TaskDataset],
    cursors: list[SubsetCursor],
) -> tuple[float, bool, list[float]]:
    """Mean per-task subset accuracy for one episode.

    Advances every cursor by one batch. Returns (raw reward, whether any
    cursor wrapped, per-task accuracies).
    """
    if len(tasks) != len(cursors):
        raise InvalidConfig(f"{len(tasks)} tasks but {len(cursors)} cursors")
    accs: list[float] = []
    wrapped = False
    for task, cursor in zip(tasks, cursors):
        idx, w = cursor.draw()
        wrapped = wrapped or w
        accs.append(evaluate(model, (task.inputs[idx], task.labels[idx])))
    return float(np.mean(accs)), wrapped, accs


@dataclass(frozen=True)
class DarState:
    """Carry-over for dynamic average-reward smoothing.

    The blend weight lam * t / t_max grows linearly over the run; it is
    forced to zero for episodes where the data cycle restarted or no
    previous reward exists.
    """

    lam: float
    t: int
    t_max: int
    prev_reward: float | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.lam <= 1:
            raise InvalidConfig(f"lambda must be in [0, 1], got {self.lam}")
        if self.t_max < 1 or self.t < 0:
            raise InvalidConfig(f"bad episode counters t={self.t}, t_max={self.t_max}")


def dar_update(state: DarState, raw_reward: float, wrapped: bool) -> tuple[float, DarState]:
    """Blend the previous smoothed reward into the current raw one.

    smoothed = w * prev + (1 - w) * raw with w = lam * t / t_max, where
    w collapses to 0 when wrapped or on the first episode.
    """
    if state.t >= state.t_max:
        raise InvalidConfig(f"episode index {state.t} >= t_max {state.t_max}")
    if wrapped or state.prev_reward is None:
        weight = 0.0
    else:
        weight = state.lam * state.t / state.t_max
    prev = 0.0 if state.prev_reward is None else state.prev_reward
    smoothed = weight * prev + (1.0 - weight) * raw_reward
    return smoothed, replace(state, t=state.t + 1, prev_reward=smoothed)


@dataclass(frozen=True)
class EpisodeRecord:
    """One reward-log row."""

    episode: int
    raw_reward: float
    smoothed_reward: float
    wrapped: bool
    per_task_acc: tuple[float, ...]


def write_reward_log(path: str | Path, records: list[EpisodeRecord], task_ids: list[str]) -> None:
    """Append-only CSV: episode,raw_reward,smoothed_reward,wrapped,acc_<task>..."""
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(
                ["episode", "raw_reward", "smoothed_reward", "wrapped"]
                + [f"acc_{tid}" for tid in task_ids]
            )
        for rec in records:
            accs = list(rec.per_task_acc) or [0.0] * len(task_ids)
            writer.writerow(
                [rec.episode, f"{rec.raw_reward:.6f}", f"{rec.smoothed_reward:.6f}", int(rec.wrapped)]
                + [f"{a:.6f}" for a in accs]
            )
