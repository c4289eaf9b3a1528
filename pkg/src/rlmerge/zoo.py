"""Synthetic experimental substrate: tasks, a shared base model, fine-tuning.

The architecture is a small tanh MLP whose every layer is packed as one
checkpoint group [out, in + 1] (weight matrix with bias column). All
hidden layers share one width, so interior layers can be skipped or
stacked without breaking shapes; the first and last layers anchor the
input and output dimensions.

This is the only module that computes gradients. The search path
(environment, operators, rewards, driver) consumes finished checkpoints
and only ever calls `forward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TaskDataset
from .errors import DivergedTraining, InvalidSpec, ShapeMismatch
from .params import Checkpoint, ParamGroup
from .seeding import derive_seed

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class ToyArch:
    """MLP: input_dim -> hidden_dim x hidden_layers -> class_count."""

    input_dim: int = 2
    hidden_dim: int = 16
    hidden_layers: int = 2
    class_count: int = 4

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.class_count) < 1 or self.hidden_layers < 0:
            raise InvalidSpec(f"invalid architecture {self}")

    @property
    def n_layers(self) -> int:
        return self.hidden_layers + 2

    @property
    def arch_id(self) -> str:
        return f"toy-mlp/d{self.input_dim}h{self.hidden_dim}x{self.hidden_layers}c{self.class_count}"

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) per layer, input to head."""
        dims = [(self.hidden_dim, self.input_dim)]
        dims += [(self.hidden_dim, self.hidden_dim)] * self.hidden_layers
        dims.append((self.class_count, self.hidden_dim))
        return dims

    def layer_names(self) -> list[str]:
        return [f"layer_{i:02d}" for i in range(self.n_layers)]


@dataclass(frozen=True)
class TaskSpec:
    """Gaussian-cluster classification task description."""

    task_id: str
    class_count: int
    centers: tuple[tuple[float, ...], ...]  # one point per class
    noise_std: float
    samples_per_class: int
    split_seed: int

    def __post_init__(self) -> None:
        centers = tuple(tuple(float(x) for x in c) for c in self.centers)
        object.__setattr__(self, "centers", centers)
        if len(centers) != self.class_count or self.class_count < 1:
            raise InvalidSpec(f"{self.task_id!r}: need one center per class")
        dims = {len(c) for c in centers}
        if len(dims) != 1:
            raise InvalidSpec(f"{self.task_id!r}: centers of mixed dimension")
        if len(set(centers)) != len(centers):
            raise InvalidSpec(f"{self.task_id!r}: centers must be pairwise distinct")
        if self.noise_std < 0 or self.samples_per_class < 1:
            raise InvalidSpec(f"{self.task_id!r}: bad noise_std or samples_per_class")


def generate_task(spec: TaskSpec) -> tuple[TaskDataset, TaskDataset]:
    """Sample the clusters and return the (train, eval) split.

    Per class: samples_per_class draws of center + noise_std * N(0, I),
    the first 80% into train. Fully determined by spec.split_seed.
    """
    centers = np.asarray(spec.centers, dtype=np.float64)
    rng = np.random.default_rng(derive_seed(spec.split_seed, "sample", spec.task_id))
    n_train = int(TRAIN_FRACTION * spec.samples_per_class)

    train_x, train_y, eval_x, eval_y = [], [], [], []
    for c in range(spec.class_count):
        pts = centers[c] + spec.noise_std * rng.standard_normal(
            (spec.samples_per_class, centers.shape[1])
        )
        train_x.append(pts[:n_train])
        train_y.append(np.full(n_train, c))
        eval_x.append(pts[n_train:])
        eval_y.append(np.full(spec.samples_per_class - n_train, c))

    def build(xs: list[np.ndarray], ys: list[np.ndarray], tag: str) -> TaskDataset:
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys).astype(np.int64)
        order = np.random.default_rng(
            derive_seed(spec.split_seed, "shuffle", tag, spec.task_id)
        ).permutation(len(y))
        return TaskDataset(spec.task_id, spec.class_count, x[order], y[order])

    return build(train_x, train_y, "train"), build(eval_x, eval_y, "eval")


# --- parameter packing -------------------------------------------------------

def _pack(arch_id: str, names: list[str], layers: list[tuple[np.ndarray, np.ndarray]]) -> Checkpoint:
    groups = []
    for name, (w, b) in zip(names, layers):
        block = np.concatenate([w, b[:, None]], axis=1)
        groups.append(ParamGroup(name, block.shape, block.astype(np.float32).reshape(-1)))
    return Checkpoint(arch_id, tuple(groups))


def _unpack(ckpt: Checkpoint) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    for g in ckpt.groups:
        block = g.as_matrix().astype(np.float64)
        layers.append((block[:, :-1], block[:, -1]))
    return layers


def forward(model: Checkpoint, arch: ToyArch | None, inputs: np.ndarray) -> np.ndarray:
    """Run the affine+tanh stack; the final group is the linear head.

    Works for any chain-compatible group sequence, so merged models with
    stacked or skipped interior layers evaluate with the same code path.
    `arch`, when given, pins the expected input and output widths.
    """
    x = np.asarray(inputs, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeMismatch(f"inputs must be (batch, dim), got {x.shape}")
    if not model.groups:
        raise ShapeMismatch("model has no layers")
    first_in = model.groups[0].shape[1] - 1
    last_out = model.groups[-1].shape[0]
    if x.shape[1] != first_in:
        raise ShapeMismatch(f"{x.shape[1]}-dim inputs, first layer expects {first_in}")
    if arch is not None and (first_in != arch.input_dim or last_out != arch.class_count):
        raise ShapeMismatch(
            f"model maps {first_in}->{last_out}, arch wants {arch.input_dim}->{arch.class_count}"
        )
    for i, g in enumerate(model.groups):
        block = g.as_matrix()
        w, b = block[:, :-1], block[:, -1]
        if x.shape[1] != w.shape[1]:
            raise ShapeMismatch(
                f"group {g.name!r} expects {w.shape[1]} inputs, got {x.shape[1]}"
            )
        x = x @ w.T + b
        if i < len(model.groups) - 1:
            x = np.tanh(x)
    return x


# --- training (gradients live here and nowhere else) -------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Plain SGD hyper-parameters for the zoo trainers."""

    lr: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0


def _ce_loss_and_grads(
    layers: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray, y: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy and its gradients via backprop."""
    acts = [x]
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        acts.append(np.tanh(z) if i < len(layers) - 1 else z)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = len(y)
    loss = float(-log_probs[np.arange(n), y].mean())

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w) * (1.0 - acts[i] ** 2)
    return loss, grads


def _sgd_train(
    layers: list[tuple[np.ndarray, np.ndarray]],
    x: np.ndarray,
    y: np.ndarray,
    hyper: TrainConfig,
) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = [(w.copy(), b.copy()) for w, b in layers]
    x64 = x.astype(np.float64)
    for epoch in range(hyper.epochs):
        order = np.random.default_rng(derive_seed(hyper.seed, "epoch", epoch)).permutation(len(y))
        for start in range(0, len(y), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            loss, grads = _ce_loss_and_grads(layers, x64[batch], y[batch])
            if not np.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            layers = [
                (w - hyper.lr * gw, b - hyper.lr * gb)
                for (w, b), (gw, gb) in zip(layers, grads)
            ]
    return layers


def random_init(arch: ToyArch, seed: int) -> Checkpoint:
    """Scaled-Gaussian weights, zero biases."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    layers = []
    for out, d_in in arch.layer_dims():
        layers.append((rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(out, d_in)), np.zeros(out)))
    return _pack(arch.arch_id, arch.layer_names(), layers)


def make_pretrained(arch: ToyArch, tasks: list[TaskDataset], hyper: TrainConfig) -> Checkpoint:
    """Brief training on the union of all tasks from a random init."""
    if not tasks:
        raise InvalidSpec("make_pretrained needs at least one task")
    dims = {t.input_dim for t in tasks} | {arch.input_dim}
    classes = {t.class_count for t in tasks} | {arch.class_count}
    if len(dims) != 1 or len(classes) != 1:
        raise InvalidSpec("tasks must share the architecture's input_dim and class_count")
    init = random_init(arch, hyper.seed)
    if hyper.epochs == 0:
        return init
    x = np.concatenate([t.inputs for t in tasks])
    y = np.concatenate([t.labels for t in tasks])
    layers = _sgd_train(_unpack(init), x, y, hyper)
    return _pack(arch.arch_id, arch.layer_names(), layers)


def train_finetuned(
    pt: Checkpoint, task: TaskDataset, arch: ToyArch, hyper: TrainConfig
) -> Checkpoint:
    """Mini-batch SGD on softmax cross-entropy, starting from pt."""
    if pt.arch_id != arch.arch_id:
        raise ShapeMismatch(f"pretrained arch {pt.arch_id!r} != {arch.arch_id!r}")
    layers = _sgd_train(_unpack(pt), task.inputs, task.labels, hyper)
    return _pack(arch.arch_id, arch.layer_names(), layers)
