"""Task dataset container and its on-disk cache format.

Cache layout: <stem>.bin holds the inputs as flat f32 little-endian
followed by the labels cast to f32; <stem>.json is the sidecar with
counts and metadata needed to slice the binary back apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, IoFailure


@dataclass(frozen=True)
class TaskDataset:
    """Feature vectors with integer class labels for one task."""

    task_id: str
    class_count: int
    inputs: np.ndarray  # (n, d) float32
    labels: np.ndarray  # (n,) int64

    def __post_init__(self) -> None:
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or len(labels) != len(inputs) or len(inputs) == 0:
            raise InvalidSpec(
                f"task {self.task_id!r}: need matching non-empty inputs/labels, "
                f"got {inputs.shape} and {labels.shape}"
            )
        if self.class_count < 1 or labels.min() < 0 or labels.max() >= self.class_count:
            raise InvalidSpec(f"task {self.task_id!r}: labels out of range [0, {self.class_count})")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


def save_dataset(ds: TaskDataset, stem: str | Path) -> None:
    """Write <stem>.bin and <stem>.json."""
    stem = Path(stem)
    sidecar = {
        "task_id": ds.task_id,
        "class_count": ds.class_count,
        "count": len(ds),
        "input_dim": ds.input_dim,
    }
    try:
        blob = ds.inputs.astype("<f4").tobytes() + ds.labels.astype("<f4").tobytes()
        stem.with_suffix(".bin").write_bytes(blob)
        stem.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {stem}: {exc}") from exc


def load_dataset(stem: str | Path) -> TaskDataset:
    stem = Path(stem)
    try:
        sidecar = json.loads(stem.with_suffix(".json").read_text())
        blob = stem.with_suffix(".bin").read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {stem}: {exc}") from exc
    n, d = int(sidecar["count"]), int(sidecar["input_dim"])
    expected = 4 * (n * d + n)
    if len(blob) != expected:
        raise IoFailure(f"dataset {stem}: {len(blob)} bytes, expected {expected}")
    inputs = np.frombuffer(blob, dtype="<f4", count=n * d).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<f4", count=n, offset=4 * n * d).astype(np.int64)
    return TaskDataset(sidecar["task_id"], int(sidecar["class_count"]), inputs, labels)
