"""Parameter containers and the binary checkpoint file format.

A model is an ordered list of named parameter groups; one group bundles
everything belonging to one logical layer (for the affine layers used
here: the weight matrix with the bias appended as a final column, shape
[out, in + 1]). All values are 32-bit floats. Containers are immutable
once constructed; every operator returns new containers.

File layout (single binary file, little-endian):
    bytes 0-3    magic "RMMC"
    bytes 4-7    format version u32 = 1
    bytes 8-11   manifest length u32
    ...          UTF-8 JSON manifest {arch_id, groups: [{name, shape}]}
    ...          concatenated raw f32 blobs in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchMismatch,
    BadMagic,
    EmptyCheckpoint,
    IoFailure,
    ShapeMismatch,
    TruncatedFile,
)

MAGIC = b"RMMC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class ParamGroup:
    """One named flat f32 array with its logical shape."""

    name: str
    shape: tuple[int, ...]
    values: np.ndarray  # flat float32, row-major

    def __post_init__(self) -> None:
        if not self.name:
            raise ShapeMismatch("group name must be non-empty")
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s <= 0 for s in shape):
            raise ShapeMismatch(f"group {self.name!r}: shape must be non-empty and positive, got {shape}")
        values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if values.size != int(np.prod(shape)):
            raise ShapeMismatch(
                f"group {self.name!r}: {values.size} values for shape {shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    def as_matrix(self) -> np.ndarray:
        """Values reshaped to `shape` (read-only view)."""
        return self.values.reshape(self.shape)


def _check_unique_names(groups: tuple[ParamGroup, ...]) -> None:
    names = [g.name for g in groups]
    if len(set(names)) != len(names):
        raise ShapeMismatch(f"duplicate group names: {names}")


@dataclass(frozen=True)
class Checkpoint:
    """Ordered parameter groups of one model plus its architecture tag.

    Checkpoints with equal arch_id are layer-aligned: identical group
    names, order, and shapes.
    """

    arch_id: str
    groups: tuple[ParamGroup, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        _check_unique_names(self.groups)

    @property
    def n_layers(self) -> int:
        return len(self.groups)

    def same_family(self, other: Checkpoint) -> bool:
        return (
            self.arch_id == other.arch_id
            and len(self.groups) == len(other.groups)
            and all(
                a.name == b.name and a.shape == b.shape
                for a, b in zip(self.groups, other.groups)
            )
        )

    def allclose_bits(self, other: Checkpoint) -> bool:
        """Bit-exact equality, including names, shapes, and arch_id."""
        return (
            self.same_family(other)
            and all(
                a.values.tobytes() == b.values.tobytes()
                for a, b in zip(self.groups, other.groups)
            )
        )


@dataclass(frozen=True)
class TaskVector:
    """Groupwise fine-tuned minus pretrained parameter differences."""

    arch_id: str
    groups: tuple[ParamGroup, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        _check_unique_names(self.groups)


def task_vector(ft: Checkpoint, pt: Checkpoint) -> TaskVector:
    """Elementwise ft - pt per group. Both must share an architecture."""
    if ft.arch_id != pt.arch_id:
        raise ArchMismatch(f"arch_id {ft.arch_id!r} != {pt.arch_id!r}")
    if not ft.same_family(pt):
        raise ArchMismatch("checkpoints share arch_id but group layout differs")
    groups = []
    for gf, gp in zip(ft.groups, pt.groups):
        # subtract in f64 so the result is the correctly rounded difference
        diff = (gf.values.astype(np.float64) - gp.values.astype(np.float64)).astype(np.float32)
        groups.append(ParamGroup(gf.name, gf.shape, diff))
    return TaskVector(ft.arch_id, tuple(groups))


def _manifest_bytes(ckpt: Checkpoint) -> bytes:
    manifest = {
        "arch_id": ckpt.arch_id,
        "groups": [{"name": g.name, "shape": list(g.shape)} for g in ckpt.groups],
    }
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write `ckpt` to `path`. Byte-identical output for equal checkpoints."""
    if not ckpt.groups:
        raise EmptyCheckpoint("refusing to save a checkpoint with no groups")
    manifest = _manifest_bytes(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
            fh.write(manifest)
            for g in ckpt.groups:
                fh.write(g.values.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint, bit-exactly."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: {len(data)} bytes is shorter than the header")
    magic, version, manifest_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BadMagic(f"{path}: unsupported format version {version}")
    offset = _HEADER.size
    if len(data) < offset + manifest_len:
        raise TruncatedFile(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[offset : offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagic(f"{path}: unreadable manifest: {exc}") from exc
    offset += manifest_len

    if not isinstance(manifest, dict) or "arch_id" not in manifest or "groups" not in manifest:
        raise BadMagic(f"{path}: manifest missing arch_id/groups")
    groups = []
    for entry in manifest["groups"]:
        name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape))
        nbytes = count * 4
        if len(data) < offset + nbytes:
            raise TruncatedFile(
                f"{path}: group {name!r} wants {count} floats, blob exhausted"
            )
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        groups.append(ParamGroup(name, shape, values))
    if offset != len(data):
        raise ShapeMismatch(f"{path}: {len(data) - offset} trailing bytes after last blob")
    return Checkpoint(manifest["arch_id"], tuple(groups))
