"""Per-layer merging operators: weight averaging, task arithmetic, TIES, DARE.

Each operator consumes aligned ParamGroups from the source models (plus
the pretrained layer where the formula needs it) and returns a new
ParamGroup of the same shape. Arithmetic runs in float64 and is rounded
to float32 once at the end, so the single-input identities (avg of one
layer, task arithmetic with one model and lambda 1, DARE with p = 0)
hold bit-exactly.

Operator ids, stable across config files and the CLI: "avg", "ta",
"ties", "dare".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidConfig, InvalidDropProb, ShapeMismatch, UnknownOperator
from .params import ParamGroup
from .seeding import derive_seed

OPERATOR_IDS = ("avg", "ta", "ties", "dare")


@dataclass(frozen=True)
class MergeOpConfig:
    """Hyper-parameters shared by all operators.

    ta_lambda is the scaling coefficient applied to the combined task
    vector by task arithmetic, TIES, and DARE alike. op_ids fixes the
    order in which merge actions index into the operator set.
    """

    ta_lambda: float = 0.5
    ties_keep_fraction: float = 0.2
    dare_drop_prob: float = 0.9
    dare_seed: int = 0
    op_ids: tuple[str, ...] = OPERATOR_IDS

    def __post_init__(self) -> None:
        if self.ta_lambda < 0:
            raise InvalidConfig(f"ta_lambda must be non-negative, got {self.ta_lambda}")
        if not 0 < self.ties_keep_fraction <= 1:
            raise InvalidConfig(
                f"ties_keep_fraction must be in (0, 1], got {self.ties_keep_fraction}"
            )
        if not 0 <= self.dare_drop_prob < 1:
            raise InvalidDropProb(
                f"dare_drop_prob must be in [0, 1), got {self.dare_drop_prob}"
            )
        if self.dare_seed < 0:
            raise InvalidConfig("dare_seed must be unsigned")
        object.__setattr__(self, "op_ids", tuple(self.op_ids))
        unknown = [op for op in self.op_ids if op not in OPERATOR_IDS]
        if unknown or not self.op_ids:
            raise UnknownOperator(f"op_ids must be a non-empty subset of {OPERATOR_IDS}, got {self.op_ids}")


def _check_same_shape(layers: list[ParamGroup] | tuple[ParamGroup, ...], ref: ParamGroup) -> None:
    for layer in layers:
        if layer.shape != ref.shape:
            raise ShapeMismatch(
                f"layer {layer.name!r} shape {layer.shape} != {ref.shape}"
            )


def _stack64(layers: list[ParamGroup]) -> np.ndarray:
    return np.stack([g.values.astype(np.float64) for g in layers], axis=0)


def weight_average(layers: list[ParamGroup]) -> ParamGroup:
    """Elementwise arithmetic mean of the given layers."""
    if not layers:
        raise EmptyInput("weight_average needs at least one layer")
    _check_same_shape(layers, layers[0])
    mean = _stack64(layers).mean(axis=0)
    return ParamGroup(layers[0].name, layers[0].shape, mean.astype(np.float32))


def _task_deltas(pt_layer: ParamGroup, ft_layers: list[ParamGroup]) -> np.ndarray:
    if not ft_layers:
        raise EmptyInput("need at least one fine-tuned layer")
    _check_same_shape(ft_layers, pt_layer)
    pt = pt_layer.values.astype(np.float64)
    return _stack64(ft_layers) - pt


def task_arithmetic(
    pt_layer: ParamGroup, ft_layers: list[ParamGroup], cfg: MergeOpConfig
) -> ParamGroup:
    """pt + lambda * sum_i (ft_i - pt), elementwise."""
    deltas = _task_deltas(pt_layer, ft_layers)
    merged = pt_layer.values.astype(np.float64) + cfg.ta_lambda * deltas.sum(axis=0)
    return ParamGroup(pt_layer.name, pt_layer.shape, merged.astype(np.float32))


def _trim_top_magnitude(deltas: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ceil(keep_fraction * n) largest-|.| entries per row.

    Magnitude ties at the boundary keep the lower index.
    """
    n = deltas.shape[1]
    keep = int(np.ceil(keep_fraction * n))
    trimmed = np.zeros_like(deltas)
    for i in range(deltas.shape[0]):
        # stable sort on -|x| resolves equal magnitudes by lower index
        order = np.argsort(-np.abs(deltas[i]), kind="stable")
        kept = order[:keep]
        trimmed[i, kept] = deltas[i, kept]
    return trimmed


def ties_merge(
    pt_layer: ParamGroup, ft_layers: list[ParamGroup], cfg: MergeOpConfig
) -> ParamGroup:
    """Trim / elect-sign / disjoint-mean combination of the task deltas.

    Per task delta: keep only the top ceil(keep_fraction * n) entries by
    magnitude. Elect a sign per index from the sum of trimmed entries
    (an exact zero sum elects +). Average only the trimmed entries that
    match the elected sign, zero where none do, then apply the combined
    vector with the shared lambda.
    """
    deltas = _task_deltas(pt_layer, ft_layers)
    trimmed = _trim_top_magnitude(deltas, cfg.ties_keep_fraction)

    sign_sum = trimmed.sum(axis=0)
    elected = np.where(sign_sum >= 0.0, 1.0, -1.0)  # tie (sum == 0) elects +

    agrees = np.sign(trimmed) == elected
    contributions = np.where(agrees, trimmed, 0.0)
    counts = agrees.sum(axis=0)
    merged = np.divide(
        contributions.sum(axis=0),
        counts,
        out=np.zeros(deltas.shape[1]),
        where=counts > 0,
    )
    out = pt_layer.values.astype(np.float64) + cfg.ta_lambda * merged
    return ParamGroup(pt_layer.name, pt_layer.shape, out.astype(np.float32))


def _dare_keep_mask(cfg: MergeOpConfig, model_index: int, layer_name: str, n: int) -> np.ndarray:
    """Counter-based keep mask: element j survives iff u_j >= p.

    The Philox stream is keyed by (dare_seed, model index, layer name),
    and element j reads position j of that stream, so the mask depends
    only on the key tuple, never on call order or thread count.
    """
    key = derive_seed(cfg.dare_seed, "dare", model_index, layer_name, bits=128)
    uniforms = np.random.Generator(np.random.Philox(key=key)).random(n)
    return uniforms >= cfg.dare_drop_prob


def dare_merge(
    pt_layer: ParamGroup, ft_layers: list[ParamGroup], cfg: MergeOpConfig
) -> ParamGroup:
    """Drop-and-rescale each task delta, then combine as task arithmetic.

    Each delta entry is zeroed with probability p and the survivors are
    rescaled by 1/(1-p), which leaves the delta unbiased in expectation.
    """
    if not 0 <= cfg.dare_drop_prob < 1:
        raise InvalidDropProb(f"drop probability {cfg.dare_drop_prob} >= 1")
    deltas = _task_deltas(pt_layer, ft_layers)
    n = deltas.shape[1]
    total = np.zeros(n)
    for i in range(deltas.shape[0]):
        keep = _dare_keep_mask(cfg, i, pt_layer.name, n)
        total += np.where(keep, deltas[i], 0.0) / (1.0 - cfg.dare_drop_prob)
    merged = pt_layer.values.astype(np.float64) + cfg.ta_lambda * total
    return ParamGroup(pt_layer.name, pt_layer.shape, merged.astype(np.float32))


def apply_operator(
    op_id: str,
    pt_layer: ParamGroup,
    ft_layers: list[ParamGroup],
    cfg: MergeOpConfig,
) -> ParamGroup:
    """Dispatch one operator id onto aligned layers."""
    if op_id == "avg":
        return weight_average(list(ft_layers))
    if op_id == "ta":
        return task_arithmetic(pt_layer, ft_layers, cfg)
    if op_id == "ties":
        return ties_merge(pt_layer, ft_layers, cfg)
    if op_id == "dare":
        return dare_merge(pt_layer, ft_layers, cfg)
    raise UnknownOperator(f"unknown operator id {op_id!r}")
