"""Fixed merging: TSV-M over task singular vectors, plus baseline mergers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import (
    Checkpoint,
    Head,
    Layer,
    TaskDelta,
    TopologyError,
    apply_deltas,
    check_compatible,
    delta,
)
from .config import MassConfig
from .linalg import RankDeficientError, orthogonalize
from .subspace import TaskSubspaceBundle, build_bundles, filter_redundant, filter_redundant_per_layer

log = logging.getLogger(__name__)

# singular components at or below this fraction of the layer's largest
# singular value are dropped before orthogonalization: they contribute
# nothing to the product and their directions are numerically arbitrary
NEGLIGIBLE_RTOL = 1e-6


class RankBudgetError(ValueError):
    """Concatenated per-task ranks exceed ``min(m, n)`` in strict mode."""


@dataclass(frozen=True, eq=False)
class MergedModel:
    weights: Checkpoint
    provenance: dict = field(default_factory=dict)


@dataclass
class LayerConcat:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    owners: np.ndarray  # bundle position of every column
    ranks: list[int]  # per-bundle rank used after budget reduction


def concat_factors(bundles: Sequence[TaskSubspaceBundle], layer: str, strict: bool = False) -> LayerConcat:
    """Column-wise concatenation of the bundles' factors at ``layer``.

    When the summed rank exceeds ``min(m, n)`` every bundle is cut to
    ``floor(min(m, n) / T)`` unless ``strict`` is set, which raises instead.
    """
    if not bundles:
        raise ValueError("no bundles to concatenate")
    m, n = bundles[0][layer].U.shape[0], bundles[0][layer].V.shape[0]
    ks = [b[layer].rank for b in bundles]
    cap = min(m, n)
    if sum(ks) > cap:
        if strict:
            raise RankBudgetError(f"layer {layer!r}: concatenated rank {sum(ks)} exceeds min(m, n) = {cap}")
        per = max(1, cap // len(bundles))
        ks = [min(k, per) for k in ks]
    facs = [b[layer].head(k) for b, k in zip(bundles, ks)]
    for b, f in zip(bundles, facs):
        if f.U.shape[0] != m or f.V.shape[0] != n:
            raise TopologyError(f"layer {layer!r}: task {b.task_id!r} factors do not match {m}x{n}")
    U = np.concatenate([f.U for f in facs], axis=1)
    S = np.concatenate([f.S for f in facs])
    V = np.concatenate([f.V for f in facs], axis=1)
    owners = np.concatenate([np.full(f.rank, i) for i, f in enumerate(facs)])
    smax = S.max() if S.size else 0.0
    keep = S > NEGLIGIBLE_RTOL * smax if smax > 0 else np.zeros(S.shape, dtype=bool)
    return LayerConcat(U[:, keep], S[keep], V[:, keep], owners[keep], ks)


def _orthogonalize_at(M: np.ndarray, layer: str, side: str) -> np.ndarray:
    try:
        return orthogonalize(M)
    except RankDeficientError as exc:
        raise RankDeficientError(f"layer {layer!r}, {side} factors: {exc}") from None


def tsv_layer_delta(bundles: Sequence[TaskSubspaceBundle], layer: str, strict: bool = False):
    """``U_perp diag(S) V_perp^T`` for one layer; returns ``(delta, concat)``."""
    c = concat_factors(bundles, layer, strict)
    m, n = bundles[0][layer].U.shape[0], bundles[0][layer].V.shape[0]
    if c.S.size == 0:
        return np.zeros((m, n)), c
    Uo = _orthogonalize_at(c.U, layer, "left")
    Vo = _orthogonalize_at(c.V, layer, "right")
    return (Uo * c.S) @ Vo.T, c


def orthogonalized_right_bases(bundles: Sequence[TaskSubspaceBundle], layer: str, strict: bool = False) -> list[np.ndarray]:
    """Per-task column blocks of the orthogonalized right factor ``V_perp``."""
    c = concat_factors(bundles, layer, strict)
    n = bundles[0][layer].V.shape[0]
    if c.S.size == 0:
        return [np.zeros((n, 0)) for _ in bundles]
    Vo = _orthogonalize_at(c.V, layer, "right")
    return [Vo[:, c.owners == i] for i in range(len(bundles))]


def _check_layers(pre: Checkpoint, bundles: Sequence[TaskSubspaceBundle]):
    for b in bundles:
        if list(b.layer_order) != pre.layer_names:
            raise TopologyError(f"task {b.task_id!r} layers {list(b.layer_order)} != {pre.layer_names}")
        for l in pre.layers:
            f = b[l.name]
            if (f.U.shape[0], f.V.shape[0]) != l.shape:
                raise TopologyError(f"task {b.task_id!r} layer {l.name!r}: factors do not match shape {l.shape}")


def tsv_merge(
    pre: Checkpoint,
    bundles: Sequence[TaskSubspaceBundle],
    alpha: float = 1.0,
    *,
    strict: bool = False,
    heads: Sequence[Head] | None = None,
    layer_subsets: Mapping[str, Sequence[int]] | None = None,
    epsilon: float | None = None,
    admitted: Sequence[int] | None = None,
    method: str = "tsv-m",
) -> MergedModel:
    """Merge task singular vectors into ``pre``.

    Per layer the bundles' left and right factors are concatenated, each
    concatenation is replaced by its nearest orthonormal matrix, and
    ``pre + alpha * U_perp diag(S) V_perp^T`` is returned. Bias deltas are
    summed untruncated and scaled by ``alpha``.

    ``layer_subsets`` optionally restricts, per layer, which bundle positions
    take part (layer-wise redundancy filtering).
    """
    bundles = list(bundles)
    if not bundles:
        raise ValueError("tsv_merge needs at least one bundle")
    _check_layers(pre, bundles)
    layers, ranks = [], {}
    for l in pre.layers:
        use = bundles if layer_subsets is None else [bundles[i] for i in layer_subsets[l.name]]
        w = l.weight.astype(np.float64)
        if use:
            d, c = tsv_layer_delta(use, l.name, strict)
            w = w + alpha * d
            ranks[l.name] = c.ranks
        else:
            ranks[l.name] = []
        b = None
        if l.bias is not None:
            badd = np.zeros(l.bias.shape[0])
            for t in use:
                if t.biases.get(l.name) is not None:
                    badd += t.biases[l.name][:, 0]
            b = l.bias.astype(np.float64) + alpha * badd
        layers.append(Layer(l.name, w, b, l.activation))
    prov = {
        "method": method,
        "alpha": alpha,
        "rank_k": ranks,
        "epsilon": epsilon,
        "admitted": list(range(len(bundles))) if admitted is None else list(admitted),
        "tasks": [b.task_id for b in bundles],
    }
    if layer_subsets is not None:
        prov["layer_subsets"] = {k: list(v) for k, v in layer_subsets.items()}
    ck = pre.replace(layers=tuple(layers), heads=pre.heads if heads is None else tuple(heads))
    return MergedModel(ck, prov)


def task_arithmetic_merge(pre: Checkpoint, deltas: Sequence[TaskDelta], alpha: float = 1.0, *, heads=None) -> MergedModel:
    """``pre + alpha * sum_i delta_i`` layer by layer."""
    ck = apply_deltas(pre, deltas, alpha, heads=heads)
    return MergedModel(ck, {"method": "task-arithmetic", "alpha": alpha, "tasks": [d.task_id for d in deltas]})


def weight_average(checkpoints: Sequence[Checkpoint], *, heads=None) -> MergedModel:
    """Elementwise mean of all layer weights and biases.

    Heads are not averaged; by default the union of all input heads (first
    occurrence of each name) is carried over.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("weight_average needs at least one checkpoint")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        check_compatible(first, c)
    N = len(checkpoints)
    layers = []
    for i, l in enumerate(first.layers):
        w = sum(c.layers[i].weight.astype(np.float64) for c in checkpoints) / N
        b = None
        if l.bias is not None:
            b = sum(c.layers[i].bias.astype(np.float64) for c in checkpoints) / N
        layers.append(Layer(l.name, w, b, l.activation))
    if heads is None:
        seen, heads = set(), []
        for c in checkpoints:
            for h in c.heads:
                if h.name not in seen:
                    seen.add(h.name)
                    heads.append(h)
    ck = first.replace(layers=tuple(layers), heads=tuple(heads))
    return MergedModel(ck, {"method": "weight-average", "n_models": N, "tasks": [c.meta.get("task_id", "") for c in checkpoints]})


@dataclass
class FixedMerge:
    merged: MergedModel
    bundles: list[TaskSubspaceBundle]  # every task, in input order
    deltas: list[TaskDelta]
    admitted: list[int]
    layer_subsets: dict[str, list[int]] | None = None


def collect_heads(checkpoints: Sequence[Checkpoint]) -> list[Head]:
    seen, heads = set(), []
    for c in checkpoints:
        for h in c.heads:
            if h.name in seen:
                raise TopologyError(f"head name {h.name!r} appears in more than one checkpoint")
            seen.add(h.name)
            heads.append(h)
    return heads


def fixed_merge(
    pre: Checkpoint,
    finetuned: Sequence[Checkpoint],
    cfg: MassConfig = MassConfig(),
    task_ids: Sequence[str] | None = None,
) -> FixedMerge:
    """Redundancy filter, per-task truncated SVD, then TSV-M over the kept tasks.

    Bundles are built for every task (the router may still consider filtered
    tasks). The merged checkpoint carries the heads of all fine-tuned models.
    """
    finetuned = list(finetuned)
    if not finetuned:
        raise ValueError("no fine-tuned checkpoints given")
    if task_ids is None:
        task_ids = [c.meta.get("task_id", f"task{i}") for i, c in enumerate(finetuned)]
    if len(set(task_ids)) != len(task_ids):
        raise ValueError(f"task ids must be unique, got {list(task_ids)}")
    deltas = [delta(ft, pre, tid) for ft, tid in zip(finetuned, task_ids)]
    subsets = None
    if cfg.filter_scope == "global":
        admitted = filter_redundant(deltas, cfg.epsilon)
    else:
        subsets = filter_redundant_per_layer(deltas, cfg.epsilon)
        admitted = sorted(set().union(*subsets.values()))
    bundles = build_bundles(deltas, cfg.rank)
    heads = collect_heads(finetuned) or list(pre.heads)
    if subsets is None:
        merged = tsv_merge(
            pre, [bundles[i] for i in admitted], cfg.alpha,
            strict=cfg.strict, heads=heads, epsilon=cfg.epsilon, admitted=admitted,
        )
    else:
        merged = tsv_merge(
            pre, bundles, cfg.alpha, strict=cfg.strict, heads=heads,
            layer_subsets=subsets, epsilon=cfg.epsilon, admitted=admitted,
        )
    log.info("fixed merge: admitted %s of %d tasks", admitted, len(finetuned))
    return FixedMerge(merged, bundles, deltas, admitted, subsets)
