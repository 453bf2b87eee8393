"""Per-task truncated singular factors and the redundancy filter."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import (
    TaskDelta,
    TensorRecord,
    flatten,
    read_container,
    write_container,
    LayoutError,
)
from .linalg import cosine_similarity, thin_svd, truncate_svd

__all__ = [
    "LayerFactors",
    "TaskSubspaceBundle",
    "default_rank",
    "decompose_task",
    "build_bundles",
    "filter_redundant",
    "filter_redundant_per_layer",
    "write_bundles",
    "read_bundles",
]


@dataclass(frozen=True, eq=False)
class LayerFactors:
    U: np.ndarray  # m x k
    S: np.ndarray  # k
    V: np.ndarray  # n x k

    @property
    def rank(self) -> int:
        return int(self.S.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T

    def head(self, k: int) -> "LayerFactors":
        return LayerFactors(self.U[:, :k], self.S[:k], self.V[:, :k])


@dataclass(frozen=True, eq=False)
class TaskSubspaceBundle:
    """Truncated SVD factors of one task's per-layer deltas.

    Bias deltas ride along untruncated in ``biases`` (``n x 1`` or ``None``).
    """

    task_id: str
    layer_order: tuple[str, ...]
    factors: Mapping[str, LayerFactors]
    biases: Mapping[str, np.ndarray | None]

    def ranks(self) -> dict[str, int]:
        return {n: self.factors[n].rank for n in self.layer_order}

    def __getitem__(self, layer: str) -> LayerFactors:
        return self.factors[layer]


def default_rank(m: int, n: int, T: int) -> int:
    """Per-task rank under a ``1/T`` compression rate."""
    if min(m, n, T) < 1:
        raise ValueError(f"m, n and T must be positive, got {(m, n, T)}")
    return max(1, min(m, n) // T)


def decompose_task(d: TaskDelta, ranks) -> TaskSubspaceBundle:
    """Truncated thin SVD of every layer delta.

    ``ranks`` is a single int applied to every layer or a mapping from layer
    name to rank.
    """
    factors = {}
    for name in d.layer_order:
        k = ranks[name] if isinstance(ranks, Mapping) else ranks
        svd = thin_svd(d.weights[name])
        if k > svd.rank:
            raise ValueError(f"layer {name!r}: rank {k} exceeds min(m, n) = {svd.rank}")
        t = truncate_svd(svd, int(k))
        factors[name] = LayerFactors(t.U, t.S, t.V)
    return TaskSubspaceBundle(d.task_id, d.layer_order, factors, dict(d.biases))


def build_bundles(deltas: Sequence[TaskDelta], rank: int | Mapping[str, int] | None = None) -> list[TaskSubspaceBundle]:
    """Decompose every task; ``rank=None`` applies the ``1/T`` rule per layer."""
    if not deltas:
        raise ValueError("no task deltas given")
    T = len(deltas)
    out = []
    for d in deltas:
        if rank is None:
            ranks = {n: default_rank(*d.weights[n].shape, T) for n in d.layer_order}
        elif isinstance(rank, Mapping):
            ranks = rank
        else:
            ranks = {n: min(int(rank), min(d.weights[n].shape)) for n in d.layer_order}
        out.append(decompose_task(d, ranks))
    return out


def _greedy_scan(vectors: Sequence[np.ndarray], epsilon: float) -> list[int]:
    if not 0 < epsilon:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    admitted: list[int] = []
    for i, v in enumerate(vectors):
        if not np.any(v):
            raise ValueError(f"task {i} has a zero-norm delta; cosine similarity is undefined")
        best = max((cosine_similarity(v, vectors[j]) for j in admitted), default=-np.inf)
        if best < epsilon:
            admitted.append(i)
    return admitted


def filter_redundant(deltas: Sequence[TaskDelta], epsilon: float = 0.3) -> list[int]:
    """Greedy scan keeping a task only if its signed cosine similarity to every
    already-kept task is strictly below ``epsilon``.

    Returns 0-based indices in input order; the first task is always kept.
    """
    if not deltas:
        raise ValueError("no task deltas given")
    return _greedy_scan([flatten(d) for d in deltas], epsilon)


def filter_redundant_per_layer(deltas: Sequence[TaskDelta], epsilon: float = 0.3) -> dict[str, list[int]]:
    """Layer-wise variant of :func:`filter_redundant`.

    Layers where every task's delta is zero carry nothing to merge and admit
    all tasks.
    """
    if not deltas:
        raise ValueError("no task deltas given")
    out = {}
    for name in deltas[0].layer_order:
        vecs = [flatten(d, layer=name) for d in deltas]
        if not any(np.any(v) for v in vecs):
            out[name] = list(range(len(deltas)))
        else:
            out[name] = _greedy_scan(vecs, epsilon)
    return out


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def bundle_records(bundles: Sequence[TaskSubspaceBundle]) -> list[TensorRecord]:
    recs = []
    for b in bundles:
        for name in b.layer_order:
            f = b.factors[name]
            key = f"{b.task_id}/{name}"
            recs.append(TensorRecord(key, "tsv_u", f.U))
            recs.append(TensorRecord(key, "tsv_s", f.S[:, None]))
            recs.append(TensorRecord(key, "tsv_v", f.V))
            if b.biases.get(name) is not None:
                recs.append(TensorRecord(key, "bias", b.biases[name]))
    return recs


def write_bundles(bundles: Sequence[TaskSubspaceBundle], path, meta: Mapping[str, str] | None = None) -> int:
    if not bundles:
        raise ValueError("no bundles to write")
    order = list(bundles[0].layer_order)
    topology = {"layer_order": order, "tasks": [b.task_id for b in bundles]}
    m = {"kind": "tsv_bundle"}
    m.update(meta or {})
    return write_container(path, bundle_records(bundles), topology, m)


def read_bundles(path) -> list[TaskSubspaceBundle]:
    cont = read_container(path)
    try:
        order = tuple(cont.topology["layer_order"])
        tasks = list(cont.topology["tasks"])
    except (KeyError, TypeError):
        raise LayoutError(f"{path}: not a bundle file (topology lacks layer_order/tasks)") from None
    table = {(t.role, t.name): t.data.astype(np.float64) for t in cont.tensors}
    out = []
    for tid in tasks:
        factors, biases = {}, {}
        for name in order:
            key = f"{tid}/{name}"
            try:
                U, S, V = table[("tsv_u", key)], table[("tsv_s", key)][:, 0], table[("tsv_v", key)]
            except KeyError:
                raise LayoutError(f"{path}: missing factors for {key!r}") from None
            if U.shape[1] != S.shape[0] or V.shape[1] != S.shape[0]:
                raise LayoutError(f"{path}: factor ranks disagree for {key!r}")
            factors[name] = LayerFactors(U, S, V)
            biases[name] = table.get(("bias", key))
        out.append(TaskSubspaceBundle(tid, order, factors, biases))
    return out


def bundle_summary(bundles: Sequence[TaskSubspaceBundle]) -> str:
    return json.dumps({b.task_id: b.ranks() for b in bundles}, sort_keys=True)
