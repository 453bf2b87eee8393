"""Layered-model executor and two-pass adaptive inference."""

from __future__ import annotations

import logging
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .checkpoint import Checkpoint, Layer
from .config import MassConfig
from .merge import MergedModel, tsv_merge
from .router import RouterConfig, RoutingDecision, batched_route, route, subspace_bases
from .subspace import TaskSubspaceBundle

log = logging.getLogger(__name__)

__all__ = [
    "ForwardTrace",
    "NonFiniteActivationError",
    "forward",
    "adaptive_merge",
    "Prediction",
    "MassModel",
    "classify",
    "classify_batched",
]


class NonFiniteActivationError(FloatingPointError):
    pass


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "gelu":
        return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    inputs: dict[str, np.ndarray]  # captured layer inputs
    representation: np.ndarray  # final layer output
    logits: dict[str, np.ndarray] = field(default_factory=dict)


def apply_layer(layer: Layer, z: np.ndarray) -> np.ndarray:
    out = z @ layer.weight.T.astype(np.float64)
    if layer.bias is not None:
        out = out + layer.bias
    return _activate(out, layer.activation)


def forward(model: Checkpoint, x, capture: Iterable[str] = (), heads: Iterable[str] | None = None) -> ForwardTrace:
    """Run ``x`` through every layer, recording the inputs of ``capture`` layers.

    ``x`` is a vector or a ``tokens x dim`` array. Heads named in ``heads``
    are evaluated on the (token-mean) final representation.
    """
    z = np.asarray(x, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] != model.input_dim:
        raise ValueError(f"input has shape {z.shape}; model expects last dim {model.input_dim}")
    capture = set(capture)
    unknown = capture - set(model.layer_names)
    if unknown:
        raise KeyError(f"unknown layer(s) to capture: {sorted(unknown)}")
    inputs = {}
    for layer in model.layers:
        if layer.name in capture:
            inputs[layer.name] = z
        # overflow is reported below with the layer name
        with np.errstate(over="ignore", invalid="ignore"):
            z = apply_layer(layer, z)
        if not np.all(np.isfinite(z)):
            raise NonFiniteActivationError(f"non-finite activation after layer {layer.name!r}")
    rep = z.mean(axis=0) if z.ndim == 2 else z
    logits = {}
    for name in heads or ():
        h = model.head(name)
        logits[name] = h.weight.astype(np.float64) @ rep + h.bias
    return ForwardTrace(inputs, rep, logits)


def adaptive_merge(
    pre: Checkpoint,
    bundles: Sequence[TaskSubspaceBundle],
    omega: Iterable[int],
    alpha: float = 1.0,
    mode: str = "tsv",
    *,
    strict: bool = False,
    heads=None,
) -> MergedModel:
    """Merge only the selected tasks into ``pre``.

    ``mode="tsv"`` runs TSV-M over the selection; ``mode="plain-sum"`` adds
    ``alpha * sum U_i diag(S_i) V_i^T`` with no orthogonalization.
    """
    sel = sorted(set(int(i) for i in omega))
    if not sel:
        raise ValueError("empty task selection")
    if sel[0] < 0 or sel[-1] >= len(bundles):
        raise IndexError(f"task index out of range in {sel} (have {len(bundles)} tasks)")
    chosen = [bundles[i] for i in sel]
    if mode == "tsv":
        m = tsv_merge(pre, chosen, alpha, strict=strict, heads=heads, admitted=sel, method="adaptive-tsv")
        return m
    if mode != "plain-sum":
        raise ValueError(f"unknown merge mode {mode!r}")
    layers = []
    for l in pre.layers:
        w = l.weight.astype(np.float64) + alpha * sum(b[l.name].reconstruct() for b in chosen)
        bias = None
        if l.bias is not None:
            badd = sum((b.biases[l.name][:, 0] for b in chosen if b.biases.get(l.name) is not None), np.zeros(l.bias.shape[0]))
            bias = l.bias.astype(np.float64) + alpha * badd
        layers.append(Layer(l.name, w, bias, l.activation))
    ck = pre.replace(layers=tuple(layers), heads=pre.heads if heads is None else tuple(heads))
    return MergedModel(ck, {"method": "adaptive-plain-sum", "alpha": alpha, "admitted": sel,
                            "tasks": [b.task_id for b in chosen]})


@dataclass(frozen=True)
class Prediction:
    task_index: int
    task_id: str
    class_index: int
    logit: float
    decision: RoutingDecision

    def to_json(self, input_id, task_ids: Sequence[str]) -> dict:
        d = self.decision
        return {
            "input_id": input_id,
            "selected_tasks": [task_ids[i] for i in d.selected],
            "task_weights": {task_ids[i]: float(w) for i, w in zip(d.task_indices(), d.weights)},
            "predicted_task": self.task_id,
            "predicted_class": self.class_index,
            "logit": self.logit,
        }


class MassModel:
    """Two-pass adaptive classifier.

    First pass through the fixed merge ``merged`` captures the routing layer
    input; the router picks tasks; those tasks' subspaces are merged into
    ``pre``; a second pass through that model is scored by the selected
    tasks' heads only. Adaptive merges are memoised per selected set in a
    bounded LRU cache.

    ``stats`` counts forward passes, head evaluations and adaptive-merge
    requests for instrumentation.
    """

    def __init__(
        self,
        pre: Checkpoint,
        merged: MergedModel | Checkpoint,
        bundles: Sequence[TaskSubspaceBundle],
        cfg: MassConfig = MassConfig(),
        *,
        layer: str | None = None,
        admitted: Sequence[int] | None = None,
    ):
        self.pre = pre
        self.merged = merged.weights if isinstance(merged, MergedModel) else merged
        self.bundles = list(bundles)
        self.cfg = cfg
        self.task_ids = [b.task_id for b in self.bundles]
        self.layer = layer or cfg.layer
        if self.layer is None:
            raise ValueError("a routing layer is required")
        if cfg.router_candidates == "admitted-only" and admitted is not None:
            self.candidates = tuple(sorted(admitted))
        else:
            self.candidates = tuple(range(len(self.bundles)))
        self.router_cfg = RouterConfig(self.layer, cfg.eta, cfg.top_k, cfg.temperature, cfg.subspace)
        cand_bundles = [self.bundles[i] for i in self.candidates]
        self._bases = subspace_bases(cand_bundles, self.layer, cfg.subspace)
        self._heads = {h.name: h for h in self.merged.heads}
        missing = [t for t in self.task_ids if t not in self._heads]
        if missing:
            raise KeyError(f"merged model has no head for task(s) {missing}")
        self._cache: OrderedDict[frozenset, Checkpoint] = OrderedDict()
        self._lock = threading.Lock()
        self.stats: Counter = Counter()

    # -- passes -----------------------------------------------------------

    def _forward(self, model: Checkpoint, x, capture=(), heads=None) -> ForwardTrace:
        with self._lock:
            self.stats["forward"] += 1
            for h in heads or ():
                self.stats["head"] += 1
                self.stats[f"head:{h}"] += 1
        return forward(model, x, capture, heads)

    def first_pass(self, x) -> np.ndarray:
        return self._forward(self.merged, x, capture=(self.layer,)).inputs[self.layer]

    def _lift(self, d: RoutingDecision) -> RoutingDecision:
        sel = tuple(self.candidates[i] for i in d.selected)
        return RoutingDecision(d.residuals, d.weights, sel, d.layer, self.candidates)

    def route(self, z) -> RoutingDecision:
        return self._lift(route(z, None, self.router_cfg, bases=self._bases))

    def route_batch(self, Z) -> RoutingDecision:
        return self._lift(batched_route(Z, None, self.router_cfg, bases=self._bases))

    def merged_for(self, omega) -> Checkpoint:
        """Adaptive merge for the selected tasks (memoised)."""
        key = frozenset(int(i) for i in omega)
        with self._lock:
            self.stats["adaptive_merge"] += 1
            hit = self._cache.get(key)
            log.info("adaptive_merge selected=%s cached=%s", sorted(key), hit is not None)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
            # computed under the lock so each selection is merged at most once
            self.stats["adaptive_merge_compute"] += 1
            m = adaptive_merge(
                self.pre, self.bundles, key, self.cfg.alpha, self.cfg.merge_mode,
                strict=self.cfg.strict, heads=self.merged.heads,
            ).weights
            self._cache[key] = m
            if len(self._cache) > self.cfg.cache_size:
                self._cache.popitem(last=False)
            return m

    def _select_head(self, model: Checkpoint, x, omega, decision) -> Prediction:
        names = [self.task_ids[i] for i in omega]
        trace = self._forward(model, x, heads=names)
        best = None
        for i, name in zip(omega, names):
            z = trace.logits[name]
            c = int(np.argmax(z))
            if best is None or z[c] > best[2]:
                best = (i, c, float(z[c]))
        i, c, v = best
        return Prediction(i, self.task_ids[i], c, v, decision)

    # -- public -----------------------------------------------------------

    def classify(self, x) -> Prediction:
        decision = self.route(self.first_pass(x))
        model = self.merged_for(decision.selected)
        return self._select_head(model, x, decision.selected, decision)

    def classify_batched(self, X) -> list[Prediction]:
        X = list(X)
        if not X:
            raise ValueError("empty batch")
        decision = self.route_batch([self.first_pass(x) for x in X])
        model = self.merged_for(decision.selected)
        return [self._select_head(model, x, decision.selected, decision) for x in X]


def classify(x, pre, merged, bundles, cfg: MassConfig = MassConfig(), layer=None):
    """One-shot functional form; returns ``(task_index, class_index, decision)``."""
    p = MassModel(pre, merged, bundles, cfg, layer=layer).classify(x)
    return p.task_index, p.class_index, p.decision


def classify_batched(X, pre, merged, bundles, cfg: MassConfig = MassConfig(), layer=None):
    return [(p.task_index, p.class_index) for p in MassModel(pre, merged, bundles, cfg, layer=layer).classify_batched(X)]
