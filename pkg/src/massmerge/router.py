"""Data-free projection routing and the nearest-neighbour baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import cosine_similarity, project_residual, softmax_neg
from .merge import NEGLIGIBLE_RTOL, orthogonalized_right_bases
from .subspace import TaskSubspaceBundle

__all__ = [
    "RouterConfig",
    "RoutingDecision",
    "subspace_bases",
    "residuals",
    "gate",
    "route",
    "batched_route",
    "nn_route",
]


@dataclass(frozen=True)
class RouterConfig:
    layer: str
    eta: float = 0.2
    top_k: int = 2
    temperature: float = 1.0
    source: str = "raw"  # "raw" per-task V, or "orthogonalized" V_perp blocks

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.source not in ("raw", "orthogonalized"):
            raise ValueError(f"unknown subspace source {self.source!r}")


@dataclass(frozen=True, eq=False)
class RoutingDecision:
    residuals: np.ndarray
    weights: np.ndarray
    selected: tuple[int, ...]
    layer: str
    # task indices the residuals/weights refer to, when routing over a subset
    candidates: tuple[int, ...] | None = None

    def task_indices(self) -> tuple[int, ...]:
        return self.candidates if self.candidates is not None else tuple(range(len(self.weights)))

    def to_json(self) -> dict:
        return {
            "residuals": [float(r) for r in self.residuals],
            "weights": [float(w) for w in self.weights],
            "selected": list(self.selected),
            "layer": self.layer,
        }


def pool(z) -> np.ndarray:
    """Token-mean for ``tokens x dim`` activations; vectors pass through."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        return z.mean(axis=0)
    if z.ndim != 1:
        raise ValueError(f"activation must be a vector or tokens x dim, got shape {z.shape}")
    return z


def subspace_bases(bundles: Sequence[TaskSubspaceBundle], layer: str, source: str = "raw") -> list[np.ndarray]:
    if not bundles:
        raise ValueError("no task bundles to route over")
    if layer not in bundles[0].factors:
        raise KeyError(f"unknown layer {layer!r}; bundles cover {list(bundles[0].layer_order)}")
    if source == "raw":
        # directions with (numerically) zero singular value carry no task
        # signal; a task with an all-zero delta has an empty subspace
        out = []
        for b in bundles:
            f = b[layer]
            smax = f.S.max() if f.S.size else 0.0
            out.append(f.V[:, f.S > NEGLIGIBLE_RTOL * smax] if smax > 0 else f.V[:, :0])
        return out
    if source == "orthogonalized":
        return orthogonalized_right_bases(bundles, layer)
    raise ValueError(f"unknown subspace source {source!r}")


def residuals_from_bases(z, bases: Sequence[np.ndarray]) -> np.ndarray:
    z = pool(z)
    return np.array([project_residual(z, V) for V in bases])


def residuals(z, bundles: Sequence[TaskSubspaceBundle], layer: str, source: str = "raw") -> np.ndarray:
    """Residual norm of ``z`` after projecting onto each task's right subspace."""
    return residuals_from_bases(z, subspace_bases(bundles, layer, source))


def gate(w, eta: float, top_k: int) -> tuple[int, ...]:
    """Tasks with weight at least ``eta``, capped at the ``top_k`` heaviest.

    Ties go to the lower index. If nothing clears ``eta`` the single heaviest
    task is selected. Returned indices are in ascending order.
    """
    w = np.asarray(w, dtype=np.float64)
    order = sorted(range(w.size), key=lambda i: (-w[i], i))
    keep = [i for i in order if w[i] >= eta][:top_k]
    if not keep:
        keep = order[:1]
    return tuple(sorted(keep))


def _decide(r: np.ndarray, cfg: RouterConfig) -> RoutingDecision:
    w = softmax_neg(r, cfg.temperature)
    return RoutingDecision(r, w, gate(w, cfg.eta, cfg.top_k), cfg.layer)


def route(z, bundles, cfg: RouterConfig, bases=None) -> RoutingDecision:
    """Residuals, softmax over their negatives, then threshold/top-k gating.

    ``bases`` may carry precomputed subspace bases for ``cfg.layer``.
    """
    if bases is None:
        bases = subspace_bases(bundles, cfg.layer, cfg.source)
    return _decide(residuals_from_bases(z, bases), cfg)


def batched_route(Z, bundles, cfg: RouterConfig, bases=None) -> RoutingDecision:
    """Route a whole batch at once using the mean per-sample residual."""
    Z = list(Z)
    if not Z:
        raise ValueError("empty batch")
    if bases is None:
        bases = subspace_bases(bundles, cfg.layer, cfg.source)
    R = np.stack([residuals_from_bases(z, bases) for z in Z])
    return _decide(R.mean(axis=0), cfg)


def nn_route(z, support: Sequence[tuple[np.ndarray, str]]):
    """Task of the support vector with the highest cosine similarity to ``z``."""
    z = pool(z)
    if not support:
        raise ValueError("empty support set")
    if not np.any(z):
        raise ValueError("query vector has zero norm")
    best, best_sim = None, -np.inf
    for vec, task in support:
        s = cosine_similarity(z, vec)
        if s > best_sim:
            best, best_sim = task, s
    return best
