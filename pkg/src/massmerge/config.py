"""Run configuration shared by the library pipelines and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

MERGE_MODES = ("tsv", "plain-sum")
FILTER_SCOPES = ("global", "per-layer")
ROUTER_CANDIDATES = ("all", "admitted-only")
SUBSPACE_SOURCES = ("raw", "orthogonalized")


@dataclass(frozen=True)
class MassConfig:
    """Hyperparameters for fixed merging, routing and adaptive merging.

    ``rank=None`` applies the ``1/T`` compression rule per layer and
    ``layer=None`` lets the caller pick the routing layer (the synthetic
    suite uses its planted layer).
    """

    alpha: float = 1.0
    rank: int | None = None
    epsilon: float = 0.3
    eta: float = 0.2
    top_k: int = 2
    temperature: float = 1.0
    layer: str | None = None
    merge_mode: str = "tsv"
    filter_scope: str = "global"
    router_candidates: str = "all"
    subspace: str = "raw"
    strict: bool = False
    cache_size: int = 64

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        for name, allowed in (
            ("merge_mode", MERGE_MODES),
            ("filter_scope", FILTER_SCOPES),
            ("router_candidates", ROUTER_CANDIDATES),
            ("subspace", SUBSPACE_SOURCES),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **kw) -> "MassConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MassConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "MassConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
