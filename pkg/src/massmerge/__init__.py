"""Subspace-routed adaptive model merging on layered linear models."""

from .checkpoint import Checkpoint, Head, Layer, TaskDelta, delta, read_checkpoint, write_checkpoint
from .config import MassConfig
from .engine import MassModel, adaptive_merge, classify, classify_batched, forward
from .harness import SuiteParams, evaluate, gen_synthetic_suite, layer_sweep, normalized_accuracy
from .merge import fixed_merge, task_arithmetic_merge, tsv_merge, weight_average
from .router import RouterConfig, RoutingDecision, batched_route, nn_route, route
from .subspace import TaskSubspaceBundle, build_bundles, filter_redundant, read_bundles, write_bundles

__version__ = "0.1.0"
