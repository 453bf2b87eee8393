"""Synthetic multi-task benchmark, metrics and the routing-layer sweep.

The synthetic suite stands in for real fine-tuned checkpoints. Every task's
delta at the planted layer is ``A_i diag(s_i) B_i^T`` where ``B_i`` is the
task's planted right subspace, and the task's inputs are pulled back from
that subspace through the (frozen) layers below, so ground-truth routing is
known exactly.

Above the planted layer each task's update only weakly follows its own
features (``align``), and all tasks also make a near-identical update along
a feature every input carries (the pretrained bias direction, scaled by
``common``). Summing task vectors over-counts that shared update, which is
the interference the merge methods differ on.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, Head, Layer, encode_checkpoint, read_checkpoint, write_checkpoint
from .config import MassConfig
from .engine import MassModel, forward
from .merge import fixed_merge, task_arithmetic_merge, weight_average
from .router import RouterConfig, route, subspace_bases

log = logging.getLogger(__name__)

METHODS = ("mass", "mass-batched", "tsv-m", "task-arithmetic", "weight-average", "fine-tuned", "zero-shot")
REPORT_VERSION = 1


@dataclass(frozen=True)
class SuiteParams:
    n_tasks: int = 4
    widths: tuple[int, ...] = (32, 128, 32, 128, 32)
    rank: int = 4
    samples_per_task: int = 100
    noise: float = 0.1
    overlap: float = 0.0
    seed: int = 0
    planted_layer: int | None = None
    n_classes: int = 5
    strength: float = 1.0
    bias: float = 1.0
    common: float = 0.5
    jitter: float = 0.3
    align: float = 0.1
    tail: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["widths"] = list(self.widths)
        return d


@dataclass(eq=False)
class TaskData:
    task_id: str
    inputs: np.ndarray  # N x d0
    labels: np.ndarray  # N
    clean_inputs: np.ndarray


@dataclass(eq=False)
class SyntheticSuite:
    params: SuiteParams
    pre: Checkpoint
    finetuned: list[Checkpoint]
    data: list[TaskData]
    planted_bases: list[np.ndarray] | None  # right subspaces at the planted layer
    heads: list[Head]

    @property
    def task_ids(self) -> list[str]:
        return [d.task_id for d in self.data]

    @property
    def planted_layer(self) -> str:
        return self.pre.layer_names[_planted_index(self.params)]

    def save(self, directory) -> Path:
        """Write checkpoints, per-task JSON-lines data and ``suite.json``."""
        root = Path(directory)
        (root / "data").mkdir(parents=True, exist_ok=True)
        write_checkpoint(self.pre, root / "pre.mtsv")
        for c, d in zip(self.finetuned, self.data):
            write_checkpoint(c, root / f"{d.task_id}.mtsv")
            with open(root / "data" / f"{d.task_id}.jsonl", "w") as fh:
                for k, (x, y) in enumerate(zip(d.inputs, d.labels)):
                    fh.write(json.dumps({"id": f"{d.task_id}-{k:04d}", "x": x.tolist(), "label": int(y), "task": d.task_id}) + "\n")
        meta = {"params": self.params.to_dict(), "tasks": self.task_ids, "planted_layer": self.planted_layer,
                "suite_hash": self.suite_hash()}
        (root / "suite.json").write_text(json.dumps(meta, indent=2) + "\n")
        return root

    def suite_hash(self) -> str:
        h = hashlib.sha256()
        h.update(encode_checkpoint(self.pre))
        for c in self.finetuned:
            h.update(encode_checkpoint(c))
        for d in self.data:
            h.update(d.task_id.encode())
            h.update(np.ascontiguousarray(d.inputs, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(d.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def load_suite(directory) -> SyntheticSuite:
    """Read a suite written by :meth:`SyntheticSuite.save`.

    Planted bases are not stored; everything evaluation needs is.
    """
    root = Path(directory)
    meta = json.loads((root / "suite.json").read_text())
    pre = read_checkpoint(root / "pre.mtsv")
    fts, data = [], []
    for t in meta["tasks"]:
        fts.append(read_checkpoint(root / f"{t}.mtsv"))
        rows = [json.loads(line) for line in (root / "data" / f"{t}.jsonl").read_text().splitlines() if line.strip()]
        X = np.array([r["x"] for r in rows], dtype=np.float64)
        data.append(TaskData(t, X, np.array([r["label"] for r in rows], dtype=np.int64), X))
    heads = [h for c in fts for h in c.heads]
    return SyntheticSuite(SuiteParams(**meta["params"]), pre, fts, data, None, heads)


def _planted_index(p: SuiteParams) -> int:
    L = len(p.widths) - 1
    return L // 2 if p.planted_layer is None else p.planted_layer


def _orthonormal(rng, m: int, n: int) -> np.ndarray:
    """Random ``m x n`` matrix with orthonormal columns (``m >= n``) or rows."""
    if m >= n:
        q, r = np.linalg.qr(rng.standard_normal((m, n)))
        return q * np.sign(np.diag(r))
    return _orthonormal(rng, n, m).T


def _orth_cols(M: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(M)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def gen_synthetic_suite(params: SuiteParams | None = None, **kw) -> SyntheticSuite:
    """Generate a seeded multi-task suite with planted task subspaces.

    Keyword arguments override fields of :class:`SuiteParams`. The same
    parameters always give a bit-identical suite.
    """
    p = SuiteParams(**kw) if params is None else (params if not kw else SuiteParams(**{**params.__dict__, **kw}))
    T, r, widths = p.n_tasks, p.rank, tuple(int(w) for w in p.widths)
    L = len(widths) - 1
    if L < 1:
        raise ValueError("need at least two widths (one layer)")
    if T < 1 or r < 1:
        raise ValueError("n_tasks and rank must be positive")
    if not 0.0 <= p.overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {p.overlap}")
    pl = _planted_index(p)
    if not 0 <= pl < L:
        raise ValueError(f"planted layer {pl} out of range for {L} layers")
    n_p, m_p = widths[pl], widths[pl + 1]
    need = (T + (1 if p.overlap > 0 else 0)) * r
    if need > n_p:
        raise ValueError(f"infeasible: {T} tasks of rank {r} need {need} dims at the planted layer, width is {n_p}")
    if r > m_p:
        raise ValueError(f"infeasible: rank {r} exceeds planted layer output width {m_p}")
    rng = np.random.default_rng(p.seed)
    names = [f"layer{i}" for i in range(L)]

    pre_w = [_orthonormal(rng, widths[i + 1], widths[i]) for i in range(L)]

    # planted right subspaces; principal cosines between tasks equal overlap
    Q = _orthonormal(rng, n_p, need)
    common = Q[:, T * r :] if p.overlap > 0 else None
    bases = []
    for i in range(T):
        B = Q[:, i * r : (i + 1) * r]
        if common is not None:
            B = np.sqrt(1.0 - p.overlap) * B + np.sqrt(p.overlap) * common
        bases.append(B)

    def spectrum(k=r):
        return p.strength * np.sort(rng.uniform(1.0, 2.0, k))[::-1]

    def tail(m, n):
        return p.tail * p.strength * rng.standard_normal((m, n)) / np.sqrt(max(m, n))

    def jittered(v):
        return _orth_cols(v + p.jitter * rng.standard_normal(v.shape) / np.sqrt(v.shape[0]))

    # pretrained biases from the planted layer up give every task's
    # activations a common component; all tasks also update along it
    pre_b = [None] * L
    for j in range(pl, L):
        b = rng.standard_normal(widths[j + 1])
        pre_b[j] = p.bias * b / np.linalg.norm(b)
    common_v, common_u = {}, {}
    c = np.zeros(widths[pl + 1]) if pl + 1 < L else None
    for j in range(pl + 1, L):
        c = (pre_w[j - 1] @ c if j > pl + 1 else 0.0) + pre_b[j - 1]
        common_v[j] = (c / np.linalg.norm(c))[:, None]
        common_u[j] = _orthonormal(rng, widths[j + 1], 1)
    common_s = {j: spectrum(1) for j in common_v}

    # chain of frozen layers below the planted one
    M = np.eye(widths[0])
    for i in range(pl):
        M = pre_w[i] @ M
    Minv = np.linalg.pinv(M)

    deltas = [[np.zeros((widths[i + 1], widths[i])) for i in range(L)] for _ in range(T)]
    for t in range(T):
        A = _orthonormal(rng, m_p, r)
        deltas[t][pl] = (A * spectrum()) @ bases[t].T + tail(m_p, n_p)
        span = bases[t]
        for i in range(pl, L - 1):
            span = _orth_cols((pre_w[i] + deltas[t][i]) @ span)
            j = i + 1
            # right factor only partly follows the task's own activations
            R = _orth_cols(np.sqrt(p.align) * span + np.sqrt(1.0 - p.align) * _orthonormal(rng, widths[j], r))
            A2 = _orthonormal(rng, widths[j + 1], r)
            shared = p.common * (jittered(common_u[j]) * common_s[j]) @ jittered(common_v[j]).T
            deltas[t][j] = (A2 * spectrum()) @ R.T + shared + tail(widths[j + 1], widths[j])

    pre = Checkpoint(tuple(Layer(n, w, b) for n, w, b in zip(names, pre_w, pre_b)), meta={"role": "pretrained", "seed": str(p.seed)})
    task_ids = [f"task{t}" for t in range(T)]
    heads = [Head(task_ids[t], rng.standard_normal((p.n_classes, widths[-1])), np.zeros(p.n_classes)) for t in range(T)]
    fts = []
    for t in range(T):
        layers = tuple(Layer(n, w + d, b) for n, w, d, b in zip(names, pre_w, deltas[t], pre_b))
        fts.append(Checkpoint(layers, (heads[t],), {"task_id": task_ids[t], "seed": str(p.seed)}))

    data = []
    for t in range(T):
        N = p.samples_per_task
        c = rng.standard_normal((N, r))
        clean_z = c @ bases[t].T
        g = rng.standard_normal((N, n_p))
        scale = np.linalg.norm(clean_z, axis=1, keepdims=True) / np.sqrt(n_p)
        noisy_z = clean_z + p.noise * scale * g
        clean_x = clean_z @ Minv.T
        x = noisy_z @ Minv.T
        if not np.allclose(clean_x @ M.T, clean_z, atol=1e-8 * max(1.0, np.abs(clean_z).max())):
            raise ValueError("planted layer is not reachable from the input through the layers below it")
        labels = np.array([int(np.argmax(forward(fts[t], xi, heads=[task_ids[t]]).logits[task_ids[t]])) for xi in clean_x])
        data.append(TaskData(task_ids[t], x, labels, clean_x))
    return SyntheticSuite(p, pre, fts, data, bases, heads)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def normalized_accuracy(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean over tasks of merged accuracy divided by fine-tuned accuracy."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no accuracy pairs")
    total = 0.0
    for merged, ft in pairs:
        if ft <= 0:
            raise ValueError("fine-tuned accuracy must be positive")
        total += merged / ft
    return total / len(pairs)


@dataclass
class EvalReport:
    method: str
    task_ids: list[str]
    accuracy: list[float]
    finetuned_accuracy: list[float]
    normalized_accuracy: float
    routing_accuracy: float | None
    config: dict
    suite_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    def to_json(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "method": self.method,
            "suite_hash": self.suite_hash,
            "tasks": self.task_ids,
            "accuracy": self.accuracy,
            "mean_accuracy": self.mean_accuracy,
            "finetuned_accuracy": self.finetuned_accuracy,
            "normalized_accuracy": self.normalized_accuracy,
            "routing_accuracy": self.routing_accuracy,
            "config": self.config,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_text(self) -> str:
        lines = [f"method: {self.method}", f"suite:  {self.suite_hash[:16]}"]
        lines.append(f"{'task':<12}{'acc':>8}{'ft_acc':>8}{'norm':>8}")
        for t, a, f in zip(self.task_ids, self.accuracy, self.finetuned_accuracy):
            lines.append(f"{t:<12}{a:>8.3f}{f:>8.3f}{a / f if f else float('nan'):>8.3f}")
        lines.append(f"{'mean':<12}{self.mean_accuracy:>8.3f}{np.mean(self.finetuned_accuracy):>8.3f}{self.normalized_accuracy:>8.3f}")
        if self.routing_accuracy is not None:
            lines.append(f"routing accuracy: {self.routing_accuracy:.3f}")
        return "\n".join(lines)


def _oracle_accuracy(model: Checkpoint, data: TaskData) -> float:
    hits = 0
    for x, y in zip(data.inputs, data.labels):
        z = forward(model, x, heads=[data.task_id]).logits[data.task_id]
        hits += int(np.argmax(z)) == int(y)
    return hits / len(data.labels)


def _global_head_accuracy(model: Checkpoint, task_index: int, data: TaskData, task_ids) -> float:
    hits = 0
    for x, y in zip(data.inputs, data.labels):
        logits = forward(model, x, heads=task_ids).logits
        best = max(((i, int(np.argmax(logits[t])), float(np.max(logits[t]))) for i, t in enumerate(task_ids)),
                   key=lambda v: (v[2], -v[0]))
        hits += best[0] == task_index and best[1] == int(y)
    return hits / len(data.labels)


def finetuned_accuracies(suite: SyntheticSuite) -> list[float]:
    return [_oracle_accuracy(ft, d) for ft, d in zip(suite.finetuned, suite.data)]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def evaluate(suite: SyntheticSuite, method: str, cfg: MassConfig = MassConfig(), *, batch_size: int = 25,
             ft_acc: Sequence[float] | None = None, threads: int = 1) -> EvalReport:
    """Evaluate one method on every task of ``suite``.

    Fixed merges and the fine-tuned reference are scored with the task's own
    head; ``mass`` variants and ``zero-shot`` must also pick the head, and a
    prediction counts only if both task and class are right.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    ids = suite.task_ids
    ft_acc = list(ft_acc) if ft_acc is not None else finetuned_accuracies(suite)
    tasks = list(enumerate(suite.data))
    acc: list[float] = []
    routing = None
    extra: dict = {}
    if method == "fine-tuned":
        acc = list(ft_acc)
    elif method == "zero-shot":
        pre = suite.pre.replace(heads=tuple(suite.heads))
        acc = _map(lambda td: _global_head_accuracy(pre, td[0], td[1], ids), tasks, threads)
    elif method == "weight-average":
        m = weight_average(suite.finetuned).weights
        acc = _map(lambda td: _oracle_accuracy(m, td[1]), tasks, threads)
    else:
        fm = fixed_merge(suite.pre, suite.finetuned, cfg, task_ids=ids)
        if method == "task-arithmetic":
            m = task_arithmetic_merge(suite.pre, fm.deltas, cfg.alpha, heads=fm.merged.weights.heads).weights
            acc = _map(lambda td: _oracle_accuracy(m, td[1]), tasks, threads)
        elif method == "tsv-m":
            acc = _map(lambda td: _oracle_accuracy(fm.merged.weights, td[1]), tasks, threads)
            extra["admitted"] = fm.admitted
        else:
            layer = cfg.layer or suite.planted_layer
            mm = MassModel(suite.pre, fm.merged, fm.bundles, cfg, layer=layer, admitted=fm.admitted)

            def run(td):
                i, d = td
                if method == "mass":
                    return [mm.classify(x) for x in d.inputs]
                preds = []
                for s in range(0, len(d.inputs), batch_size):
                    preds.extend(mm.classify_batched(d.inputs[s : s + batch_size]))
                return preds

            hits_route = total = 0
            for (i, d), preds in zip(tasks, _map(run, tasks, threads)):
                hits = sum(p.task_index == i and p.class_index == int(y) for p, y in zip(preds, d.labels))
                acc.append(hits / len(d.labels))
                hits_route += sum(i in p.decision.selected for p in preds)
                total += len(preds)
            routing = hits_route / total
            extra["admitted"] = fm.admitted
            extra["adaptive_merges"] = int(mm.stats["adaptive_merge"])
    cfg_echo = cfg.to_dict()
    if method in ("mass", "mass-batched"):
        cfg_echo["batch_size"] = batch_size
    return EvalReport(
        method=method,
        task_ids=ids,
        accuracy=[float(a) for a in acc],
        finetuned_accuracy=[float(a) for a in ft_acc],
        normalized_accuracy=normalized_accuracy(list(zip(acc, ft_acc))),
        routing_accuracy=routing,
        config=cfg_echo,
        suite_hash=suite.suite_hash(),
        extra=extra,
    )


# --------------------------------------------------------------------------
# routing-layer sweep
# --------------------------------------------------------------------------


@dataclass
class SweepTable:
    task_ids: list[str]
    rows: list[dict]  # layer, mean_acc, std_acc, per_task

    def best_layer_per_task(self) -> dict[str, str]:
        out = {}
        for j, t in enumerate(self.task_ids):
            best = max(range(len(self.rows)), key=lambda k: (self.rows[k]["per_task"][j], -k))
            out[t] = self.rows[best]["layer"]
        return out

    def row(self, layer: str) -> dict:
        for r in self.rows:
            if r["layer"] == layer:
                return r
        raise KeyError(layer)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "mean_acc", "std_acc"] + [f"task_{i + 1}" for i in range(len(self.task_ids))])
        for r in self.rows:
            w.writerow([r["layer"], f"{r['mean_acc']:.6f}", f"{r['std_acc']:.6f}"] + [f"{a:.6f}" for a in r["per_task"]])
        return buf.getvalue()


def layer_sweep(suite: SyntheticSuite, merged: Checkpoint, bundles, layers: Sequence[str] | None = None,
                cfg: MassConfig = MassConfig()) -> SweepTable:
    """Task-identification accuracy of the projection router at each layer.

    A sample counts as correct when the heaviest routing weight (ties to the
    lower index) belongs to its true task.
    """
    layers = list(layers) if layers is not None else merged.layer_names
    rcfgs = {l: RouterConfig(l, 0.0, 1, cfg.temperature, cfg.subspace) for l in layers}
    bases = {l: subspace_bases(bundles, l, cfg.subspace) for l in layers}
    hits = {l: np.zeros(len(suite.data)) for l in layers}
    for i, d in enumerate(suite.data):
        for x in d.inputs:
            tr = forward(merged, x, capture=layers)
            for l in layers:
                dec = route(tr.inputs[l], None, rcfgs[l], bases=bases[l])
                w = dec.weights
                hits[l][i] += int(np.argmax(w)) == i
        for l in layers:
            hits[l][i] /= len(d.inputs)
    rows = []
    for l in layers:
        per = [float(a) for a in hits[l]]
        rows.append({"layer": l, "mean_acc": float(np.mean(per)), "std_acc": float(np.std(per)), "per_task": per})
    return SweepTable(suite.task_ids, rows)
