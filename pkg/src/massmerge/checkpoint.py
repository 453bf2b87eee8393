"""Checkpoints, the MTSV binary container, and task deltas.

MTSV layout (all integers little-endian)::

    b"MTSV" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header lists every tensor as ``{name, role, shape, dtype, offset,
byte_length}`` with offsets relative to the start of the payload, followed by
``topology`` and ``meta`` objects. The payload is row-major little-endian f32.
Vectors (biases, singular values) are stored as ``n x 1`` matrices.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"MTSV"
VERSION = 1
ACTIVATIONS = ("identity", "relu", "gelu")
_PREFIX = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


class MTSVError(Exception):
    """Base class for container read/write failures."""


class BadMagicError(MTSVError):
    pass


class VersionMismatchError(MTSVError):
    pass


class TruncatedPayloadError(MTSVError):
    pass


class LayoutError(MTSVError):
    """Header is malformed or shapes/offsets disagree with the payload."""


class NonFinitePayloadError(MTSVError):
    pass


class TopologyError(ValueError):
    """Checkpoint structure is inconsistent or two checkpoints do not match."""


def _frozen_f32(a, name: str, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise TopologyError(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    if arr.size == 0:
        raise TopologyError(f"{name}: empty array")
    if not np.all(np.isfinite(arr)):
        raise TopologyError(f"{name}: non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    """Dense layer computing ``activation(weight @ z + bias)``."""

    name: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen_f32(self.weight, f"layer {self.name!r} weight", 2))
        if self.bias is not None:
            b = _frozen_f32(np.ravel(self.bias), f"layer {self.name!r} bias", 1)
            if b.shape[0] != self.weight.shape[0]:
                raise TopologyError(
                    f"layer {self.name!r}: bias length {b.shape[0]} != output dim {self.weight.shape[0]}"
                )
            object.__setattr__(self, "bias", b)
        if self.activation not in ACTIVATIONS:
            raise TopologyError(f"layer {self.name!r}: unknown activation {self.activation!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass(frozen=True, eq=False)
class Head:
    """Linear classification head mapping the final representation to logits."""

    name: str
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen_f32(self.weight, f"head {self.name!r} weight", 2))
        b = _frozen_f32(np.ravel(self.bias), f"head {self.name!r} bias", 1)
        if b.shape[0] != self.weight.shape[0]:
            raise TopologyError(f"head {self.name!r}: bias length {b.shape[0]} != classes {self.weight.shape[0]}")
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Immutable layered model: ordered dense layers, task heads and metadata."""

    layers: tuple[Layer, ...]
    heads: tuple[Head, ...] = ()
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        heads = tuple(self.heads)
        if not layers:
            raise TopologyError("checkpoint has no layers")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise TopologyError(f"duplicate layer names in {names}")
        for prev, cur in zip(layers, layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise TopologyError(
                    f"layer {cur.name!r} expects input dim {cur.weight.shape[1]} "
                    f"but {prev.name!r} outputs {prev.weight.shape[0]}"
                )
        head_names = [h.name for h in heads]
        if len(set(head_names)) != len(head_names):
            raise TopologyError(f"duplicate head names in {head_names}")
        d = layers[-1].weight.shape[0]
        for h in heads:
            if h.weight.shape[1] != d:
                raise TopologyError(f"head {h.name!r} input dim {h.weight.shape[1]} != representation dim {d}")
        meta = {str(k): str(v) for k, v in dict(self.meta).items()}
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "meta", meta)

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def head_names(self) -> list[str]:
        return [h.name for h in self.heads]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"unknown layer {name!r}")

    def head(self, name: str) -> Head:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(f"unknown head {name!r}")

    def replace(self, *, layers=None, heads=None, meta=None) -> "Checkpoint":
        return Checkpoint(
            layers=self.layers if layers is None else layers,
            heads=self.heads if heads is None else heads,
            meta=self.meta if meta is None else meta,
        )

    def n_params(self) -> int:
        n = sum(l.weight.size + (0 if l.bias is None else l.bias.size) for l in self.layers)
        return n + sum(h.weight.size + h.bias.size for h in self.heads)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.layer_names != other.layer_names or self.head_names != other.head_names:
            return False
        if dict(self.meta) != dict(other.meta):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.activation != b.activation or not _same(a.weight, b.weight) or not _same(a.bias, b.bias):
                return False
        for a, b in zip(self.heads, other.heads):
            if not _same(a.weight, b.weight) or not _same(a.bias, b.bias):
                return False
        return True

    __hash__ = None


def check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    """Raise ``TopologyError`` unless ``a`` and ``b`` share layer names, shapes and bias layout."""
    if a.layer_names != b.layer_names:
        raise TopologyError(f"layer names differ: {a.layer_names} vs {b.layer_names}")
    for la, lb in zip(a.layers, b.layers):
        if la.shape != lb.shape:
            raise TopologyError(f"layer {la.name!r}: shape {la.shape} vs {lb.shape}")
        if (la.bias is None) != (lb.bias is None):
            raise TopologyError(f"layer {la.name!r}: bias present in only one checkpoint")
        if la.activation != lb.activation:
            raise TopologyError(f"layer {la.name!r}: activation {la.activation} vs {lb.activation}")


# --------------------------------------------------------------------------
# container
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TensorRecord:
    name: str
    role: str
    data: np.ndarray  # 2-D


@dataclass
class Container:
    tensors: list[TensorRecord]
    topology: dict
    meta: dict
    version: int = VERSION

    def by_role(self, role: str) -> list[TensorRecord]:
        return [t for t in self.tensors if t.role == role]


def encode_container(tensors: Sequence[TensorRecord], topology: Mapping, meta: Mapping) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for t in tensors:
        arr = np.ascontiguousarray(t.data, dtype=_F32)
        if arr.ndim != 2:
            raise LayoutError(f"tensor {t.name!r}: expected 2-D, got shape {arr.shape}")
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": t.name,
                "role": t.role,
                "shape": [int(arr.shape[0]), int(arr.shape[1])],
                "dtype": "f32",
                "offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"tensors": entries, "topology": dict(topology), "meta": {str(k): str(v) for k, v in meta.items()}}
    hbytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode_container(buf: bytes) -> Container:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _PREFIX.size:
        raise TruncatedPayloadError("truncated payload: file ends inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has version {version}, reader supports {VERSION}")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise TruncatedPayloadError(f"truncated payload: header length {hlen} exceeds file size")
    try:
        header = json.loads(buf[_PREFIX.size : start].decode("utf-8"))
        entries = header["tensors"]
        topology = header.get("topology", {})
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LayoutError(f"malformed header: {exc}") from None
    payload = memoryview(buf)[start:]

    tensors = []
    spans = []
    for e in entries:
        try:
            name, role, shape = e["name"], e["role"], e["shape"]
            dtype, offset, nbytes = e["dtype"], int(e["offset"]), int(e["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"malformed tensor entry {e!r}: {exc}") from None
        if dtype != "f32":
            raise LayoutError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if len(shape) != 2 or any(int(s) < 1 for s in shape):
            raise LayoutError(f"tensor {name!r}: invalid shape {shape}")
        rows, cols = int(shape[0]), int(shape[1])
        if nbytes != rows * cols * 4:
            raise LayoutError(f"tensor {name!r}: shape {shape} needs {rows * cols * 4} bytes, header says {nbytes}")
        if offset < 0:
            raise LayoutError(f"tensor {name!r}: negative offset {offset}")
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"truncated payload: tensor {name!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload holds {len(payload)}"
            )
        spans.append((offset, offset + nbytes, name))
        data = np.frombuffer(payload[offset : offset + nbytes], dtype=_F32).reshape(rows, cols).astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise NonFinitePayloadError(f"tensor {name!r} contains NaN or Inf")
        tensors.append(TensorRecord(name=name, role=role, data=data))

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise LayoutError(f"tensors {n0!r} and {n1!r} overlap in the payload")
    used = sum(e - s for s, e, _ in spans)
    if used != len(payload):
        raise LayoutError(f"payload holds {len(payload)} bytes but tensors account for {used}")
    return Container(tensors=tensors, topology=topology, meta=meta, version=version)


def write_container(path, tensors, topology, meta) -> int:
    """Write an MTSV file; returns the number of bytes written."""
    blob = encode_container(tensors, topology, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


# --------------------------------------------------------------------------
# checkpoint <-> container
# --------------------------------------------------------------------------


def checkpoint_records(c: Checkpoint) -> list[TensorRecord]:
    out = []
    for l in c.layers:
        out.append(TensorRecord(l.name, "layer", l.weight))
        if l.bias is not None:
            out.append(TensorRecord(l.name, "bias", l.bias[:, None]))
    for h in c.heads:
        out.append(TensorRecord(h.name, "head", h.weight))
        out.append(TensorRecord(h.name, "head_bias", h.bias[:, None]))
    return out


def checkpoint_topology(c: Checkpoint) -> dict:
    return {
        "layer_order": c.layer_names,
        "activations": [l.activation for l in c.layers],
        "heads": c.head_names,
    }


def encode_checkpoint(c: Checkpoint) -> bytes:
    return encode_container(checkpoint_records(c), checkpoint_topology(c), c.meta)


def write_checkpoint(c: Checkpoint, path) -> int:
    blob = encode_checkpoint(c)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def checkpoint_from_container(cont: Container) -> Checkpoint:
    topo = cont.topology
    try:
        order = list(topo["layer_order"])
        acts = list(topo.get("activations", ["identity"] * len(order)))
        head_order = list(topo.get("heads", []))
    except (KeyError, TypeError) as exc:
        raise LayoutError(f"malformed topology: {exc}") from None
    if len(acts) != len(order):
        raise LayoutError("topology: activations and layer_order differ in length")
    table = {(t.role, t.name): t.data for t in cont.tensors}
    if len(table) != len(cont.tensors):
        raise LayoutError("duplicate (role, name) tensor entries")
    try:
        layers = []
        for name, act in zip(order, acts):
            if ("layer", name) not in table:
                raise LayoutError(f"layer {name!r} listed in topology but missing from payload")
            b = table.get(("bias", name))
            if b is not None and b.shape[1] != 1:
                raise LayoutError(f"bias {name!r} must be n x 1, got {b.shape}")
            layers.append(Layer(name, table[("layer", name)], None if b is None else b[:, 0], act))
        heads = []
        for name in head_order:
            if ("head", name) not in table or ("head_bias", name) not in table:
                raise LayoutError(f"head {name!r} listed in topology but missing from payload")
            hb = table[("head_bias", name)]
            if hb.shape[1] != 1:
                raise LayoutError(f"head bias {name!r} must be n x 1, got {hb.shape}")
            heads.append(Head(name, table[("head", name)], hb[:, 0]))
        return Checkpoint(tuple(layers), tuple(heads), dict(cont.meta))
    except TopologyError as exc:
        raise LayoutError(f"shape inconsistency: {exc}") from None


def read_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such checkpoint: {path}")
    return checkpoint_from_container(read_container(path))


# --------------------------------------------------------------------------
# task deltas
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TaskDelta:
    """Per-layer weight differences ``ft - pre`` for one task (float64).

    ``biases`` maps layer name to an ``n x 1`` matrix, or ``None`` when the
    layer has no bias.
    """

    task_id: str
    layer_order: tuple[str, ...]
    weights: Mapping[str, np.ndarray]
    biases: Mapping[str, np.ndarray | None]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(self.weights[n] ** 2) for n in self.layer_order)))


def delta(ft: Checkpoint, pre: Checkpoint, task_id: str | None = None) -> TaskDelta:
    check_compatible(ft, pre)
    weights, biases = {}, {}
    for lf, lp in zip(ft.layers, pre.layers):
        # f32 - f32 evaluated in f64 is exact, so pre + delta gives ft back bitwise
        weights[lf.name] = lf.weight.astype(np.float64) - lp.weight.astype(np.float64)
        if lf.bias is None:
            biases[lf.name] = None
        else:
            biases[lf.name] = (lf.bias.astype(np.float64) - lp.bias.astype(np.float64))[:, None]
    tid = task_id if task_id is not None else ft.meta.get("task_id", "task")
    return TaskDelta(tid, tuple(ft.layer_names), weights, biases)


def flatten(d: TaskDelta, layer: str | None = None) -> np.ndarray:
    """Row-major flattening of the weight deltas, concatenated in layer order.

    With ``layer`` set, only that layer is flattened. Bias deltas are not
    included.
    """
    if layer is not None:
        return np.ravel(d.weights[layer], order="C")
    return np.concatenate([np.ravel(d.weights[n], order="C") for n in d.layer_order])


def apply_deltas(pre: Checkpoint, deltas: Iterable[TaskDelta], alpha: float = 1.0, heads=None) -> Checkpoint:
    """``pre + alpha * sum(deltas)`` per layer, biases included."""
    deltas = list(deltas)
    layers = []
    for l in pre.layers:
        w = l.weight.astype(np.float64)
        add = np.zeros_like(w)
        badd = None if l.bias is None else np.zeros(l.bias.shape[0])
        for d in deltas:
            if d.weights[l.name].shape != w.shape:
                raise TopologyError(f"layer {l.name!r}: delta shape {d.weights[l.name].shape} vs {w.shape}")
            add += d.weights[l.name]
            if badd is not None and d.biases.get(l.name) is not None:
                badd += d.biases[l.name][:, 0]
        w = w + alpha * add
        b = None if l.bias is None else l.bias.astype(np.float64) + alpha * badd
        layers.append(Layer(l.name, w, b, l.activation))
    return pre.replace(layers=tuple(layers), heads=pre.heads if heads is None else tuple(heads))
