"""A small reverse-mode differentiation core over dense numpy arrays.

Every quantity the networks and losses differentiate is a :class:`Value`.
Primitives record a closure that maps the output adjoint to parent adjoints;
:meth:`Value.backward` replays them in reverse topological order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix


class Value:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, parents: tuple = (), op: str = "", requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = None
        self.op = op
        self.requires_grad = requires_grad

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, op={self.op!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                if node.parents:
                    # interior adjoints are not needed after propagation
                    node.grad = None if node is not self else node.grad

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x, dtype=None) -> Value:
    return Value(np.asarray(x, dtype=dtype))


def _node(data, parents, op) -> Value:
    return Value(data, parents, op, any(p.requires_grad for p in parents))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic

def _shift(a: Value, c: float, sign: float) -> Value:
    out = _node(a.data + a.data.dtype.type(c), (a,), "shift")
    out.backward_fn = lambda g: a.accumulate(sign * g)
    return out


def add(a, b) -> Value:
    if not isinstance(a, Value):
        a, b = b, a
    if not isinstance(b, Value) and np.ndim(b) == 0:
        return _shift(a, float(b), 1.0)
    a, b = as_value(a), as_value(b)
    out = _node(a.data + b.data, (a, b), "add")

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    out.backward_fn = backward
    return out


def sub(a, b) -> Value:
    if isinstance(a, Value) and not isinstance(b, Value) and np.ndim(b) == 0:
        return _shift(a, -float(b), 1.0)
    if isinstance(b, Value) and not isinstance(a, Value) and np.ndim(a) == 0:
        return _shift(mul(b, -1.0), float(a), 1.0)
    a, b = as_value(a), as_value(b)
    out = _node(a.data - b.data, (a, b), "sub")

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    out.backward_fn = backward
    return out


def mul(a, b) -> Value:
    if not isinstance(a, Value):
        a, b = b, a
    if not isinstance(b, Value) and np.ndim(b) == 0:
        c = float(b)
        a = as_value(a)
        out = _node(a.data * a.data.dtype.type(c), (a,), "scale")
        out.backward_fn = lambda g: a.accumulate(g * c)
        return out
    a, b = as_value(a), as_value(b)
    out = _node(a.data * b.data, (a, b), "mul")

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    out.backward_fn = backward
    return out


def relu(x: Value) -> Value:
    mask = x.data > 0
    out = _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu")
    out.backward_fn = lambda g: x.accumulate(g * mask)
    return out


# --------------------------------------------------------------------------
# linear algebra and shape

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = _node(a.data @ b.data, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    out.backward_fn = backward
    return out


def transpose(x: Value) -> Value:
    out = _node(x.data.T, (x,), "transpose")
    out.backward_fn = lambda g: x.accumulate(g.T)
    return out


def affine(x: Value, weight: Value, bias: Value | None = None) -> Value:
    """Row-wise affine map ``x @ weight + bias``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def concat(values: Iterable, axis: int = 1) -> Value:
    values = [as_value(v) for v in values]
    out = _node(np.concatenate([v.data for v in values], axis=axis), tuple(values), "concat")
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def backward(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                v.accumulate(g[tuple(idx)])

    out.backward_fn = backward
    return out


def columns(x: Value, lo: int, hi: int) -> Value:
    out = _node(x.data[:, lo:hi], (x,), "columns")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        x.accumulate(full)

    out.backward_fn = backward
    return out


def broadcast_rows(x: Value, n: int) -> Value:
    """Repeat a ``1 x d`` row ``n`` times."""
    out = _node(np.repeat(x.data.reshape(1, -1), n, axis=0), (x,), "broadcast_rows")
    out.backward_fn = lambda g: x.accumulate(g.sum(axis=0, keepdims=True))
    return out


def scatter_matrix(index: np.ndarray, n: int) -> csr_matrix:
    """Sparse ``n x len(index)`` matrix summing gathered rows back onto their source."""
    k = len(index)
    return csr_matrix((np.ones(k), (index, np.arange(k))), shape=(n, k))


def gather_rows(x: Value, index: np.ndarray, scatter: csr_matrix | None = None) -> Value:
    out = _node(x.data[index], (x,), "gather_rows")

    def backward(g):
        s = scatter if scatter is not None else scatter_matrix(index, x.shape[0])
        x.accumulate(s @ g)

    out.backward_fn = backward
    return out


def batched_matvec(mats: np.ndarray, v: Value) -> Value:
    """Apply a constant ``(k, 3, 3)`` stack of matrices to the rows of ``v``."""
    mats = np.asarray(mats, dtype=v.dtype)
    out = _node(np.einsum("kij,kj->ki", mats, v.data), (v,), "batched_matvec")
    out.backward_fn = lambda g: v.accumulate(np.einsum("kji,kj->ki", mats, g))
    return out


# --------------------------------------------------------------------------
# reductions

def sum(x: Value) -> Value:  # noqa: A001 - mirrors numpy naming
    out = _node(x.data.sum(), (x,), "sum")
    out.backward_fn = lambda g: x.accumulate(np.broadcast_to(g, x.shape))
    return out


def mean(x: Value) -> Value:
    size = x.data.size
    out = _node(x.data.mean(), (x,), "mean")
    out.backward_fn = lambda g: x.accumulate(np.broadcast_to(g / size, x.shape))
    return out


def sq_frobenius(x: Value) -> Value:
    out = _node(np.sum(x.data * x.data), (x,), "sq_frobenius")
    out.backward_fn = lambda g: x.accumulate(2.0 * g * x.data)
    return out


# --------------------------------------------------------------------------
# pooling

def segment_max(values: Value, offsets: np.ndarray) -> Value:
    """Componentwise max over consecutive row segments ``offsets[i]:offsets[i+1]``.

    The adjoint of each output entry goes to the first row attaining the max.
    """
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    if np.any(counts == 0):
        raise ValueError("isolated vertex: every segment needs at least one row")
    starts = offsets[:-1]
    data = np.maximum.reduceat(values.data, starts, axis=0)
    out = _node(data, (values,), "segment_max")

    def backward(g):
        rows = len(values.data)
        hit = values.data == np.repeat(data, counts, axis=0)
        idx = np.where(hit, np.arange(rows)[:, None], rows)
        first = np.minimum.reduceat(idx, starts, axis=0)
        full = np.zeros_like(values.data)
        full[first, np.arange(data.shape[1])[None, :]] = g
        values.accumulate(full)

    out.backward_fn = backward
    return out


def neighborhood_max(features: Value, edges, edge_transform: Callable) -> Value:
    """Max over each vertex's edges of ``edge_transform(features, edges)`` rows.

    ``edges`` must be sorted by source (an :class:`~morphmatch.mesh.EdgeSet`).
    Ties go to the lowest neighbor index.
    """
    if np.any(edges.degrees() == 0):
        raise ValueError("isolated vertex: neighborhood max needs at least one neighbor")
    per_edge = edge_transform(features, edges)
    return segment_max(per_edge, edges.offsets)


def global_max(x: Value) -> Value:
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    out = _node(x.data[arg, cols][None, :], (x,), "global_max")

    def backward(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g.reshape(-1)
        x.accumulate(full)

    out.backward_fn = backward
    return out


# --------------------------------------------------------------------------
# matching primitives

def row_softmax(scores: Value, temperature: float) -> Value:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = scores.data * scores.dtype.type(temperature)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _node(p, (scores,), "row_softmax")

    def backward(g):
        scores.accumulate(temperature * p * (g - np.sum(g * p, axis=1, keepdims=True)))

    out.backward_fn = backward
    return out


def cosine_matrix(a: Value, b: Value, eps: float = 1e-8) -> Value:
    """``s[i, j] = <a_i, b_j> / ((|a_i| + eps)(|b_j| + eps))``."""
    ra = np.linalg.norm(a.data, axis=1, keepdims=True)
    rb = np.linalg.norm(b.data, axis=1, keepdims=True)
    ua, ub = a.data / (ra + eps), b.data / (rb + eps)
    out = _node(ua @ ub.T, (a, b), "cosine_matrix")

    def norm_adjoint(x, r, gu):
        # d(x / (|x| + eps)) applied to gu
        safe = np.maximum(r, np.finfo(x.dtype).tiny)
        proj = np.sum(x * gu, axis=1, keepdims=True)
        return gu / (r + eps) - x * proj / (safe * (r + eps) ** 2)

    def backward(g):
        if a.requires_grad:
            a.accumulate(norm_adjoint(a.data, ra, g @ ub))
        if b.requires_grad:
            b.accumulate(norm_adjoint(b.data, rb, g.T @ ua))

    out.backward_fn = backward
    return out


# --------------------------------------------------------------------------
# parameters and the Adam rule

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class ParamStore:
    """Named trainable tensors plus Adam moment buffers and a step counter."""

    def __init__(self, dtype=np.float32, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.dtype = np.dtype(dtype)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self._params: dict[str, Value] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, data) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(data, dtype=self.dtype)
        p = Value(arr, op="param", requires_grad=True)
        self._params[name] = p
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return p

    def weight(self, name: str, fan_in: int, fan_out: int, rng) -> Value:
        return self.add(name, xavier_uniform(rng, fan_in, fan_out, self.dtype))

    def bias(self, name: str, width: int) -> Value:
        return self.add(name, np.zeros((1, width), dtype=self.dtype))

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def set(self, name: str, data) -> None:
        p = self._params[name]
        arr = np.asarray(data, dtype=self.dtype)
        if arr.shape != p.shape:
            raise ValueError(f"shape of {name!r} is fixed at {p.shape}, got {arr.shape}")
        p.data = arr.copy()

    def n_entries(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def adam_step(self, lr: float) -> None:
        """One Adam update from the accumulated gradients; missing grads count as zero."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        t = self.dtype.type
        for name, p in self._params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name] = t(b1) * self._m[name] + t(1 - b1) * g
            v = self._v[name] = t(b2) * self._v[name] + t(1 - b2) * (g * g)
            p.data = p.data - t(lr) * (m / t(c1)) / (np.sqrt(v / t(c2)) + t(self.eps))

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(dtype, self.beta1, self.beta2, self.eps)
        other.step = self.step
        for name, p in self._params.items():
            other.add(name, p.data)
            other._m[name] = self._m[name].astype(dtype)
            other._v[name] = self._v[name].astype(dtype)
        return other

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]


# --------------------------------------------------------------------------
# checkpoint container
#
#   magic  b"MMCK"   | u32 format version | u64 header length
#   header: UTF-8 JSON {format_version, config, step, optimizer, params:[{name, shape}], extra}
#   body:   for each param in header order: value, first moment, second moment
#           (row-major little-endian float32)

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore, config: Mapping, extra: Mapping | None = None) -> Path:
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": dict(config),
        "step": store.step,
        "optimizer": {"rule": "adam", "beta1": store.beta1, "beta2": store.beta2,
                      "eps": store.eps},
        "params": [{"name": n, "shape": list(p.shape)} for n, p in store.items()],
        "extra": dict(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob]
    for name, p in store.items():
        m, v = store.moments(name)
        for arr in (p.data, m, v):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    opt = header["optimizer"]
    store = ParamStore(np.float32, opt["beta1"], opt["beta2"], opt["eps"])
    store.step = header["step"]
    offset = 16 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
                          .reshape(shape).astype(np.float32))
            offset += 4 * size
        store.add(entry["name"], arrays[0])
        store._m[entry["name"]], store._v[entry["name"]] = arrays[1], arrays[2]
    if offset != len(raw):
        raise ValueError(f"{path}: checkpoint body length mismatch")
    return store, header


# --------------------------------------------------------------------------
# finite differences

@dataclass
class FDReport:
    """Outcome of :func:`finite_difference_check`.

    ``max_rel_error`` maps each parameter name to the largest relative error
    among its checked entries. ``non_differentiable`` lists entries sitting on
    a kink; they are excluded from the maxima.
    """

    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    non_differentiable: list[tuple[str, tuple]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def finite_difference_check(scalar_graph: Callable[[], Value],
                            params: ParamStore | Mapping[str, Value],
                            h: float = 1e-4, tolerance: float = 1e-4,
                            max_entries: int = 1000, seed: int = 0,
                            kink_tolerance: float = 1e-2) -> FDReport:
    """Compare reverse-mode gradients against central differences.

    ``scalar_graph`` rebuilds the graph from the current parameter values each
    call. Tensors with more than ``max_entries`` entries are checked on a
    seeded sample.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = 10 eps (|f| + 1) / (h tolerance)``, so an entry fails only when
    its error exceeds both the tolerance and the rounding noise of the
    difference quotient. An entry is
    flagged non-differentiable when central differences disagree with the
    adjoint while the adjoint matches one of the one-sided quotients and the
    two one-sided quotients differ.
    """
    items = list(params.items())
    for _, p in items:
        p.grad = None
    out = scalar_graph()
    if out.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar output")
    out.backward()
    f0 = float(out.data)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in items}
    eps = np.finfo(out.dtype).eps
    # an entry fails only if its error beats both tolerance and rounding noise
    floor = 10.0 * eps * (abs(f0) + 1.0) / (h * tolerance)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), floor)

    rng = np.random.default_rng(seed)
    report = FDReport(tolerance=tolerance)
    for name, p in items:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for k in idx.tolist():
            orig = flat[k]
            flat[k] = orig + h
            fp = float(scalar_graph().data)
            flat[k] = orig - h
            fm = float(scalar_graph().data)
            flat[k] = orig
            a = float(analytic[name].reshape(-1)[k])
            central = (fp - fm) / (2 * h)
            err = rel(a, central)
            if err >= tolerance:
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                one_sided = min(rel(a, fwd), rel(a, bwd))
                if one_sided < kink_tolerance and rel(fwd, bwd) > kink_tolerance:
                    report.non_differentiable.append(
                        (name, np.unravel_index(k, p.shape)))
                    continue
            worst = max(worst, err)
            report.n_checked += 1
        report.max_rel_error[name] = worst
    for _, p in items:
        p.grad = None
    return report
