"""Small reverse-mode differentiation kernel over numpy arrays.

A :class:`Graph` records primitives as they are applied (define-by-run). The recorded program
can be replayed against any :class:`ParamStore` with :func:`forward`, which is what the
finite-difference checks rely on, and differentiated with :func:`backward`. Constants keep
the value they were recorded with, so a ``const`` node acts as a gradient stop.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np


# floor applied inside log so exact zeros (masked probabilities) stay finite
TINY = 1e-300


class ShapeError(ValueError):
    pass


class ParamStore:
    """Named float64 arrays with fixed shapes."""

    def __init__(self, seed: int = 0):
        self._params: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, shape, fan_in: int | None = None, zeros: bool = False) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if zeros:
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in if fan_in else shape[-1])
            value = self.rng.uniform(-bound, bound, size=shape)
        self._params[name] = value
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value):
        value = np.asarray(value, dtype=float)
        if name not in self._params:
            raise KeyError(f"unknown parameter {name!r}")
        if value.shape != self._params[name].shape:
            raise ShapeError(f"{name}: expected shape {self._params[name].shape}, got {value.shape}")
        self._params[name] = value

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def copy(self) -> "ParamStore":
        new = ParamStore()
        new._params = {k: v.copy() for k, v in self._params.items()}
        new.rng.bit_generator.state = self.rng.bit_generator.state
        return new

    def equals(self, other: "ParamStore") -> bool:
        return sorted(self.names()) == sorted(other.names()) and all(
            np.array_equal(self[k], other[k]) for k in self._params
        )

    def to_json(self) -> dict:
        return {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self._params.items()}

    @classmethod
    def from_json(cls, data: Mapping) -> "ParamStore":
        store = cls()
        for name, entry in data.items():
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=float)
            if values.size != int(np.prod(shape)):
                raise ShapeError(f"{name}: {values.size} values do not fill shape {shape}")
            store._params[name] = values.reshape(shape)
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(x, mask):
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    xm = np.where(mask, x, -np.inf)
    top = xm.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, 0.0) - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    # rows with nothing allowed come out all zero
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def _linear_fwd(vals, attrs):
    x, w = vals[0], vals[1]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    out = x @ w.T
    if len(vals) == 3:
        out = out + vals[2]
    return out


def _linear_vjp(g, vals, out, attrs):
    x, w = vals[0], vals[1]
    gx = g @ w
    gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    grads = [gx, gw]
    if len(vals) == 3:
        grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
    return grads


def _gather_vjp(g, vals, out, attrs):
    acc = np.zeros_like(vals[0])
    np.add.at(acc, attrs["index"], g)
    return [acc]


def _elementwise(fn, op):
    def fwd(vals, attrs):
        try:
            np.broadcast_shapes(vals[0].shape, vals[1].shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {vals[0].shape} and {vals[1].shape} do not broadcast") from None
        return fn(vals[0], vals[1])

    return fwd


def _concat_vjp(g, vals, out, attrs):
    axis = attrs["axis"]
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return np.split(g, cuts, axis=axis)


def _sum_vjp(g, vals, out, attrs):
    axis = attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, vals[0].shape).copy()]


def _mean_vjp(g, vals, out, attrs):
    (x,) = vals
    count = x.size if attrs["axis"] is None else x.shape[attrs["axis"]]
    return [_sum_vjp(g, vals, out, attrs)[0] / count]


def _softmax_vjp(g, vals, out, attrs):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _dot_fwd(vals, attrs):
    x, v = vals
    if x.shape[-1] != v.shape[0] or v.ndim != 1:
        raise ShapeError(f"dot: cannot contract {x.shape} with {v.shape}")
    return x @ v


def _dot_vjp(g, vals, out, attrs):
    x, v = vals
    return [g[..., None] * v, (g[..., None] * x).reshape(-1, x.shape[-1]).sum(axis=0)]


def _reshape_fwd(vals, attrs):
    try:
        return vals[0].reshape(attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot view {vals[0].shape} as {attrs['shape']}") from None


_OPS: dict[str, tuple[Callable, Callable]] = {
    "linear": (_linear_fwd, _linear_vjp),
    "gather": (lambda v, a: v[0][a["index"]], _gather_vjp),
    "add": (_elementwise(np.add, "add"),
            lambda g, v, o, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]),
    "sub": (_elementwise(np.subtract, "sub"),
            lambda g, v, o, a: [_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)]),
    "mul": (_elementwise(np.multiply, "mul"),
            lambda g, v, o, a: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, v, o, a: [g * a["c"]]),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: [g * (v[0] > 0)]),
    "softmax": (lambda v, a: _softmax(v[0], a["mask"]), _softmax_vjp),
    "concat": (lambda v, a: np.concatenate(v, axis=a["axis"]), _concat_vjp),
    "broadcast_to": (lambda v, a: np.broadcast_to(v[0], a["shape"]).copy(),
                     lambda g, v, o, a: [_unbroadcast(g, v[0].shape)]),
    "reshape": (_reshape_fwd, lambda g, v, o, a: [g.reshape(v[0].shape)]),
    "sum": (lambda v, a: v[0].sum(axis=a["axis"]), _sum_vjp),
    "mean": (lambda v, a: v[0].mean(axis=a["axis"]), _mean_vjp),
    "dot": (_dot_fwd, _dot_vjp),
    "square": (lambda v, a: v[0] ** 2, lambda g, v, o, a: [2.0 * v[0] * g]),
    "log": (lambda v, a: np.log(np.maximum(v[0], TINY)), lambda g, v, o, a: [g / np.maximum(v[0], TINY)]),
}


class Var:
    __slots__ = ("graph", "idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        return self.graph.mul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "attrs", "value")

    def __init__(self, op, inputs, attrs, value):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value


class Graph:
    """Recorded computation over a parameter store."""

    def __init__(self, store: ParamStore):
        self.store = store
        self.nodes: list[_Node] = []

    def _push(self, op, inputs, attrs, value) -> Var:
        self.nodes.append(_Node(op, inputs, attrs, value))
        return Var(self, len(self.nodes) - 1)

    def _lift(self, x) -> Var:
        return x if isinstance(x, Var) else self.const(x)

    def _apply(self, op, inputs, **attrs) -> Var:
        inputs = [self._lift(x) for x in inputs]
        vals = [self.nodes[v.idx].value for v in inputs]
        try:
            out = _OPS[op][0](vals, attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {len(self.nodes)} ({op}): {exc}") from None
        return self._push(op, [v.idx for v in inputs], attrs, np.asarray(out, dtype=float))

    def param(self, name: str) -> Var:
        return self._push("param", [], {"name": name}, self.store[name])

    def const(self, value) -> Var:
        return self._push("const", [], {}, np.asarray(value, dtype=float))

    def linear(self, x, w, b=None) -> Var:
        return self._apply("linear", [x, w] if b is None else [x, w, b])

    def gather(self, table, index) -> Var:
        return self._apply("gather", [table], index=np.asarray(index, dtype=int))

    def add(self, a, b) -> Var:
        return self._apply("add", [a, b])

    def sub(self, a, b) -> Var:
        return self._apply("sub", [a, b])

    def mul(self, a, b) -> Var:
        return self._apply("mul", [a, b])

    def scale(self, x, c: float) -> Var:
        return self._apply("scale", [x], c=float(c))

    def relu(self, x) -> Var:
        return self._apply("relu", [x])

    def softmax(self, x, mask=None) -> Var:
        return self._apply("softmax", [x], mask=None if mask is None else np.asarray(mask, dtype=bool))

    def concat(self, xs: Iterable, axis: int = -1) -> Var:
        return self._apply("concat", list(xs), axis=axis)

    def broadcast_to(self, x, shape) -> Var:
        return self._apply("broadcast_to", [x], shape=tuple(shape))

    def reshape(self, x, shape) -> Var:
        return self._apply("reshape", [x], shape=tuple(shape))

    def sum(self, x, axis=None) -> Var:
        return self._apply("sum", [x], axis=axis)

    def mean(self, x, axis=None) -> Var:
        return self._apply("mean", [x], axis=axis)

    def dot(self, x, v) -> Var:
        return self._apply("dot", [x, v])

    def square(self, x) -> Var:
        return self._apply("square", [x])

    def log(self, x) -> Var:
        return self._apply("log", [x])


def forward(graph: Graph, store: ParamStore | None = None, output: Var | None = None) -> np.ndarray:
    """Re-evaluate the recorded program, reading parameters from ``store``."""
    store = graph.store if store is None else store
    for i, node in enumerate(graph.nodes):
        if node.op == "param":
            node.value = store[node.attrs["name"]]
        elif node.op != "const":
            vals = [graph.nodes[j].value for j in node.inputs]
            try:
                node.value = np.asarray(_OPS[node.op][0](vals, node.attrs), dtype=float)
            except ShapeError as exc:
                raise ShapeError(f"node {i} ({node.op}): {exc}") from None
    idx = len(graph.nodes) - 1 if output is None else output.idx
    return graph.nodes[idx].value


def backward(graph: Graph, store: ParamStore | None = None, seed_grad=None, output: Var | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``output`` (default: last node) with respect to every parameter it uses."""
    store = graph.store if store is None else store
    out_idx = len(graph.nodes) - 1 if output is None else output.idx
    out_val = graph.nodes[out_idx].value
    if seed_grad is None:
        if out_val.size != 1:
            raise ValueError(f"output has shape {out_val.shape}; a seed gradient is required")
        seed_grad = np.ones_like(out_val)
    seed_grad = np.asarray(seed_grad, dtype=float)
    if seed_grad.shape != out_val.shape:
        raise ShapeError(f"seed gradient shape {seed_grad.shape} does not match output {out_val.shape}")

    grads: dict[int, np.ndarray] = {out_idx: seed_grad}
    params: dict[str, np.ndarray] = {}
    for i in range(out_idx, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = graph.nodes[i]
        if node.op == "param":
            name = node.attrs["name"]
            params[name] = params[name] + g if name in params else g.copy()
            continue
        if node.op == "const":
            continue
        vals = [graph.nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, _OPS[node.op][1](g, vals, node.value, node.attrs)):
            grads[j] = grads[j] + gj if j in grads else gj
    # parameters the output does not depend on still get an explicit zero
    for node in graph.nodes[: out_idx + 1]:
        if node.op == "param" and node.attrs["name"] not in params:
            params[node.attrs["name"]] = np.zeros_like(store[node.attrs["name"]])
    return params


def sgd_step(store: ParamStore, grads: Mapping[str, np.ndarray], eta: float) -> ParamStore:
    """In-place ``p -= eta * grad`` for every parameter in ``grads``; returns the store."""
    for name, g in grads.items():
        if g.shape != store[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match {store[name].shape}")
    for name, g in grads.items():
        store[name] = store[name] - eta * g
    return store


def finite_difference(loss: Callable[[ParamStore], float], store: ParamStore, names=None, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of the store, one coordinate at a time."""
    out = {}
    for name in names or store.names():
        base = store[name]
        grad = np.zeros_like(base)
        for pos in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[pos] += h
            store[name] = bumped
            up = loss(store)
            bumped = base.copy()
            bumped[pos] -= h
            store[name] = bumped
            down = loss(store)
            grad[pos] = (up - down) / (2 * h)
        store[name] = base
        out[name] = grad
    return out
