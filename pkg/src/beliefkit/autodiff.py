"""Small reverse-mode automatic differentiation over dense float64 arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape})"


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def const(x) -> Node:
    return Node(x)


def leaf(x, name=None) -> Node:
    return Node(np.array(x, dtype=float), name=name)


def _same_shape(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a bias row added to every row of ``a``."""
    if a.shape == b.shape:
        def back(g):
            return g, g
    elif b.value.ndim == 1 and a.value.ndim == 2 and a.shape[1] == b.shape[0]:
        def back(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    return Node(a.value + b.value, (a, b), back)


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def square(a: Node) -> Node:
    return Node(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def matmul(x: Node, w: Node) -> Node:
    if x.value.ndim not in (1, 2) or w.value.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: shapes {x.shape} and {w.shape} are incompatible")

    def back(g):
        if x.value.ndim == 1:
            return g @ w.value.T, np.outer(x.value, g)
        return g @ w.value.T, x.value.T @ g

    return Node(x.value @ w.value, (x, w), back)


def affine(x: Node, w: Node, b: Node) -> Node:
    return add(matmul(x, w), b)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return Node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(x.value * mask, (x,), lambda g: (g * mask,))


def _log_softmax(v: np.ndarray) -> np.ndarray:
    top = np.max(v, axis=-1, keepdims=True)
    shifted = v - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(x: Node) -> Node:
    y = np.exp(_log_softmax(x.value))

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return Node(y, (x,), back)


def log_softmax(x: Node) -> Node:
    y = _log_softmax(x.value)
    p = np.exp(y)

    def back(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return Node(y, (x,), back)


def sum(x: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Node(np.sum(x.value, axis=axis), (x,), back)


def mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def gather(x: Node, idx) -> Node:
    """Pick ``x[i, idx[i]]`` from each row of a 2-D node (or ``x[idx]`` from a vector)."""
    idx = np.asarray(idx, dtype=int)
    if x.value.ndim == 1:
        def back(g):
            out = np.zeros(x.shape)
            np.add.at(out, idx, g)
            return (out,)
        return Node(x.value[idx], (x,), back)
    if x.value.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather: cannot pick {idx.shape} indices from {x.shape}")
    rows = np.arange(x.shape[0])

    def back(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return Node(x.value[rows, idx], (x,), back)


def concat(nodes, axis=-1) -> Node:
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                lambda g: tuple(np.split(g, splits, axis=axis)))


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Fill ``grad`` of every node reachable from the scalar ``root``."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            parent.grad = parent.grad + np.reshape(g, parent.shape)


class Params:
    """Named trainable leaves."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self.nodes: dict[str, Node] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Node:
        if name in self.nodes:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = leaf(value, name)
        self.nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def __iter__(self):
        return iter(self.nodes.items())

    def __len__(self):
        return len(self.nodes)

    def zero_grad(self):
        for node in self.nodes.values():
            node.grad = np.zeros_like(node.value)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(n.value) if n.grad is None else n.grad.copy())
                for k, n in self.nodes.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: n.value.copy() for k, n in self.nodes.items()}

    def load(self, arrays: dict[str, np.ndarray]):
        for k, v in arrays.items():
            if self.nodes[k].shape != np.shape(v):
                raise ShapeError(f"{k}: checkpoint shape {np.shape(v)} != {self.nodes[k].shape}")
            self.nodes[k].value = np.array(v, dtype=float)


@dataclass
class OptimizerConfig:
    algo: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


class Optimizer:
    """SGD or Adam over a ``Params`` collection."""

    def __init__(self, params: Params, config: OptimizerConfig | None = None):
        self.params = params
        self.config = config or OptimizerConfig()
        if self.config.algo not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.config.algo!r}")
        self.t = 0
        self.m = {k: np.zeros_like(n.value) for k, n in params}
        self.v = {k: np.zeros_like(n.value) for k, n in params}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        grads = self.params.grads() if grads is None else grads
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        cfg = self.config
        if cfg.max_grad_norm is not None:
            norm = np.sqrt(np.sum([np.sum(g * g) for g in grads.values()]))
            if norm > cfg.max_grad_norm:
                grads = {k: g * (cfg.max_grad_norm / norm) for k, g in grads.items()}
        self.t += 1
        for name, node in self.params:
            g = grads[name]
            if cfg.algo == "sgd":
                node.value = node.value - cfg.lr * g
                continue
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            m_hat = self.m[name] / (1 - cfg.beta1**self.t)
            v_hat = self.v[name] / (1 - cfg.beta2**self.t)
            node.value = node.value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        # a parameter left out of the next graph must not reuse this gradient
        self.params.zero_grad()


def optimizer_step(params: Params, grads: dict[str, np.ndarray], optimizer: Optimizer) -> Params:
    optimizer.step(grads)
    return params


# -- checkpoints ----------------------------------------------------------------

def save_params(params: Params | dict, path) -> None:
    """Write float64 arrays back to back to ``path`` and a JSON manifest next to it."""
    arrays = params.values() if isinstance(params, Params) else params
    path = Path(path)
    manifest, offset = [], 0
    with open(path, "wb") as f:
        for name, value in arrays.items():
            data = np.asarray(value, dtype="<f8")
            f.write(data.tobytes())
            manifest.append({"name": name, "shape": list(np.shape(value)), "offset": offset})
            offset += data.nbytes
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    out = {}
    for entry in manifest:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        out[entry["name"]] = data.reshape(entry["shape"]).copy()
    return out
