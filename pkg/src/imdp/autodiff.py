"""Reverse-mode differentiation over dense float64 tensors.

Graphs are static: nodes are appended once, with concrete shapes
(including the batch dimension), and then ``forward``/``backward`` run
as many times as needed with different bindings.  The operation set is
the minimal closed set needed by the adversarial objectives and the
code-recovery head: affine maps, pointwise nonlinearities, softmax
cross-entropy, fixed-variance Gaussian log-likelihood, full reductions,
and scalar arithmetic.

Every value is a 64-bit row-major numpy array.  Any non-finite entry
produced by a public operation raises ``NonFiniteError`` instead of
propagating silently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.01
_LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared in a tensor value."""


class GraphError(ValueError):
    """Malformed graph construction or evaluation request."""


def as_tensor(value, where: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite entries")
    return arr


class ParamStore:
    """Named parameters with matching gradient slots.

    Parameter arrays are owned by the store and mutated in place by
    optimizers and clipping, so several views (e.g. a merged store used
    by a composite graph) observe a single storage location per name.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = as_tensor(value, where=f"param {name!r}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.params)

    def names_with_prefix(self, *prefixes: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefixes)]

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    @classmethod
    def union(cls, *stores: "ParamStore") -> "ParamStore":
        """A store sharing the member stores' parameter arrays (not copies)."""
        merged = cls()
        for store in stores:
            for name, arr in store.params.items():
                if name in merged.params:
                    raise ValueError(f"parameter name collision: {name!r}")
                merged.params[name] = arr
                merged.grads[name] = np.zeros_like(arr)
        return merged


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...]
    shape: tuple[int, ...]
    ref: str | None = None          # input/param name
    value: np.ndarray | None = None  # const payload
    k: float = 0.0                   # scalar operand for scale/add_scalar


class Graph:
    """A static computation graph; node ids are ints in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._input_names: set[str] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def shape(self, node: int) -> tuple[int, ...]:
        return self.nodes[node].shape

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _check(self, node: int) -> Node:
        if not 0 <= node < len(self.nodes):
            raise GraphError(f"unknown node id {node}")
        return self.nodes[node]

    # -- leaves ---------------------------------------------------------

    def input(self, name: str, shape) -> int:
        if name in self._input_names:
            raise GraphError(f"duplicate input name {name!r}")
        self._input_names.add(name)
        return self._append(Node("input", (), tuple(shape), ref=name))

    def param(self, name: str, shape) -> int:
        return self._append(Node("param", (), tuple(shape), ref=name))

    def const(self, value) -> int:
        arr = as_tensor(value, where="const")
        return self._append(Node("const", (), arr.shape, value=arr))

    # -- layers ---------------------------------------------------------

    def affine(self, x: int, w: int, b: int) -> int:
        xs, ws, bs = self.shape(x), self.shape(w), self.shape(b)
        if len(xs) != 2 or len(ws) != 2 or len(bs) != 1:
            raise ShapeError(f"affine needs (b,n)@(n,m)+(m,), got {xs} {ws} {bs}")
        if xs[1] != ws[0] or ws[1] != bs[0]:
            raise ShapeError(f"affine shape mismatch: {xs} {ws} {bs}")
        return self._append(Node("affine", (x, w, b), (xs[0], ws[1])))

    def _unary(self, op: str, x: int) -> int:
        return self._append(Node(op, (x,), self.shape(x)))

    def tanh(self, x: int) -> int:
        return self._unary("tanh", x)

    def relu(self, x: int) -> int:
        return self._unary("relu", x)

    def leaky_relu(self, x: int) -> int:
        return self._unary("leaky_relu", x)

    # -- losses ---------------------------------------------------------

    def _check_target(self, t: int, op: str) -> None:
        if self.nodes[t].op not in ("input", "const"):
            raise GraphError(f"{op} targets must be input or const nodes")

    def softmax_xent(self, logits: int, targets: int) -> int:
        """Mean over rows of cross-entropy between softmax(logits) and targets.

        Targets are treated as constants; no gradient flows into them.
        """
        ls, ts = self.shape(logits), self.shape(targets)
        if len(ls) != 2 or ls != ts:
            raise ShapeError(f"softmax_xent needs matching (b,K), got {ls} {ts}")
        self._check_target(targets, "softmax_xent")
        return self._append(Node("softmax_xent", (logits, targets), ()))

    def gaussian_loglik(self, means: int, targets: int) -> int:
        """Mean over rows of the unit-variance Gaussian log-density of
        targets at the predicted means, summed over columns."""
        ms, ts = self.shape(means), self.shape(targets)
        if len(ms) != 2 or ms != ts:
            raise ShapeError(f"gaussian_loglik needs matching (b,n), got {ms} {ts}")
        self._check_target(targets, "gaussian_loglik")
        return self._append(Node("gaussian_loglik", (means, targets), ()))

    # -- reductions and scalar arithmetic -------------------------------

    def mean(self, x: int) -> int:
        return self._append(Node("mean", (x,), ()))

    def sum(self, x: int) -> int:
        return self._append(Node("sum", (x,), ()))

    def _binary(self, op: str, a: int, b: int) -> int:
        if self.shape(a) != self.shape(b):
            raise ShapeError(f"{op} needs equal shapes, got {self.shape(a)} {self.shape(b)}")
        return self._append(Node(op, (a, b), self.shape(a)))

    def add(self, a: int, b: int) -> int:
        return self._binary("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self._binary("sub", a, b)

    def neg(self, a: int) -> int:
        return self._append(Node("neg", (a,), self.shape(a)))

    def scale(self, a: int, k: float) -> int:
        return self._append(Node("scale", (a,), self.shape(a), k=float(k)))

    def add_scalar(self, a: int, c: float) -> int:
        return self._append(Node("add_scalar", (a,), self.shape(a), k=float(c)))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(graph: Graph, store: ParamStore, inputs: dict[str, np.ndarray]) -> list[np.ndarray]:
    """Evaluate every node; returns activations indexed by node id.

    Pure: identical bindings produce bit-identical activations.
    """
    unknown = set(inputs) - graph._input_names
    if unknown:
        raise GraphError(f"unknown inputs: {sorted(unknown)}")
    acts: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for i, nd in enumerate(graph.nodes):
        a = nd.args
        if nd.op == "input":
            if nd.ref not in inputs:
                raise GraphError(f"input {nd.ref!r} not bound")
            v = np.asarray(inputs[nd.ref], dtype=np.float64)
            if v.shape != nd.shape:
                raise ShapeError(f"input {nd.ref!r}: expected {nd.shape}, got {v.shape}")
        elif nd.op == "param":
            if nd.ref not in store.params:
                raise GraphError(f"parameter {nd.ref!r} not in store")
            v = store.params[nd.ref]
            if v.shape != nd.shape:
                raise ShapeError(f"param {nd.ref!r}: expected {nd.shape}, got {v.shape}")
        elif nd.op == "const":
            v = nd.value
        elif nd.op == "affine":
            v = acts[a[0]] @ acts[a[1]] + acts[a[2]]
        elif nd.op == "tanh":
            v = np.tanh(acts[a[0]])
        elif nd.op == "relu":
            v = np.maximum(acts[a[0]], 0.0)
        elif nd.op == "leaky_relu":
            x = acts[a[0]]
            v = np.where(x > 0.0, x, LEAKY_SLOPE * x)
        elif nd.op == "softmax_xent":
            logits, t = acts[a[0]], acts[a[1]]
            m = logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
            v = np.asarray((lse - (t * logits).sum(axis=1)).mean())
        elif nd.op == "gaussian_loglik":
            mu, t = acts[a[0]], acts[a[1]]
            d = t - mu
            ncols = mu.shape[1]
            v = np.asarray((-0.5 * _LOG_2PI * ncols - 0.5 * (d * d).sum(axis=1)).mean())
        elif nd.op == "mean":
            v = np.asarray(acts[a[0]].mean())
        elif nd.op == "sum":
            v = np.asarray(acts[a[0]].sum())
        elif nd.op == "add":
            v = acts[a[0]] + acts[a[1]]
        elif nd.op == "sub":
            v = acts[a[0]] - acts[a[1]]
        elif nd.op == "neg":
            v = -acts[a[0]]
        elif nd.op == "scale":
            v = nd.k * acts[a[0]]
        elif nd.op == "add_scalar":
            v = acts[a[0]] + nd.k
        else:  # pragma: no cover
            raise GraphError(f"unknown op {nd.op!r}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"node {i} ({nd.op}): non-finite value")
        acts[i] = v
    return acts


def backward(graph: Graph, store: ParamStore, acts: list[np.ndarray], loss: int) -> dict[str, np.ndarray]:
    """Fill the store's gradient slots with d(loss)/d(param).

    The loss node must be scalar-shaped and ``acts`` must come from a
    matching ``forward`` run.  Slots are zeroed first; gradients from
    multiple uses of a parameter accumulate.
    """
    nd = graph._check(loss)
    if nd.shape != ():
        raise ShapeError(f"loss node must be scalar, got shape {nd.shape}")
    if acts is None or len(acts) != len(graph.nodes):
        raise GraphError("backward requires activations from a prior forward")
    store.zero_grads()
    node_grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    node_grads[loss] = np.ones(())

    def acc(j: int, val: np.ndarray) -> None:
        if node_grads[j] is None:
            node_grads[j] = np.array(val, dtype=np.float64)
        else:
            node_grads[j] = node_grads[j] + val

    for i in range(len(graph.nodes) - 1, -1, -1):
        g = node_grads[i]
        if g is None:
            continue
        nd = graph.nodes[i]
        a = nd.args
        if nd.op == "param":
            store.grads[nd.ref] += g
        elif nd.op in ("input", "const"):
            pass
        elif nd.op == "affine":
            x, w = acts[a[0]], acts[a[1]]
            acc(a[0], g @ w.T)
            acc(a[1], x.T @ g)
            acc(a[2], g.sum(axis=0))
        elif nd.op == "tanh":
            y = acts[i]
            acc(a[0], g * (1.0 - y * y))
        elif nd.op == "relu":
            acc(a[0], g * (acts[a[0]] > 0.0))
        elif nd.op == "leaky_relu":
            x = acts[a[0]]
            acc(a[0], g * np.where(x > 0.0, 1.0, LEAKY_SLOPE))
        elif nd.op == "softmax_xent":
            logits, t = acts[a[0]], acts[a[1]]
            p = _softmax_rows(logits)
            acc(a[0], g * (p - t) / logits.shape[0])
        elif nd.op == "gaussian_loglik":
            mu, t = acts[a[0]], acts[a[1]]
            acc(a[0], g * (t - mu) / mu.shape[0])
        elif nd.op == "mean":
            acc(a[0], np.full(graph.shape(a[0]), float(g) / acts[a[0]].size))
        elif nd.op == "sum":
            acc(a[0], np.full(graph.shape(a[0]), float(g)))
        elif nd.op == "add":
            acc(a[0], g)
            acc(a[1], g)
        elif nd.op == "sub":
            acc(a[0], g)
            acc(a[1], -g)
        elif nd.op == "neg":
            acc(a[0], -g)
        elif nd.op == "scale":
            acc(a[0], nd.k * g)
        elif nd.op == "add_scalar":
            acc(a[0], g)
        else:  # pragma: no cover
            raise GraphError(f"unknown op {nd.op!r}")
    return store.grads


def grad_check(graph: Graph, store: ParamStore, inputs: dict[str, np.ndarray],
               loss: int, h: float = 1e-5) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    acts = forward(graph, store, inputs)
    backward(graph, store, acts, loss)
    analytic = {name: g.copy() for name, g in store.grads.items()}

    def loss_value() -> float:
        return float(forward(graph, store, inputs)[loss])

    worst = 0.0
    for name, arr in store.params.items():
        flat = arr.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_value()
            flat[j] = orig - h
            dn = loss_value()
            flat[j] = orig
            numeric = (up - dn) / (2.0 * h)
            err = abs(aflat[j] - numeric) / max(1.0, abs(aflat[j]))
            if err > worst:
                worst = err
    return worst
