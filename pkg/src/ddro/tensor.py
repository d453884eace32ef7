"""Small dense-tensor autodiff engine.

Values are float64 numpy arrays.  Every operation is one of a fixed set of
primitives (see ``PRIMITIVES``); everything else in the package is composed
from them.  Operations run eagerly and record their parents, so the same
records serve two purposes:

* ``grad(output, wrt)`` walks the recorded graph in reverse and returns
  gradients in fresh buffers (nothing is stored on the tensors);
* ``Graph`` freezes a recorded computation into a topologically ordered node
  list that ``forward_eval`` can replay on new named inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Malformed graph, bad shapes or misuse of the evaluation protocol."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# primitive table: forward(*parent_values, **attrs) and
# vjp(g, out, *parent_values, **attrs) -> tuple of parent gradients


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _mean_vjp(g, a, axis, keepdims):
    n = a.size if axis is None else a.shape[axis]
    return (_expand_reduced(g, a.shape, axis, keepdims) / n,)


def _concat_vjp(g, out, *parents, axis):
    bounds = np.cumsum([p.shape[axis] for p in parents])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_vjp(g, out, a, *, index):
    full = np.zeros_like(a)
    full[index] = g
    return (full,)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("add", lambda a, b: a + b, lambda g, o, a, b: (g, g)),
        Primitive("multiply", lambda a, b: a * b, lambda g, o, a, b: (g * b, g * a)),
        Primitive("matmul", lambda a, b: a @ b, lambda g, o, a, b: (g @ b.T, a.T @ g)),
        Primitive("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
        Primitive("relu", lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0),)),
        Primitive("square", np.square, lambda g, o, a: (2.0 * a * g,)),
        Primitive("exp", np.exp, lambda g, o, a: (g * o,)),
        Primitive("log", np.log, lambda g, o, a: (g / a,)),
        Primitive(
            "sum",
            lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
            lambda g, o, a, axis=None, keepdims=False: (
                _expand_reduced(g, a.shape, axis, keepdims).copy(),
            ),
        ),
        Primitive(
            "mean",
            lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
            lambda g, o, a, axis=None, keepdims=False: _mean_vjp(g, a, axis, keepdims),
        ),
        Primitive(
            "concatenate",
            lambda *xs, axis: np.concatenate(xs, axis=axis),
            _concat_vjp,
        ),
        Primitive("slice", lambda a, index: a[index], _slice_vjp),
        Primitive(
            "broadcast",
            lambda a, shape: np.broadcast_to(a, shape).copy(),
            lambda g, o, a, shape: (_unbroadcast(g, a.shape),),
        ),
    ]
}

# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array plus the record of how it was produced."""

    __slots__ = ("data", "requires_grad", "op", "parents", "attrs", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.attrs: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar, all composed from primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, multiply(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), multiply(self, -1.0))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, exp(multiply(log(other), -1.0)))
        return multiply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, parents: Sequence[Tensor], **attrs) -> Tensor:
    prim = PRIMITIVES[op]
    with np.errstate(all="ignore"):
        out = prim.forward(*(p.data for p in parents), **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"primitive '{op}' produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = any(p.requires_grad for p in parents)
    t.op = op
    t.parents = tuple(parents)
    t.attrs = attrs
    t.name = None
    return t


def _binary(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
        if a.shape != shape:
            a = broadcast(a, shape)
        if b.shape != shape:
            b = broadcast(b, shape)
    return _apply(op, (a, b))


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def multiply(a, b) -> Tensor:
    return _binary("multiply", a, b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _apply("matmul", (a, b))


def tanh(a) -> Tensor:
    return _apply("tanh", (as_tensor(a),))


def relu(a) -> Tensor:
    return _apply("relu", (as_tensor(a),))


def square(a) -> Tensor:
    return _apply("square", (as_tensor(a),))


def exp(a) -> Tensor:
    return _apply("exp", (as_tensor(a),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _apply("log", (a,))


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("sum", (as_tensor(a),), axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("mean", (as_tensor(a),), axis=axis, keepdims=keepdims)


def concatenate(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    return _apply("concatenate", xs, axis=ax)


def slice_(a, index) -> Tensor:
    return _apply("slice", (as_tensor(a),), index=index)


def broadcast(a, shape) -> Tensor:
    return _apply("broadcast", (as_tensor(a),), shape=tuple(shape))


# composites -----------------------------------------------------------------


def clip(a, lo: float, hi: float) -> Tensor:
    """Elementwise clamp to [lo, hi], built from two relus."""
    return add(add(relu(a - lo), -relu(a - hi)), lo)


def minimum(a, b) -> Tensor:
    a = as_tensor(a)
    return a - relu(a - b)


# ---------------------------------------------------------------------------
# reverse mode


def _toposort(outputs: Sequence[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(t, False) for t in reversed(outputs)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _reverse(order, values, seed_index, seed, wanted):
    # only propagate along paths that end in a requested leaf
    needs = [False] * len(order)
    for i, node in enumerate(order):
        needs[i] = i in wanted or any(needs[j] for j in node.pidx)
    grads: dict[int, np.ndarray] = {seed_index: seed}
    for i in range(seed_index, -1, -1):
        g = grads.get(i) if i in wanted else grads.pop(i, None)
        if g is None:
            continue
        node = order[i]
        if node.op is None:
            continue
        prim = PRIMITIVES[node.op]
        pvals = [values[j] for j in node.pidx]
        pgrads = prim.vjp(g, values[i], *pvals, **node.attrs)
        for j, pg in zip(node.pidx, pgrads):
            if not needs[j]:
                continue
            if j in grads:
                grads[j] = grads[j] + pg
            else:
                grads[j] = np.array(pg, dtype=np.float64)
    return grads


@dataclass
class _Node:
    op: str | None
    pidx: tuple
    attrs: dict


def grad(output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Gradients of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be scalar unless a ``seed`` of matching shape is given.
    Tensors not reachable from ``output`` get zero gradients.
    """
    if seed is None:
        if output.data.size != 1:
            raise GraphError(f"non-scalar output {output.shape} needs an explicit seed")
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise GraphError(f"seed shape {seed.shape} does not match output {output.shape}")
    order = _toposort([output])
    index = {id(t): i for i, t in enumerate(order)}
    nodes = [
        _Node(
            t.op,
            tuple(index[id(p)] for p in t.parents),
            t.attrs,
        )
        for t in order
    ]
    values = [t.data for t in order]
    wanted = {index[id(w)] for w in wrt if id(w) in index}
    grads = _reverse(nodes, values, len(order) - 1, seed, wanted)
    return [grads.get(index[id(w)], np.zeros_like(w.data)) if id(w) in index else np.zeros_like(w.data) for w in wrt]


# ---------------------------------------------------------------------------
# frozen graphs


class Graph:
    """A recorded computation frozen into a topologically ordered node list.

    ``inputs`` names the leaf tensors that ``forward_eval`` must be fed;
    ``params`` names further leaves that keep their recorded value unless
    overridden and receive gradients in ``backward``.  Any other leaf is a
    constant.
    """

    def __init__(
        self,
        outputs: Mapping[str, Tensor],
        inputs: Mapping[str, Tensor],
        params: Mapping[str, Tensor] | None = None,
    ):
        params = dict(params or {})
        order = _toposort(list(outputs.values()))
        index = {id(t): i for i, t in enumerate(order)}
        self.nodes: list[_Node] = []
        self.constants: dict[int, np.ndarray] = {}
        self.shapes: list[tuple] = []
        for t in order:
            self.nodes.append(
                _Node(
                    t.op,
                    tuple(index[id(p)] for p in t.parents),
                    t.attrs,
                )
            )
            self.shapes.append(t.shape)
        self.input_index = {}
        for name, t in inputs.items():
            if id(t) not in index:
                raise GraphError(f"input '{name}' does not feed any output")
            self.input_index[name] = index[id(t)]
        self.param_index = {n: index[id(t)] for n, t in params.items() if id(t) in index}
        named = set(self.input_index.values()) | set(self.param_index.values())
        for i, t in enumerate(order):
            if t.op is None and i not in named:
                self.constants[i] = t.data
        self.param_defaults = {n: order[i].data for n, i in self.param_index.items()}
        self.output_index = {n: index[id(t)] for n, t in outputs.items()}

    def __len__(self):
        return len(self.nodes)


@dataclass
class Evaluation:
    graph: Graph
    values: list
    outputs: dict

    def __getitem__(self, name):
        return self.outputs[name]


def forward_eval(graph: Graph, inputs: Mapping[str, np.ndarray]) -> Evaluation:
    """Replay ``graph`` on named inputs (and optional parameter overrides)."""
    values: list = [None] * len(graph.nodes)
    for name, i in graph.input_index.items():
        if name not in inputs:
            raise GraphError(f"missing input '{name}'")
        v = np.asarray(inputs[name], dtype=np.float64)
        if v.shape != graph.shapes[i]:
            raise GraphError(
                f"node {i} (input '{name}'): expected shape {graph.shapes[i]}, got {v.shape}"
            )
        values[i] = v
    for name, i in graph.param_index.items():
        v = np.asarray(inputs.get(name, graph.param_defaults[name]), dtype=np.float64)
        if v.shape != graph.shapes[i]:
            raise GraphError(
                f"node {i} (param '{name}'): expected shape {graph.shapes[i]}, got {v.shape}"
            )
        values[i] = v
    for i, v in graph.constants.items():
        values[i] = v
    for i, node in enumerate(graph.nodes):
        if node.op is None:
            continue
        prim = PRIMITIVES[node.op]
        with np.errstate(all="ignore"):
            out = np.asarray(
                prim.forward(*(values[j] for j in node.pidx), **node.attrs), dtype=np.float64
            )
        if not np.isfinite(out).all():
            raise NonFiniteError(f"node {i} ({node.op}) produced non-finite values")
        values[i] = out
    outputs = {n: values[i] for n, i in graph.output_index.items()}
    return Evaluation(graph, values, outputs)


def backward(evaluation: Evaluation, output: str, seed=None) -> dict[str, np.ndarray]:
    """Gradients of a named output with respect to every named input and param."""
    if not isinstance(evaluation, Evaluation):
        raise GraphError("backward requires the Evaluation returned by forward_eval")
    graph = evaluation.graph
    i_out = graph.output_index[output]
    out_val = evaluation.values[i_out]
    if seed is None:
        seed = np.ones_like(out_val)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_val.shape:
        raise GraphError(f"seed shape {seed.shape} does not match output {out_val.shape}")
    leaves = {**graph.input_index, **graph.param_index}
    grads = _reverse(graph.nodes, evaluation.values, i_out, seed, set(leaves.values()))
    return {
        n: grads.get(i, np.zeros(graph.shapes[i])) for n, i in leaves.items()
    }


# ---------------------------------------------------------------------------
# parameters and optimisation


def init_params(sizes: Sequence[int], seed: int) -> list[np.ndarray]:
    """Dense-layer parameters ``[W1, b1, W2, b2, ...]``.

    Weights are N(0, 1/fan_in); biases start at zero.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("layer spec needs at least an input and an output size")
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"zero-width layer in {sizes}")
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        params.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params, grads, state: OptimizerState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``;
    the inputs are left untouched."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state differ in length")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(new_m, new_v, step, state.lr, b1, b2, state.eps)
    return new_p, new_state


def mlp(x: Tensor, params: Sequence[Tensor], act: Callable = tanh) -> Tensor:
    """Dense network; ``act`` between layers, identity at the output."""
    h = x
    n = len(params) // 2
    for i in range(n):
        h = matmul(h, params[2 * i]) + params[2 * i + 1]
        if i < n - 1:
            h = act(h)
    return h
