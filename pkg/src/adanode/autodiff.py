"""Reverse-mode automatic differentiation on a define-by-run tape.

Values are dense row-major float64 arrays. A ``Graph`` records every primitive
applied to its nodes; ``backward`` replays the tape in reverse to accumulate
vector-Jacobian products into the named leaves. The same primitive functions
also accept plain numpy arrays, in which case they evaluate eagerly and record
nothing, so model code can be written once and run in either mode.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ShapeError, StateError, UsageError

LOG_2PI = math.log(2.0 * math.pi)

# softplus(x) underflows to 0.0 below roughly x = -745; clamp to the smallest
# positive normal so the output stays strictly positive for finite inputs.
_SOFTPLUS_FLOOR = np.finfo(np.float64).tiny


class Tensor:
    """Immutable dense float64 array. Construction rejects NaN and Inf."""

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            try:
                arr = arr.reshape(tuple(int(s) for s in shape))
            except ValueError as exc:
                raise ShapeError(str(exc)) from None
        if not np.all(np.isfinite(arr)):
            raise ShapeError("tensor values must be finite")
        arr.flags.writeable = False
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray backing this tensor."""
        return self._array

    def tolist(self):
        return self._array.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _value_of(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def _graph_of(*args) -> "Graph | None":
    graph = None
    for a in args:
        if isinstance(a, Node):
            if graph is None:
                graph = a.graph
            elif graph is not a.graph:
                raise UsageError("operands belong to different graphs")
    return graph


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One recorded value on a graph."""

    __slots__ = ("graph", "idx", "op", "value", "parents", "vjp", "fwd", "name")

    # Make numpy hand mixed ndarray/Node arithmetic to our reflected dunders
    # instead of broadcasting the Node as a python object.
    __array_ufunc__ = None

    def __init__(self, graph, idx, op, value, parents, vjp, fwd, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.fwd = fwd
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.value.shape})"


class Graph:
    """Define-by-run tape: topologically ordered nodes plus named leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}

    def _record(self, op, value, parents, vjp, fwd, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), op, value, tuple(parents), vjp, fwd, name)
        self.nodes.append(node)
        return node

    def leaf(self, name: str, values) -> Node:
        """Register a named input/parameter tensor on the tape."""
        if name in self.leaves:
            raise UsageError(f"duplicate leaf name: {name!r}")
        value = _value_of(values)
        if not np.all(np.isfinite(value)):
            raise ShapeError(f"leaf {name!r} must be finite")
        node = self._record("leaf", value, (), None, None, name)
        self.leaves[name] = node
        return node

    def leaves_for(self, params: "ParameterSet") -> dict[str, Node]:
        """Register every entry of a parameter set as a leaf."""
        return {name: self.leaf(name, params[name]) for name in params.names()}

    def constant(self, values) -> Node:
        return self._record("const", _value_of(values), (), None, None)

    def as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise UsageError("node belongs to a different graph")
            return x
        return self.constant(x)

    @property
    def output(self) -> Node:
        if not self.nodes:
            raise StateError("graph has no recorded operations")
        return self.nodes[-1]


class ParameterSet:
    """Named map of tensors with per-entry freeze flags and unique names."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, tensor, frozen: bool = False) -> None:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name: {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self._entries[name] = tensor
        if frozen:
            self._frozen.add(name)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_frozen(self, name: str) -> bool:
        if name not in self._entries:
            raise KeyError(name)
        return name in self._frozen

    def freeze(self, name: str) -> None:
        if name not in self._entries:
            raise KeyError(name)
        self._frozen.add(name)

    def unfreeze(self, name: str) -> None:
        if name not in self._entries:
            raise KeyError(name)
        self._frozen.discard(name)

    def freeze_all(self) -> None:
        self._frozen = set(self._entries)

    def replace(self, name: str, tensor) -> None:
        """Swap in a new value; refuses to touch frozen entries."""
        if name not in self._entries:
            raise KeyError(name)
        if name in self._frozen:
            raise StateError(f"parameter {name!r} is frozen")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        if tensor.shape != self._entries[name].shape:
            raise ShapeError(f"shape mismatch for {name!r}")
        self._entries[name] = tensor

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        out._entries = dict(self._entries)
        out._frozen = set(self._frozen)
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.array for name, t in self._entries.items()}


# ---------------------------------------------------------------------------
# Primitive operations. Each works eagerly on arrays and records on a tape
# when any argument is a Node.
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = _value_of(a), _value_of(b)
    out = av + bv
    g = _graph_of(a, b)
    if g is None:
        return out
    ash, bsh = av.shape, bv.shape

    def vjp(grad):
        return _unbroadcast(grad, ash), _unbroadcast(grad, bsh)

    return g._record("add", out, (g.as_node(a), g.as_node(b)), vjp, lambda x, y: x + y)


def sub(a, b):
    av, bv = _value_of(a), _value_of(b)
    out = av - bv
    g = _graph_of(a, b)
    if g is None:
        return out
    ash, bsh = av.shape, bv.shape

    def vjp(grad):
        return _unbroadcast(grad, ash), _unbroadcast(-grad, bsh)

    return g._record("sub", out, (g.as_node(a), g.as_node(b)), vjp, lambda x, y: x - y)


def mul(a, b):
    av, bv = _value_of(a), _value_of(b)
    out = av * bv
    g = _graph_of(a, b)
    if g is None:
        return out
    ash, bsh = av.shape, bv.shape

    def vjp(grad):
        return _unbroadcast(grad * bv, ash), _unbroadcast(grad * av, bsh)

    return g._record("mul", out, (g.as_node(a), g.as_node(b)), vjp, lambda x, y: x * y)


def div(a, b):
    av, bv = _value_of(a), _value_of(b)
    out = av / bv
    g = _graph_of(a, b)
    if g is None:
        return out
    ash, bsh = av.shape, bv.shape

    def vjp(grad):
        return (
            _unbroadcast(grad / bv, ash),
            _unbroadcast(-grad * av / (bv * bv), bsh),
        )

    return g._record("div", out, (g.as_node(a), g.as_node(b)), vjp, lambda x, y: x / y)


def neg(a):
    av = _value_of(a)
    g = _graph_of(a)
    if g is None:
        return -av
    return g._record("neg", -av, (a,), lambda grad: (-grad,), lambda x: -x)


def power(a, n):
    if not isinstance(n, (int, np.integer)):
        raise UsageError("power exponent must be an integer")
    n = int(n)
    av = _value_of(a)
    out = av ** n
    g = _graph_of(a)
    if g is None:
        return out

    def vjp(grad):
        return (grad * n * av ** (n - 1),)

    return g._record("pow", out, (a,), vjp, lambda x: x ** n)


def exp(a):
    av = _value_of(a)
    out = np.exp(av)
    g = _graph_of(a)
    if g is None:
        return out
    return g._record("exp", out, (a,), lambda grad: (grad * out,), np.exp)


def log(a):
    av = _value_of(a)
    if np.any(av <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = np.log(av)
    g = _graph_of(a)
    if g is None:
        return out
    return g._record("log", out, (a,), lambda grad: (grad / av,), np.log)


def affine(x, W, b):
    """y = x @ W.T + b for x shaped (..., n), W (m, n), b (m,)."""
    xv, Wv, bv = _value_of(x), _value_of(W), _value_of(b)
    if Wv.ndim != 2:
        raise ShapeError(f"weight must be 2-d, got shape {Wv.shape}")
    m, n = Wv.shape
    if xv.shape[-1:] != (n,):
        raise ShapeError(f"affine input has trailing dim {xv.shape[-1:]}, expected {n}")
    if bv.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {bv.shape}")
    out = xv @ Wv.T + bv
    g = _graph_of(x, W, b)
    if g is None:
        return out
    lead = tuple(range(max(0, xv.ndim - 1)))

    def vjp(grad):
        gx = grad @ Wv
        gW = np.tensordot(grad, xv, axes=(lead, lead)) if lead else np.outer(grad, xv)
        gb = grad.sum(axis=lead) if lead else grad
        return gx, gW, gb

    return g._record(
        "affine",
        out,
        (g.as_node(x), g.as_node(W), g.as_node(b)),
        vjp,
        lambda xv, Wv, bv: xv @ Wv.T + bv,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.logaddexp(0.0, x), _SOFTPLUS_FLOOR)


ACTIVATION_KINDS = ("tanh", "relu", "softplus")


def activation(x, kind: str):
    """Elementwise nonlinearity; relu uses subgradient 0 at the kink."""
    if kind not in ACTIVATION_KINDS:
        raise UsageError(f"unknown activation kind: {kind!r}")
    xv = _value_of(x)
    if kind == "tanh":
        out = np.tanh(xv)
        deriv = lambda: 1.0 - out * out
        fwd = np.tanh
    elif kind == "relu":
        out = np.maximum(xv, 0.0)
        deriv = lambda: (xv > 0.0).astype(np.float64)
        fwd = lambda v: np.maximum(v, 0.0)
    else:
        out = _softplus(xv)
        deriv = lambda: _sigmoid(xv)
        fwd = _softplus
    g = _graph_of(x)
    if g is None:
        return out

    def vjp(grad):
        return (grad * deriv(),)

    return g._record(kind, out, (x,), vjp, fwd)


def gaussian_log_density(x, mu, sigma):
    """Elementwise log N(x; mu, sigma^2); sigma must be strictly positive."""
    xv, mv, sv = _value_of(x), _value_of(mu), _value_of(sigma)
    if np.any(sv <= 0.0):
        raise DomainError("sigma must be strictly positive")
    z = (xv - mv) / sv
    out = -0.5 * LOG_2PI - np.log(sv) - 0.5 * z * z
    g = _graph_of(x, mu, sigma)
    if g is None:
        return out
    xsh, msh, ssh = xv.shape, mv.shape, sv.shape

    def vjp(grad):
        diff = xv - mv
        inv_var = 1.0 / (sv * sv)
        gx = -grad * diff * inv_var
        gm = grad * diff * inv_var
        gs = grad * (diff * diff * inv_var / sv - 1.0 / sv)
        return _unbroadcast(gx, xsh), _unbroadcast(gm, msh), _unbroadcast(gs, ssh)

    def fwd(xv, mv, sv):
        zz = (xv - mv) / sv
        return -0.5 * LOG_2PI - np.log(sv) - 0.5 * zz * zz

    return g._record(
        "gaussian_log_density",
        out,
        (g.as_node(x), g.as_node(mu), g.as_node(sigma)),
        vjp,
        fwd,
    )


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def nsum(x, axis=None, keepdims: bool = False):
    xv = _value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    g = _graph_of(x)
    if g is None:
        return out
    shape = xv.shape
    axes = _norm_axis(axis, xv.ndim)

    def vjp(grad):
        grad = np.asarray(grad)
        if axes is not None and not keepdims:
            grad = np.expand_dims(grad, axis=axes)
        return (np.broadcast_to(grad, shape).copy(),)

    return g._record(
        "sum", out, (x,), vjp, lambda v: v.sum(axis=axis, keepdims=keepdims)
    )


def nmean(x, axis=None, keepdims: bool = False):
    xv = _value_of(x)
    out = xv.mean(axis=axis, keepdims=keepdims)
    g = _graph_of(x)
    if g is None:
        return out
    shape = xv.shape
    axes = _norm_axis(axis, xv.ndim)
    count = xv.size if axes is None else int(np.prod([shape[a] for a in axes]))

    def vjp(grad):
        grad = np.asarray(grad)
        if axes is not None and not keepdims:
            grad = np.expand_dims(grad, axis=axes)
        return (np.broadcast_to(grad, shape).copy() / count,)

    return g._record(
        "mean", out, (x,), vjp, lambda v: v.mean(axis=axis, keepdims=keepdims)
    )


def stack(xs, axis: int = 0):
    vals = [_value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    g = _graph_of(*xs)
    if g is None:
        return out
    parents = tuple(g.as_node(x) for x in xs)

    def vjp(grad):
        moved = np.moveaxis(grad, axis, 0)
        return tuple(moved[i] for i in range(len(parents)))

    return g._record(
        "stack", out, parents, vjp, lambda *vs: np.stack(vs, axis=axis)
    )


def concat(xs, axis: int = 0):
    vals = [_value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    g = _graph_of(*xs)
    if g is None:
        return out
    parents = tuple(g.as_node(x) for x in xs)
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def vjp(grad):
        pieces = []
        for i in range(len(parents)):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(grad[tuple(index)])
        return tuple(pieces)

    return g._record(
        "concat", out, parents, vjp, lambda *vs: np.concatenate(vs, axis=axis)
    )


def reshape(x, shape):
    xv = _value_of(x)
    out = xv.reshape(shape)
    g = _graph_of(x)
    if g is None:
        return out
    orig = xv.shape

    def vjp(grad):
        return (grad.reshape(orig),)

    return g._record("reshape", out, (x,), vjp, lambda v: v.reshape(shape))


def moveaxis(x, src: int, dst: int):
    xv = _value_of(x)
    out = np.moveaxis(xv, src, dst)
    g = _graph_of(x)
    if g is None:
        return out

    def vjp(grad):
        return (np.moveaxis(grad, dst, src),)

    return g._record(
        "moveaxis", out, (x,), vjp, lambda v: np.moveaxis(v, src, dst)
    )


def take(x, key):
    """Basic (non-repeating) indexing; gradient scatters into zeros."""
    xv = _value_of(x)
    out = xv[key]
    g = _graph_of(x)
    if g is None:
        return out
    shape = xv.shape

    def vjp(grad):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = grad
        return (full,)

    return g._record("take", out, (x,), vjp, lambda v: v[key])


def resample_time(weights: np.ndarray, x):
    """Apply a fixed (L, T) interpolation matrix along the -2 (time) axis.

    x has shape (..., T, d); the result has shape (..., L, d).
    """
    Wv = np.asarray(weights, dtype=np.float64)
    xv = _value_of(x)
    if Wv.ndim != 2 or xv.ndim < 2 or xv.shape[-2] != Wv.shape[1]:
        raise ShapeError(
            f"resample weights {Wv.shape} do not match values {xv.shape}"
        )
    out = np.einsum("lt,...td->...ld", Wv, xv)
    g = _graph_of(x)
    if g is None:
        return out

    def vjp(grad):
        return (np.einsum("lt,...ld->...td", Wv, grad),)

    return g._record(
        "resample_time",
        out,
        (x,),
        vjp,
        lambda v: np.einsum("lt,...td->...ld", Wv, v),
    )


# ---------------------------------------------------------------------------
# Backward pass, tape replay, finite-difference checking.
# ---------------------------------------------------------------------------


def backward(graph: Graph, seed_gradient, output: Node | None = None) -> dict[str, Tensor]:
    """Accumulate d(output)/d(leaf) for every named leaf.

    seed_gradient must match the output's shape; the result maps each leaf
    name to its gradient (zeros if the leaf does not influence the output).
    """
    if not graph.nodes:
        raise StateError("backward called before any forward pass")
    out = graph.output if output is None else output
    if out.graph is not graph:
        raise UsageError("output node belongs to a different graph")
    seed = np.asarray(seed_gradient, dtype=np.float64)
    if seed.shape != out.value.shape:
        try:
            seed = np.broadcast_to(seed, out.value.shape).astype(np.float64)
        except ValueError:
            raise ShapeError(
                f"seed gradient shape {seed.shape} does not match output {out.value.shape}"
            ) from None
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[out.idx] = np.array(seed, dtype=np.float64)
    for node in reversed(graph.nodes[: out.idx + 1]):
        grad = grads[node.idx]
        if grad is None or node.vjp is None:
            continue
        for parent, contrib in zip(node.parents, node.vjp(grad)):
            if contrib is None:
                continue
            contrib = np.asarray(contrib, dtype=np.float64)
            if grads[parent.idx] is None:
                grads[parent.idx] = contrib.copy()
            else:
                grads[parent.idx] = grads[parent.idx] + contrib
    result: dict[str, Tensor] = {}
    for name, leaf in graph.leaves.items():
        grad = grads[leaf.idx]
        if grad is None:
            grad = np.zeros_like(leaf.value)
        result[name] = Tensor(grad)
    return result


def replay(
    graph: Graph,
    overrides: Mapping[str, np.ndarray] | None = None,
    output: Node | None = None,
    collect_relu_signs: bool = False,
):
    """Re-evaluate the recorded tape, optionally overriding leaf values.

    Returns the output value, or (value, relu_sign_patterns) when asked to
    collect the sign of every relu input (used for kink detection).
    """
    out = graph.output if output is None else output
    overrides = overrides or {}
    values: list[np.ndarray | None] = [None] * (out.idx + 1)
    signs: list[np.ndarray] = []
    for node in graph.nodes[: out.idx + 1]:
        if node.fwd is None:
            if node.name is not None and node.name in overrides:
                values[node.idx] = np.asarray(overrides[node.name], dtype=np.float64)
            else:
                values[node.idx] = node.value
        else:
            args = [values[p.idx] for p in node.parents]
            values[node.idx] = node.fwd(*args)
            if collect_relu_signs and node.op == "relu":
                signs.append(values[node.parents[0].idx] > 0.0)
    result = values[out.idx]
    if collect_relu_signs:
        return result, signs
    return result


class GradCheckReport:
    """Result of a finite-difference gradient check."""

    def __init__(self, max_relative_error, per_parameter, excluded):
        self.max_relative_error = max_relative_error
        self.per_parameter = per_parameter
        self.excluded = excluded

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(max_relative_error={self.max_relative_error:.3e}, "
            f"excluded={len(self.excluded)})"
        )


def _symmetric_rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-4)


def grad_check(
    graph: Graph,
    params: ParameterSet,
    eps: float = 1e-5,
    output: Node | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    Perturbation pairs whose forward pass crosses a relu kink are excluded
    from the error maximum and reported in the result instead.
    """
    out = graph.output if output is None else output
    if out.value.size != 1:
        raise UsageError("grad_check requires a scalar-valued output")
    analytic = backward(graph, np.ones_like(out.value), output=out)
    base_value, base_signs = replay(graph, output=out, collect_relu_signs=True)
    del base_value
    per_parameter: dict[str, float] = {}
    excluded: list[str] = []
    worst = 0.0
    for name in params.names():
        if name not in graph.leaves:
            continue
        base = np.array(graph.leaves[name].value, dtype=np.float64)
        grad = analytic[name].array
        flat = base.reshape(-1)
        param_worst = 0.0
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] = flat[j] + eps
            plus, plus_signs = replay(
                graph, {name: bumped.reshape(base.shape)}, out, collect_relu_signs=True
            )
            bumped[j] = flat[j] - eps
            minus, minus_signs = replay(
                graph, {name: bumped.reshape(base.shape)}, out, collect_relu_signs=True
            )
            crossed = any(
                not np.array_equal(p, m) or not np.array_equal(p, b)
                for p, m, b in zip(plus_signs, minus_signs, base_signs)
            )
            if crossed:
                excluded.append(f"{name}[{j}] crosses a relu kink")
                continue
            numeric = (float(plus) - float(minus)) / (2.0 * eps)
            err = _symmetric_rel_error(float(grad.reshape(-1)[j]), numeric)
            param_worst = max(param_worst, err)
        per_parameter[name] = param_worst
        worst = max(worst, param_worst)
    return GradCheckReport(worst, per_parameter, excluded)
