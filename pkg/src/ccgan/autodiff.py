"""Define-by-run reverse-mode differentiation over dense 2-D float64 arrays.

A :class:`Tape` owns every node created during one forward pass.  Node ids
are assigned in creation order, which is already a topological order, so
``backward`` simply walks the tape from the root down to id 0.

    tape = Tape()
    w = tape.variable(np.ones((3, 1)))
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    loss = reduce(matmul(x, w), "mean")
    backward(loss)
    w.grad   # d loss / d w
"""

from numbers import Real

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LOG_EPS = 1e-12

__all__ = [
    "LOG_EPS",
    "Node",
    "Tape",
    "backward",
    "elementwise",
    "matmul",
    "reduce",
    "row_softmax",
    "stop_gradient",
    "transpose",
    "unary",
]


class Node:
    """One value in the computation tape."""

    __slots__ = ("tape", "id", "values", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, tape, values, op, parents=(), requires_grad=False, backward_fn=None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.values = values
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = backward_fn
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 node, got shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(other, self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(other, self, "mul")

    def __neg__(self):
        return unary(self, "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_2d(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got {arr.ndim} dimensions")
    return arr


def _check_finite(values, op):
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite value produced by {op!r}")


class Tape:
    """Ordered node store for a single forward/backward pass."""

    def __init__(self, rng_seed=0):
        self.nodes = []
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)

    def __len__(self):
        return len(self.nodes)

    def variable(self, values, copy=True, check=True):
        """A leaf that receives a gradient.

        ``copy=False`` aliases the caller's array; the caller then must not
        mutate it before ``backward`` has run.
        """
        arr = _as_2d(values)
        if copy:
            arr = arr.copy()
        if check:
            _check_finite(arr, "variable")
        return Node(self, arr, "variable", requires_grad=True)

    def constant(self, values, check=True):
        arr = _as_2d(values)
        if check:
            _check_finite(arr, "constant")
        return Node(self, arr, "constant")

    def _emit(self, values, op, parents, backward_fn, check=False):
        # leaves, exp/log inputs and scalar reductions are checked; anything
        # non-finite in between propagates into one of those
        if check:
            _check_finite(values, op)
        needs = any(p.requires_grad for p in parents)
        return Node(self, values, op, parents, needs, backward_fn if needs else None)


def _accumulate(node, g, fresh=False):
    """Add ``g`` into ``node.grad``; ``fresh`` marks a temporary safe to adopt."""
    if node.grad is None:
        if g.shape != node.shape:
            node.grad = np.broadcast_to(g, node.shape).copy()
        else:
            node.grad = g if fresh else g.copy()
    else:
        node.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _lift(x, tape):
    if isinstance(x, Node):
        return x
    if isinstance(x, (Real, np.ndarray)):
        return tape.constant(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tape operand")


def _pair(a, b):
    tape = a.tape if isinstance(a, Node) else getattr(b, "tape", None)
    if tape is None:
        raise TypeError("at least one operand must be a Node")
    a, b = _lift(a, tape), _lift(b, tape)
    if a.tape is not b.tape:
        raise ContractError("operands belong to different tapes")
    return tape, a, b


def matmul(a, b):
    tape, a, b = _pair(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = None

    def bw():
        if a.requires_grad:
            _accumulate(a, out.grad @ b.values.T, True)
        if b.requires_grad:
            _accumulate(b, a.values.T @ out.grad, True)

    out = tape._emit(a.values @ b.values, "matmul", (a, b), bw)
    return out


def elementwise(a, b, kind):
    """Binary add/sub/mul with (rows,1)/(1,cols)/(1,1) broadcasting."""
    tape, a, b = _pair(a, b)
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{kind} shape mismatch: {a.shape} vs {b.shape}") from None
    out = None
    if kind == "add":
        values = a.values + b.values

        def bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad, b.shape))

    elif kind == "sub":
        values = a.values - b.values

        def bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-out.grad, b.shape), True)

    elif kind == "mul":
        values = a.values * b.values

        def bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.values, a.shape), True)
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.values, b.shape), True)

    else:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    out = tape._emit(values, kind, (a, b), bw)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def unary(a, kind):
    tape = a.tape
    x = a.values
    out = None
    if kind == "relu":
        values = np.maximum(x, 0.0)

        def bw():
            _accumulate(a, out.grad * (x > 0.0), True)

    elif kind == "tanh":
        values = np.tanh(x)

        def bw():
            _accumulate(a, out.grad * (1.0 - values * values), True)

    elif kind == "sigmoid":
        values = _sigmoid(x)

        def bw():
            _accumulate(a, out.grad * values * (1.0 - values), True)

    elif kind == "exp":
        _check_finite(x, kind)
        with np.errstate(over="ignore"):
            values = np.exp(x)

        def bw():
            _accumulate(a, out.grad * values, True)

    elif kind == "log":
        _check_finite(x, kind)
        clamped = np.maximum(x, LOG_EPS)
        values = np.log(clamped)

        def bw():
            _accumulate(a, out.grad * np.where(x > LOG_EPS, 1.0 / clamped, 0.0), True)

    elif kind == "neg":
        values = -x

        def bw():
            _accumulate(a, -out.grad, True)

    else:
        raise ContractError(f"unknown unary kind {kind!r}")
    out = tape._emit(values, kind, (a,), bw, check=kind in ("exp", "log"))
    return out


def row_softmax(a):
    if a.values.size == 0:
        raise DimensionError("row_softmax of an empty node")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=1, keepdims=True)
    out = None

    def bw():
        g = out.grad
        _accumulate(a, values * (g - (g * values).sum(axis=1, keepdims=True)), True)

    out = a.tape._emit(values, "row_softmax", (a,), bw, check=True)
    return out


def transpose(a):
    out = None

    def bw():
        _accumulate(a, out.grad.T)

    out = a.tape._emit(a.values.T.copy(), "transpose", (a,), bw)
    return out


def reduce(a, kind):
    """Reduce to a 1x1 node: ``sum``, ``mean`` or ``l1_norm``."""
    x = a.values
    if x.size == 0:
        raise DimensionError(f"{kind} of an empty node")
    out = None
    if kind == "sum":
        value = x.sum()

        def bw():
            _accumulate(a, np.full(x.shape, out.grad[0, 0]), True)

    elif kind == "mean":
        value = x.mean()

        def bw():
            _accumulate(a, np.full(x.shape, out.grad[0, 0] / x.size), True)

    elif kind == "l1_norm":
        value = np.abs(x).sum()

        def bw():
            # np.sign(0) == 0 gives the symmetric subgradient
            _accumulate(a, np.sign(x) * out.grad[0, 0], True)

    else:
        raise ContractError(f"unknown reduce kind {kind!r}")
    out = a.tape._emit(np.array([[value]]), kind, (a,), bw, check=True)
    return out


def stop_gradient(a):
    return Node(a.tape, a.values.copy(), "stop_gradient", (a,), requires_grad=False)


def backward(root):
    """Fill ``.grad`` with d root / d node for every requires_grad ancestor.

    Gradients left over from an earlier backward on the same tape are
    discarded first, so repeated calls give identical results.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got shape {root.shape}")
    nodes = root.tape.nodes[: root.id + 1]
    for node in nodes:
        node.grad = None
    root.grad = np.ones((1, 1))
    for node in reversed(nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()
