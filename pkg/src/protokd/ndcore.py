"""Dense float64 tensors with a small define-by-run reverse-mode engine.

A :class:`Var` wraps a numpy array and remembers how it was produced. Every
primitive below returns a new ``Var`` whose ``parents`` carry vector-Jacobian
product closures; :func:`backward` walks them in reverse topological order.

A :class:`ComputeGraph` is a pure Python function over named input ``Var`` s.
Calling :func:`forward` or :func:`backward` traces that function afresh, so a
graph holds no mutable state and can be shared between threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01

Array = np.ndarray
VJP = Callable[[Array], Array]


class GraphError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(GraphError):
    """Raised when a primitive receives operands with incompatible shapes."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class UnboundInputError(GraphError):
    """Raised when a graph input has no binding."""


class NonScalarOutputError(GraphError):
    """Raised when backward is requested for a non-scalar output."""


def as_tensor(value) -> Array:
    """Return ``value`` as a contiguous float64 array (copying only if needed)."""
    arr = np.asarray(value, dtype=np.float64)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class Var:
    """A node in a traced computation.

    Attributes:
        value: The forward value (float64 array, never mutated after creation).
        parents: Pairs of (parent Var, vjp closure mapping the output cotangent
            to the parent's cotangent).
        op: Name of the producing primitive, used in error messages.
        requires_grad: Whether any gradient can flow into this node.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, parents: Sequence[tuple["Var", VJP]] = (),
                 op: str = "leaf", requires_grad: bool = False, name: str | None = None):
        self.value = as_tensor(value)
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Var({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def lift(x) -> Var:
    """Wrap a constant into a Var that carries no gradient."""
    if isinstance(x, Var):
        return x
    return Var(x, op="const")


constant = lift


def make_op(op: str, value, parents: Iterable[tuple[Var, VJP]]) -> Var:
    """Create a primitive output node.

    Parents that do not require gradients are dropped so backward never visits
    constant subgraphs. Exposed so callers can register their own primitives.
    """
    kept = [(p, fn) for p, fn in parents if p.requires_grad]
    return Var(value, kept, op=op)


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    _broadcast_shape("add", a, b)
    return make_op("add", a.value + b.value, [
        (a, lambda g: unbroadcast(g, a.shape)),
        (b, lambda g: unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    _broadcast_shape("sub", a, b)
    return make_op("sub", a.value - b.value, [
        (a, lambda g: unbroadcast(g, a.shape)),
        (b, lambda g: unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    _broadcast_shape("mul", a, b)
    return make_op("mul", a.value * b.value, [
        (a, lambda g: unbroadcast(g * b.value, a.shape)),
        (b, lambda g: unbroadcast(g * a.value, b.shape)),
    ])


def div(a, b) -> Var:
    a, b = lift(a), lift(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value
    return make_op("div", out, [
        (a, lambda g: unbroadcast(g / b.value, a.shape)),
        (b, lambda g: unbroadcast(-g * out / b.value, b.shape)),
    ])


def square(x) -> Var:
    x = lift(x)
    return make_op("square", x.value * x.value, [(x, lambda g: 2.0 * g * x.value)])


def log(x) -> Var:
    x = lift(x)
    return make_op("log", np.log(x.value), [(x, lambda g: g / x.value)])


def exp(x) -> Var:
    x = lift(x)
    out = np.exp(x.value)
    return make_op("exp", out, [(x, lambda g: g * out)])


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Var:
    x = lift(x)
    factor = np.where(x.value > 0, 1.0, slope)
    return make_op("leaky_relu", x.value * factor, [(x, lambda g: g * factor)])


def clamp_min(x, lo: float) -> Var:
    """Elementwise ``max(x, lo)``; the gradient is zero where the clamp is active."""
    x = lift(x)
    keep = x.value > lo
    return make_op("clamp_min", np.where(keep, x.value, lo), [(x, lambda g: g * keep)])


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    x = lift(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape).copy()

    return make_op("sum", out, [(x, vjp)])


def mean(x, axis=None, keepdims: bool = False) -> Var:
    x = lift(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def l2norm(x, axis: int = -1, keepdims: bool = True) -> Var:
    """Euclidean norm along ``axis``. The gradient at a zero vector is taken as zero."""
    x = lift(x)
    norm = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = norm if keepdims else np.squeeze(norm, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * x.value / safe

    return make_op("l2norm", out, [(x, vjp)])


def reshape(x, shape: Sequence[int]) -> Var:
    x = lift(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return make_op("reshape", out, [(x, lambda g: g.reshape(x.shape))])


def transpose(x, axes: Sequence[int]) -> Var:
    x = lift(x)
    inverse = np.argsort(axes)
    return make_op("transpose", np.transpose(x.value, axes),
                   [(x, lambda g: np.transpose(g, inverse))])


def broadcast_to(x, shape: Sequence[int]) -> Var:
    x = lift(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {x.shape} to {shape}") from None
    return make_op("broadcast_to", out, [(x, lambda g: unbroadcast(g, x.shape))])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Var:
    """Batched matrix product following ``np.matmul`` broadcasting (operands ≥ 2-D)."""
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}") from None
    return make_op("matmul", a.value @ b.value, [
        (a, lambda g: unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)),
        (b, lambda g: unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)),
    ])


def _pad_hw(x: Array, pad: int) -> Array:
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _patches(x: Array, k: int) -> Array:
    """Patch matrix (B, C*k*k, H*W) of a zero-padded "same" window sweep."""
    b, c, height, width = x.shape
    xp = _pad_hw(x, k // 2)
    cols = np.empty((b, c, k * k, height, width))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di * k + dj] = xp[:, :, di:di + height, dj:dj + width]
    return cols.reshape(b, c * k * k, height * width)


def _fold(cols: Array, shape: tuple[int, ...], k: int) -> Array:
    """Adjoint of :func:`_patches`: scatter-add patch columns back onto the image."""
    b, c, height, width = shape
    pad = k // 2
    cols = cols.reshape(b, c, k * k, height, width)
    out = np.zeros((b, c, height + 2 * pad, width + 2 * pad))
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + height, dj:dj + width] += cols[:, :, di * k + dj]
    return out[:, :, pad:pad + height, pad:pad + width]


def conv2d_array(x: Array, w: Array) -> Array:
    """Stride-1, zero-padded "same" cross-correlation of B×C×H×W with O×C×k×k."""
    k = w.shape[-1]
    out = w.reshape(w.shape[0], -1) @ _patches(x, k)
    return out.reshape(x.shape[0], w.shape[0], *x.shape[2:])


def conv2d(x, w) -> Var:
    """3×3 (any odd square kernel) convolution, stride 1, zero padding ``k // 2``.

    Args:
        x: Input of shape (B, C, H, W).
        w: Kernel of shape (O, C, k, k).
    """
    x, w = lift(x), lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", f"kernel expects {w.shape[1]} channels, input has {x.shape[1]}")
    k = w.shape[-1]
    if w.shape[-2] != k or k % 2 == 0:
        raise ShapeError("conv2d", f"kernel must be square and odd, got {w.shape[-2:]}")
    cols = _patches(x.value, k)
    w2 = w.value.reshape(w.shape[0], -1)
    batch, out_ch = x.shape[0], w.shape[0]
    out = (w2 @ cols).reshape(batch, out_ch, *x.shape[2:])

    def vjp_x(g):
        return _fold(w2.T @ g.reshape(batch, out_ch, -1), x.shape, k)

    def vjp_w(g):
        g2 = g.reshape(batch, out_ch, -1)
        return (g2 @ np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)

    return make_op("conv2d", out, [(x, vjp_x), (w, vjp_w)])


# ---------------------------------------------------------------------------
# softmax family


def softmax_array(x: Array, axis: int = -1) -> Array:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x: Array, axis: int = -1) -> Array:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Var:
    x = lift(x)
    out = softmax_array(x.value, axis)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return make_op("softmax", out, [(x, vjp)])


def log_softmax(x, axis: int = -1) -> Var:
    x = lift(x)
    out = log_softmax_array(x.value, axis)
    probs = np.exp(out)

    def vjp(g):
        return g - probs * g.sum(axis=axis, keepdims=True)

    return make_op("log_softmax", out, [(x, vjp)])


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class ComputeGraph:
    """A traced scalar function of named tensors.

    ``fn`` receives one keyword argument per name in ``inputs`` and returns
    either the output ``Var`` or a mapping of named ``Var`` s containing
    ``output``. Only the names in ``wrt`` are differentiated; the remaining
    inputs are treated as constants (labels, masks, frozen teacher values).
    """

    fn: Callable[..., Var | Mapping[str, Var]]
    inputs: tuple[str, ...]
    wrt: tuple[str, ...] | None = None
    output: str = "output"
    name: str = field(default="graph", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        wrt = self.inputs if self.wrt is None else tuple(self.wrt)
        unknown = set(wrt) - set(self.inputs)
        if unknown:
            raise GraphError(f"{self.name}: wrt names not among inputs: {sorted(unknown)}")
        object.__setattr__(self, "wrt", wrt)


def _trace(graph: ComputeGraph, bindings: Mapping[str, object]):
    missing = [n for n in graph.inputs if n not in bindings]
    if missing:
        raise UnboundInputError(f"{graph.name}: unbound inputs {missing}")
    leaves = {
        n: Var(bindings[n], op="input", requires_grad=n in graph.wrt, name=n)
        for n in graph.inputs
    }
    result = graph.fn(**leaves)
    nodes = dict(result) if isinstance(result, Mapping) else {graph.output: result}
    if graph.output not in nodes:
        raise GraphError(f"{graph.name}: function did not produce '{graph.output}'")
    return leaves, nodes


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad_of(output: Var, leaves: Mapping[str, Var]) -> dict[str, Array]:
    """Reverse pass from a scalar ``output`` to the given leaves."""
    if output.value.size != 1:
        raise NonScalarOutputError(f"output has shape {output.shape}; backward needs a scalar")
    grads: dict[int, Array] = {id(output): np.ones_like(output.value)}
    for node in reversed(_toposort(output)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contrib
            else:
                grads[id(parent)] = contrib
    return {
        n: np.asarray(grads.get(id(v), np.zeros_like(v.value)), dtype=np.float64).reshape(v.shape)
        for n, v in leaves.items()
    }


def forward(graph: ComputeGraph, bindings: Mapping[str, object]) -> dict[str, Array]:
    """Evaluate ``graph`` and return every named node value. Bindings are not modified."""
    _, nodes = _trace(graph, bindings)
    return {n: v.value for n, v in nodes.items()}


def value_and_grad(graph: ComputeGraph, bindings: Mapping[str, object]):
    """Return (named node values, gradients of the output for each ``wrt`` input)."""
    leaves, nodes = _trace(graph, bindings)
    grads = grad_of(nodes[graph.output], {n: leaves[n] for n in graph.wrt})
    return {n: v.value for n, v in nodes.items()}, grads


def backward(graph: ComputeGraph, bindings: Mapping[str, object]) -> dict[str, Array]:
    """Gradients of the scalar output with respect to each ``wrt`` input."""
    return value_and_grad(graph, bindings)[1]


@dataclass
class GradCheckReport:
    """Per-input maximum relative error between analytic and numeric gradients."""

    max_rel_error: dict[str, float]
    worst_index: dict[str, tuple[int, ...]]
    tol: float
    failures: dict[str, int]

    @property
    def passed(self) -> bool:
        return not any(self.failures.values())

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(graph: ComputeGraph, bindings: Mapping[str, object],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences coordinate by coordinate.

    The relative error of a coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {n: as_tensor(v) for n, v in bindings.items()}
    analytic = backward(graph, base)
    errors, worst_idx, failures = {}, {}, {}
    for name in graph.wrt:
        x = base[name]
        worst, where, bad = 0.0, (), 0
        for idx in np.ndindex(x.shape):
            bumped = dict(base)
            plus = x.copy()
            plus[idx] += step
            bumped[name] = plus
            f_plus = float(forward(graph, bumped)[graph.output])
            minus = x.copy()
            minus[idx] -= step
            bumped[name] = minus
            f_minus = float(forward(graph, bumped)[graph.output])
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst or not np.isfinite(rel):
                worst, where = rel, idx
            if not rel <= tol:
                bad += 1
        errors[name], worst_idx[name], failures[name] = worst, where, bad
    report = GradCheckReport(errors, worst_idx, tol, failures)
    if not report.passed:
        logger.info("grad_check %s failed: %s", graph.name, failures)
    return report
