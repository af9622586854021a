"""Reverse-mode automatic differentiation over numpy arrays.

A `Tape` records primitive operations in execution order. Each recorded node
keeps the forward values of its inputs and its output, which is everything the
primitive's vector-Jacobian product needs. `Tape.backward` walks the nodes
once in reverse and accumulates adjoints additively at fan-out.

The module-level functions (`add`, `matmul`, `exp`, ...) dispatch on their
arguments: if any argument is a `Var` the operation is recorded on that
variable's tape, otherwise it is evaluated eagerly on plain numpy arrays. Code
written against these functions therefore runs unchanged with or without
gradient tracking.

Example:
    ```python
    from mgprnn import autodiff as ad

    tape = ad.Tape()
    w = tape.leaf([[1.0, 2.0], [3.0, 4.0]], name="w")
    x = tape.leaf([0.5, -0.5], name="x")
    y = ad.reduce_sum(ad.tanh(w @ x))
    grads = tape.backward(y)
    grads[w], grads[x]
    ```
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from mgprnn.exceptions import ContractError, ShapeError

__all__ = [
    "Var",
    "Node",
    "Tape",
    "GradientMap",
    "PRIMITIVES",
    "value_of",
    "is_var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "absolute",
    "sqrt",
    "softplus",
    "clip",
    "reduce_sum",
    "reshape",
    "transpose",
    "getitem",
    "scatter",
    "concat",
    "stack",
    "broadcast_to",
    "sym_sqrtm",
    "dot",
]


class Var:
    """A value recorded on a tape.

    The shape of a `Var` is fixed at creation; after `Tape.backward` its
    gradient has the same shape as `value`.
    """

    __slots__ = ("value", "tape", "index", "requires_grad", "name")

    # Makes numpy hand binary operators over to the Var implementation.
    __array_ufunc__ = None

    def __init__(
        self,
        value: np.ndarray,
        tape: "Tape",
        index: int,
        requires_grad: bool,
        name: str | None = None,
    ) -> None:
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, index={self.index}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass(frozen=True, eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    parents: tuple[int | None, ...]
    inputs: tuple[np.ndarray, ...]
    output: np.ndarray
    params: dict[str, Any]
    requires_grad: bool


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple[np.ndarray | None, ...]]


PRIMITIVES: dict[str, Primitive] = {}


class GradientMap(dict):
    """Gradients keyed by leaf `Var`."""

    def named(self) -> dict[str, np.ndarray]:
        """Gradients of the named leaves, keyed by leaf name."""
        return {var.name: grad for var, grad in self.items() if var.name is not None}


@dataclass(eq=False)
class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape belongs to one worker at a time.
    """

    nodes: list[Node] = field(default_factory=list)
    _leaves: list[Var] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    @property
    def leaves(self) -> list[Var]:
        return list(self._leaves)

    def leaf(
        self,
        value: Any,
        *,
        requires_grad: bool = True,
        name: str | None = None,
    ) -> Var:
        """Register an input array and return its `Var`."""
        arr = np.array(value, dtype=np.float64)
        index = len(self.nodes)
        self.nodes.append(Node("leaf", (), (), arr, {}, requires_grad))
        var = Var(arr, self, index, requires_grad, name)
        self._leaves.append(var)
        return var

    def record(self, op: str, inputs: Sequence[Any], **params: Any) -> Var:
        """Compute primitive `op` on `inputs` and append it to the tape.

        Non-`Var` inputs are recorded as constants. Shape problems surface
        here as `ShapeError`, never during `backward`.
        """
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise ContractError(f"unknown primitive {op!r}") from None

        parents: list[int | None] = []
        values: list[np.ndarray] = []
        requires_grad = False
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ContractError(f"{op}: input {x!r} belongs to another tape")
                parents.append(x.index)
                values.append(x.value)
                requires_grad = requires_grad or self.nodes[x.index].requires_grad
            else:
                parents.append(None)
                values.append(np.asarray(x, dtype=np.float64))

        out = _run_forward(prim, values, params)
        index = len(self.nodes)
        self.nodes.append(Node(op, tuple(parents), tuple(values), out, params, requires_grad))
        return Var(out, self, index, requires_grad)

    def backward(self, root: Var) -> GradientMap:
        """Gradients of scalar `root` with respect to every trainable leaf.

        The tape is not modified, so repeated calls return identical results.
        Leaves that `root` does not depend on receive zeros.
        """
        if not isinstance(root, Var) or root.tape is not self:
            raise ContractError("backward root must be a Var recorded on this tape")
        if root.value.ndim != 0:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")

        adjoints: list[np.ndarray | None] = [None] * (root.index + 1)
        adjoints[root.index] = np.ones((), dtype=np.float64)

        for i in range(root.index, -1, -1):
            g = adjoints[i]
            node = self.nodes[i]
            if g is None or node.op == "leaf" or not node.requires_grad:
                continue
            grads = PRIMITIVES[node.op].vjp(g, node.output, *node.inputs, **node.params)
            for parent, pg in zip(node.parents, grads):
                if parent is None or pg is None or not self.nodes[parent].requires_grad:
                    continue
                prev = adjoints[parent]
                adjoints[parent] = pg if prev is None else prev + pg

        result = GradientMap()
        for var in self._leaves:
            if not var.requires_grad:
                continue
            g = adjoints[var.index] if var.index <= root.index else None
            if g is None:
                result[var] = np.zeros_like(var.value)
            else:
                result[var] = np.array(g, dtype=np.float64).reshape(var.shape)
        return result


def _run_forward(prim: Primitive, values: list[np.ndarray], params: dict[str, Any]) -> np.ndarray:
    try:
        out = prim.forward(*values, **params)
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"{prim.name}: {exc} (input shapes {shapes})") from exc
    return np.asarray(out, dtype=np.float64)


def is_var(x: Any) -> bool:
    return isinstance(x, Var)


def value_of(x: Any) -> np.ndarray:
    """Forward value of a `Var`, or `x` itself as an array."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _apply(op: str, *inputs: Any, **params: Any):
    tape: Tape | None = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError(f"{op}: inputs recorded on different tapes")
    if tape is None:
        values = [np.asarray(x, dtype=np.float64) for x in inputs]
        return _run_forward(PRIMITIVES[op], values, params)
    return tape.record(op, inputs, **params)


def _register(name: str, forward: Callable[..., np.ndarray], vjp: Callable[..., tuple]) -> None:
    PRIMITIVES[name] = Primitive(name, forward, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

_register(
    "add",
    np.add,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)
_register(
    "sub",
    np.subtract,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
)
_register(
    "mul",
    np.multiply,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)
_register(
    "div",
    np.divide,
    lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
)
_register("neg", np.negative, lambda g, out, x: (-g,))


def _matmul_vjp(g, out, a, b):
    a2 = a[np.newaxis, :] if a.ndim == 1 else a
    b2 = b[:, np.newaxis] if b.ndim == 1 else b
    g2 = g
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    ga = g2 @ np.swapaxes(b2, -1, -2)
    gb = np.swapaxes(a2, -1, -2) @ g2
    if a.ndim == 1:
        ga = ga[..., 0, :]
    if b.ndim == 1:
        gb = gb[..., :, 0]
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_register("matmul", np.matmul, _matmul_vjp)

# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

_register("exp", np.exp, lambda g, out, x: (g * out,))
_register("log", np.log, lambda g, out, x: (g / x,))
_register("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),))
_register("sigmoid", expit, lambda g, out, x: (g * out * (1.0 - out),))
_register("absolute", np.abs, lambda g, out, x: (g * np.sign(x),))
_register("sqrt", np.sqrt, lambda g, out, x: (g * 0.5 / out,))
_register(
    "softplus",
    lambda x: np.logaddexp(0.0, x),
    lambda g, out, x: (g * expit(x),),
)
_register(
    "clip",
    lambda x, lo, hi: np.clip(x, lo, hi),
    lambda g, out, x, lo, hi: (g * ((x >= lo) & (x <= hi)),),
)

# ---------------------------------------------------------------------------
# Reductions and structural operations
# ---------------------------------------------------------------------------


def _sum_vjp(g, out, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


_register(
    "reduce_sum",
    lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    _sum_vjp,
)
_register(
    "reshape",
    lambda x, shape: np.reshape(x, shape),
    lambda g, out, x, shape: (g.reshape(x.shape),),
)


def _transpose_vjp(g, out, x, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


_register("transpose", lambda x, axes=None: np.transpose(x, axes), _transpose_vjp)


def _getitem_vjp(g, out, x, index):
    full = np.zeros_like(x)
    np.add.at(full, index, g)
    return (full,)


_register("getitem", lambda x, index: x[index], _getitem_vjp)


def _scatter_forward(x, index, shape):
    full = np.zeros(shape, dtype=np.float64)
    np.add.at(full, index, x)
    return full


_register(
    "scatter",
    _scatter_forward,
    lambda g, out, x, index, shape: (g[index].reshape(x.shape),),
)


def _concat_vjp(g, out, *xs, axis=0):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


_register("concat", lambda *xs, axis=0: np.concatenate(xs, axis=axis), _concat_vjp)
_register(
    "stack",
    lambda *xs, axis=0: np.stack(xs, axis=axis),
    lambda g, out, *xs, axis=0: tuple(np.take(g, i, axis=axis) for i in range(len(xs))),
)
_register(
    "broadcast_to",
    lambda x, shape: np.broadcast_to(x, shape).copy(),
    lambda g, out, x, shape: (_unbroadcast(g, x.shape),),
)

# ---------------------------------------------------------------------------
# Symmetric PSD square root
# ---------------------------------------------------------------------------


def _sym_eig(h: np.ndarray):
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    w, v = np.linalg.eigh(h)
    f = np.sqrt(np.clip(w, 0.0, None))
    return w, v, f


def _sym_sqrtm_forward(h):
    if h.ndim < 2 or h.shape[-1] != h.shape[-2]:
        raise ValueError("sym_sqrtm expects a (batch of) square matrices")
    w, v, f = _sym_eig(h)
    return (v * f[..., np.newaxis, :]) @ np.swapaxes(v, -1, -2)


def _sym_sqrtm_vjp(g, out, h):
    w, v, f = _sym_eig(h)
    lam_i = w[..., :, np.newaxis]
    lam_j = w[..., np.newaxis, :]
    diff = lam_i - lam_j
    scale = np.maximum(np.abs(w).max(axis=-1, keepdims=True)[..., np.newaxis], 1.0)
    close = np.abs(diff) <= 1e-10 * scale
    mid = 0.5 * (lam_i + lam_j)
    with np.errstate(divide="ignore", invalid="ignore"):
        divided = (f[..., :, np.newaxis] - f[..., np.newaxis, :]) / diff
        # Clamped eigenvalues carry no derivative.
        slope = np.where(mid > 0.0, 0.5 / np.sqrt(np.where(mid > 0.0, mid, 1.0)), 0.0)
    weights = np.where(close, slope, divided)
    vt = np.swapaxes(v, -1, -2)
    gs = 0.5 * (g + np.swapaxes(g, -1, -2))
    return (v @ (weights * (vt @ gs @ v)) @ vt,)


_register("sym_sqrtm", _sym_sqrtm_forward, _sym_sqrtm_vjp)

# ---------------------------------------------------------------------------
# Public dispatch functions
# ---------------------------------------------------------------------------


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def neg(x):
    return _apply("neg", x)


def matmul(a, b):
    return _apply("matmul", a, b)


def exp(x):
    return _apply("exp", x)


def log(x):
    return _apply("log", x)


def tanh(x):
    return _apply("tanh", x)


def sigmoid(x):
    return _apply("sigmoid", x)


def absolute(x):
    return _apply("absolute", x)


def sqrt(x):
    return _apply("sqrt", x)


def softplus(x):
    """log(1 + exp(x)), computed stably."""
    return _apply("softplus", x)


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; the gradient is zero outside the interval."""
    return _apply("clip", x, lo=float(lo), hi=float(hi))


def reduce_sum(x, axis: int | None = None, keepdims: bool = False):
    return _apply("reduce_sum", x, axis=axis, keepdims=keepdims)


def reshape(x, shape: tuple[int, ...]):
    return _apply("reshape", x, shape=tuple(shape))


def transpose(x, axes: tuple[int, ...] | None = None):
    return _apply("transpose", x, axes=None if axes is None else tuple(axes))


def getitem(x, index):
    """Basic or integer-array indexing; repeated indices accumulate on backward."""
    return _apply("getitem", x, index=index)


def scatter(x, index, shape: tuple[int, ...]):
    """Place the rows of `x` at `index` inside a zero array of `shape`."""
    return _apply("scatter", x, index=index, shape=tuple(shape))


def concat(xs: Sequence[Any], axis: int = 0):
    return _apply("concat", *xs, axis=axis)


def stack(xs: Sequence[Any], axis: int = 0):
    return _apply("stack", *xs, axis=axis)


def broadcast_to(x, shape: tuple[int, ...]):
    return _apply("broadcast_to", x, shape=tuple(shape))


def sym_sqrtm(h):
    """Symmetric square root of a (batch of) symmetric matrices.

    Computed by eigendecomposition with negative eigenvalues clamped to zero.
    """
    return _apply("sym_sqrtm", h)


def dot(a, b, axis: int | None = None):
    """Inner product; with `axis` given, column-wise along that axis."""
    return reduce_sum(mul(a, b), axis=axis)
