"""Reverse-mode automatic differentiation on dense float64 arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so the tape is already topologically sorted and a reverse
walk visits every node once.  Each op carries a vector-Jacobian product
written against the small set of helpers in this module; the helpers work
on plain arrays and on :class:`Tensor` alike.  With ``create_graph=True``
the backward pass is itself recorded, which is what the gradient penalty
needs (parameter gradients of a function of input gradients).

Example::

    with Tape() as tape:
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        loss = sum_(square(x))
    tape.gradient(loss, [x])  # [array([ 2., -4.,  6.])]
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "scalar_mul",
    "sum_",
    "mean",
    "square",
    "sqrt",
    "reshape",
    "broadcast_to",
    "leaky_relu",
    "sigmoid",
    "l2_norm_rows",
    "backward",
    "grad_norm_penalty",
    "NORM_EPS",
]

# Added under the square root of the penalty's gradient norm so that it stays
# differentiable when an input gradient vanishes.
NORM_EPS = 1e-12

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Execution record of differentiable operations.

    A tape belongs to one thread.  Nodes are recorded only while the tape is
    the innermost active one (``with tape: ...``).
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: "Tensor") -> None:
        node._index = len(self.nodes)
        node._tape = self
        self.nodes.append(node)

    def gradient(
        self,
        target: "Tensor",
        sources: Sequence["Tensor"],
        create_graph: bool = False,
    ) -> list:
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Returns arrays, or Tensors recorded on this tape when
        ``create_graph`` is set.  Sources that do not influence the target
        get zeros.
        """
        if target.value.size != 1:
            raise ValueError(
                f"gradient target must be scalar, got shape {target.shape}"
            )
        if create_graph and _active_tape() is not self:
            raise RuntimeError("create_graph requires this tape to be active")

        wanted = {id(s) for s in sources}
        seed = np.ones_like(target.value)
        adj: dict[int, object] = {id(target): Tensor(seed) if create_graph else seed}

        if target._tape is self:
            nodes = self.nodes[: target._index + 1]
            # Only nodes downstream of a source can carry a useful adjoint.
            reach = set(wanted)
            for node in nodes:
                if any(id(p) in reach for p in node._parents):
                    reach.add(id(node))
            for node in reversed(nodes):
                key = id(node)
                g = adj.get(key) if key in wanted else adj.pop(key, None)
                if g is None:
                    continue
                parents = node._parents
                needs = tuple(id(p) in reach for p in parents)
                if create_graph:
                    grads = node._vjp(g, node, needs, *parents)
                else:
                    grads = node._vjp(g, node.value, needs, *(p.value for p in parents))
                for parent, pg in zip(parents, grads):
                    if pg is None:
                        continue
                    pkey = id(parent)
                    prev = adj.get(pkey)
                    adj[pkey] = pg if prev is None else prev + pg

        out = []
        for s in sources:
            g = adj.get(id(s))
            if g is None:
                g = np.zeros_like(s.value)
                if create_graph:
                    g = Tensor(g)
            out.append(g)
        return out


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("value", "requires_grad", "_parents", "_vjp", "_op", "_tape", "_index", "name")
    # Keep numpy from broadcasting Tensors as object arrays.
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"
        self._tape: Tape | None = None
        self._index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def op(self) -> str:
        return self._op

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(value)
    out._op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        tape._record(out)
    return out


def _is_t(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# -- helpers usable inside VJPs on arrays or Tensors ------------------------

def _unbroadcast(g, shape: tuple[int, ...]):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    gshape = g.shape
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and gshape[i + lead] != 1
    )
    if isinstance(g, Tensor):
        return reshape(sum_(g, axis=axes, keepdims=True), shape) if axes else reshape(g, shape)
    return np.sum(g, axis=axes, keepdims=True).reshape(shape) if axes else g.reshape(shape)


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {np.shape(a)} and {np.shape(b)}")


def _values(a, b):
    av = a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    return av, bv


def _binary(op: str, a, b, fn, vjp) -> Tensor | np.ndarray:
    av, bv = _values(a, b)
    try:
        value = fn(av, bv)
    except ValueError:
        raise _shape_error(op, av, bv) from None
    if not _is_t(a, b):
        return value
    return _make(op, value, (_as_tensor(a), _as_tensor(b)), vjp)


# -- forward ops -----------------------------------------------------------

def _add_vjp(g, out, needs, a, b):
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    )


def add(a, b):
    return _binary("add", a, b, np.add, _add_vjp)


def _sub_vjp(g, out, needs, a, b):
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(-g, b.shape) if needs[1] else None,
    )


def sub(a, b):
    return _binary("sub", a, b, np.subtract, _sub_vjp)


def _mul_vjp(g, out, needs, a, b):
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def mul(a, b):
    return _binary("mul", a, b, np.multiply, _mul_vjp)


def _div_vjp(g, out, needs, a, b):
    ga = g / b
    return (
        _unbroadcast(ga, a.shape) if needs[0] else None,
        _unbroadcast(-ga * out, b.shape) if needs[1] else None,
    )


def div(a, b):
    return _binary("div", a, b, np.divide, _div_vjp)


def scalar_mul(c: float, x):
    return mul(float(c), x)


def _neg_vjp(g, out, needs, x):
    return (-g,)


def neg(x):
    if not isinstance(x, Tensor):
        return -np.asarray(x)
    return _make("neg", -x.value, (x,), _neg_vjp)


def _matmul_vjp(g, out, needs, a, b):
    return (
        g @ transpose(b) if needs[0] else None,
        transpose(a) @ g if needs[1] else None,
    )


def matmul(a, b):
    av, bv = _values(a, b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise _shape_error("matmul", av, bv)
    value = av @ bv
    if not _is_t(a, b):
        return value
    return _make("matmul", value, (_as_tensor(a), _as_tensor(b)), _matmul_vjp)


def _transpose_vjp(g, out, needs, x):
    return (transpose(g),)


def transpose(x):
    if not isinstance(x, Tensor):
        return np.asarray(x).T
    return _make("transpose", x.value.T, (x,), _transpose_vjp)


def reshape(x, shape):
    shape = tuple(shape)
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    src = x.shape
    return _make("reshape", x.value.reshape(shape), (x,), lambda g, out, needs, x_: (reshape(g, src),))


def broadcast_to(x, shape):
    shape = tuple(shape)
    if not isinstance(x, Tensor):
        return np.broadcast_to(x, shape)
    src = x.shape
    return _make(
        "broadcast_to",
        np.broadcast_to(x.value, shape).copy(),
        (x,),
        lambda g, out, needs, x_: (_unbroadcast(g, src),),
    )


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    src = x.shape
    axes = _norm_axis(axis, x.value.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g, out, needs, x_):
        return (broadcast_to(reshape(g, kept), src),)

    return _make("sum", np.sum(x.value, axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False):
    xv = x.value if isinstance(x, Tensor) else np.asarray(x)
    axes = _norm_axis(axis, xv.ndim)
    count = int(np.prod([xv.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _square_vjp(g, out, needs, x):
    return (g * x * 2.0,)


def square(x):
    if not isinstance(x, Tensor):
        return np.square(x)
    return _make("square", np.square(x.value), (x,), _square_vjp)


def _sqrt_vjp(g, out, needs, x):
    return (g / (out * 2.0),)


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    return _make("sqrt", np.sqrt(x.value), (x,), _sqrt_vjp)


def leaky_relu(x, alpha: float = 0.2):
    """``x`` where ``x >= 0``, else ``alpha * x``; derivative at 0 is ``alpha``."""
    xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    value = np.where(xv >= 0, xv, alpha * xv)
    if not isinstance(x, Tensor):
        return value
    # The slope is piecewise constant, so it enters the VJP as a constant mask
    # and has no second derivative.
    slope = np.where(xv > 0, 1.0, alpha)
    return _make("leaky_relu", value, (x,), lambda g, out, needs, x_: (g * slope,))


def _sigmoid_vjp(g, out, needs, x):
    return (g * out * (1.0 - out),)


def _sigmoid_values(xv: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow for large |x|
    e = np.exp(-np.abs(xv))
    return np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    if not isinstance(x, Tensor):
        return _sigmoid_values(np.asarray(x, dtype=np.float64))
    return _make("sigmoid", _sigmoid_values(x.value), (x,), _sigmoid_vjp)


def l2_norm_rows(x, eps: float = 0.0):
    """Euclidean norm of each row of a matrix, ``sqrt(sum(x**2) + eps)``."""
    xv = x.value if isinstance(x, Tensor) else np.asarray(x)
    if xv.ndim != 2:
        raise ValueError(f"l2_norm_rows expects a matrix, got shape {xv.shape}")
    return sqrt(add(sum_(square(x), axis=1), eps))


# -- entry points ------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf that requires grad."""
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape")
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes[: loss._index + 1]:
        for p in node._parents:
            if p.requires_grad and p._tape is None:
                leaves[id(p)] = p
    params = list(leaves.values())
    return dict(zip(params, tape.gradient(loss, params)))


def grad_norm_penalty(
    critic: Callable[[Tensor], Tensor],
    x_tilde,
    lam: float,
    eps: float = NORM_EPS,
) -> Tensor:
    """``lam * mean_i (||d critic / d x_i|| - 1)^2`` as a differentiable node.

    ``critic`` maps a batch to per-sample scores.  The input gradient is
    taken with ``create_graph=True``, so the result can be differentiated
    with respect to the critic's parameters.  Must run inside an active
    tape.
    """
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("grad_norm_penalty must run inside an active Tape")
    xv = x_tilde.value if isinstance(x_tilde, Tensor) else np.asarray(x_tilde, dtype=np.float64)
    x = Tensor(xv, requires_grad=True)
    scores = critic(x)
    (g,) = tape.gradient(sum_(scores), [x], create_graph=True)
    if not isinstance(g, Tensor) or not g.requires_grad:
        # Critic whose input gradient is constant in every parameter.
        g = _as_tensor(g)
    norms = l2_norm_rows(g, eps)
    return mul(mean(square(sub(norms, 1.0))), float(lam))


def tensors(arrays: Iterable, requires_grad: bool = True) -> list[Tensor]:
    return [Tensor(a, requires_grad=requires_grad) for a in arrays]
