"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Single-threaded tape semantics: every op appends a node closure to the graph
formed by parent links, ``backward()`` walks the graph once in reverse
topological order. Values are immutable after creation; gradients accumulate
on trainable leaves across repeated backward calls until ``zero_grad``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "concat",
    "stack_scalars",
    "zero_grad",
]


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_same_shape(op: str, a: "Tensor", b: "Tensor") -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


class Tensor:
    """Dense float64 array participating in the differentiation graph.

    `grad` stays None until a backward pass reaches this tensor as a
    trainable leaf. Intermediate nodes never retain gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None  # callable grad -> tuple of parent grads

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @classmethod
    def _from_op(cls, data, parents, vjp) -> "Tensor":
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        """Constant view of the same values, cut off from the graph."""
        return Tensor(self.data)

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        _check_same_shape("add", self, other)
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        _check_same_shape("sub", self, other)
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        _check_same_shape("mul", self, other)
        return Tensor._from_op(
            self.data * other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        _check_same_shape("div", self, other)
        if np.any(other.data == 0.0):
            raise ZeroDivisionError("div: divisor contains zero entries")
        return Tensor._from_op(
            self.data / other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        other = Tensor._lift(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ValueError(
                f"matmul: shapes {self.shape} and {other.shape} do not conform"
            )
        return Tensor._from_op(
            self.data @ other.data,
            (self, other),
            lambda g: (g @ other.data.T, self.data.T @ g),
        )

    # -- elementwise functions ---------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._from_op(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        if np.any(self.data <= 0.0):
            bad = float(self.data[self.data <= 0.0].flat[0])
            raise ValueError(f"log: nonpositive input {bad}")
        return Tensor._from_op(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise ValueError("sqrt: negative input")
        out_data = np.sqrt(self.data)
        # subgradient 0 at the origin, same convention as relu at its kink
        safe = np.where(out_data > 0.0, out_data, np.inf)
        return Tensor._from_op(out_data, (self,), lambda g: (g * 0.5 / safe,))

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor._from_op(
            out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),)
        )

    def relu(self):
        return Tensor._from_op(
            np.maximum(self.data, 0.0),
            (self,),
            lambda g: (g * (self.data > 0.0),),
        )

    def softplus(self):
        # log(1 + exp(x)) computed without overflow
        out_data = np.logaddexp(0.0, self.data)
        return Tensor._from_op(
            out_data,
            (self,),
            lambda g: (g / (1.0 + np.exp(-self.data)),),
        )

    def elu(self):
        neg = np.exp(np.minimum(self.data, 0.0)) - 1.0
        out_data = np.where(self.data > 0.0, self.data, neg)
        return Tensor._from_op(
            out_data,
            (self,),
            lambda g: (g * np.where(self.data > 0.0, 1.0, neg + 1.0),),
        )

    def gaussian(self):
        """exp(-x^2 / 2); its derivative magnitude peaks at exp(-1/2) < 1."""
        out_data = np.exp(-0.5 * self.data * self.data)
        return Tensor._from_op(
            out_data, (self,), lambda g: (-g * self.data * out_data,)
        )

    def abs(self):
        return Tensor._from_op(
            np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),)
        )

    def square(self):
        return Tensor._from_op(
            self.data * self.data, (self,), lambda g: (2.0 * g * self.data,)
        )

    # -- reductions ---------------------------------------------------------------

    def _expand(self, g, axis, keepdims):
        if axis is None:
            return np.broadcast_to(g, self.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, self.shape)

    def sum(self, axis=None, keepdims: bool = False):
        return Tensor._from_op(
            np.sum(self.data, axis=axis, keepdims=keepdims),
            (self,),
            lambda g: (self._expand(g, axis, keepdims).copy(),),
        )

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else self.shape[axis]
        return Tensor._from_op(
            np.mean(self.data, axis=axis, keepdims=keepdims),
            (self,),
            lambda g: (self._expand(g, axis, keepdims) / count,),
        )

    def max(self, axis: int = 0):
        """Max over one axis; subgradient flows to the first attained maximum."""
        out_data = np.max(self.data, axis=axis)
        idx = np.argmax(self.data, axis=axis)

        def vjp(g):
            grad = np.zeros_like(self.data)
            np.put_along_axis(
                grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
            )
            return (grad,)

        return Tensor._from_op(out_data, (self,), vjp)

    # -- structural ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(self.shape),)
        )

    def transpose(self):
        if self.ndim != 2:
            raise ValueError(f"transpose: expected 2-d tensor, got shape {self.shape}")
        return Tensor._from_op(self.data.T, (self,), lambda g: (g.T,))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        def vjp(g):
            grad = np.zeros_like(self.data)
            grad[key] = g
            return (grad,)

        return Tensor._from_op(self.data[key], (self,), vjp)

    def softmax(self, axis: int = -1):
        shifted = self.data - np.max(self.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / np.sum(e, axis=axis, keepdims=True)

        def vjp(g):
            inner = np.sum(g * out_data, axis=axis, keepdims=True)
            return (out_data * (g - inner),)

        return Tensor._from_op(out_data, (self,), vjp)

    def sort(self, axis: int = -1):
        """Ascending sort; gradient is routed back through the permutation."""
        perm = np.argsort(self.data, axis=axis, kind="stable")
        out_data = np.take_along_axis(self.data, perm, axis=axis)

        def vjp(g):
            grad = np.empty_like(self.data)
            np.put_along_axis(grad, perm, g, axis)
            return (grad,)

        return Tensor._from_op(out_data, (self,), vjp)

    # -- backward pass -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into trainable leaf grads."""
        if self.size != 1:
            raise ValueError(
                f"backward: loss must be scalar, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # trainable leaf: accumulate across backward calls
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg
                else:
                    acc += pg


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; gradient splits back at the seams."""
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp
    )


def stack_scalars(scalars) -> Tensor:
    """Stack 0-d tensors into a 1-d vector (used for per-environment losses)."""
    return concat([s.reshape(1) for s in scalars], axis=0)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
