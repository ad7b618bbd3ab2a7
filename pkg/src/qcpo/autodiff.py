"""Array-level reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` created inside an active :class:`GradTape`
is recorded on that tape.  ``tape.gradient(loss, wrt)`` replays the record in
reverse and returns the gradient of the scalar ``loss`` with respect to each
watched tensor.

    >>> import numpy as np
    >>> with GradTape() as tape:
    ...     x = tape.watch(np.array([1.0, 2.0]))
    ...     loss = (x * x).sum()
    >>> tape.gradient(loss, x)
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "GradTape", "UntapedError", "constant", "where", "minimum", "concat"]

_ACTIVE: list["GradTape"] = []


class UntapedError(RuntimeError):
    """Raised when a gradient is requested for a value that no tape recorded."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out the axes numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "tape", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward_fn=None, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        if tape is not None:
            tape._nodes.append(self)

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(value, parents, backward_fn) -> "Tensor":
        tape = None
        for p in parents:
            if p.tape is not None:
                tape = p.tape
                break
        if tape is None and _ACTIVE:
            tape = _ACTIVE[-1]
        if tape is None:
            return Tensor(value)
        return Tensor(value, parents, backward_fn, tape)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Tensor({self.value!r})"

    def numpy(self) -> np.ndarray:
        return self.value

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a), _unbroadcast(g, b)

        return Tensor._make(self.value + other.value, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        x, y = self.value, other.value

        need_x, need_y = self.tape is not None, other.tape is not None

        def back(g):
            return (_unbroadcast(g * y, x.shape) if need_x else None,
                    _unbroadcast(g * x, y.shape) if need_y else None)

        return Tensor._make(x * y, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        x, y = self.value, other.value

        def back(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._make(x / y, (self, other), back)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, k: float):
        x = self.value
        return Tensor._make(x**k, (self,), lambda g: (g * k * x ** (k - 1),))

    def __matmul__(self, other):
        other = Tensor._lift(other)
        x, y = self.value, other.value

        need_x, need_y = self.tape is not None, other.tape is not None

        def back(g):
            gx = gy = None
            if need_x:
                gx = (g @ y.T if y.ndim == 2 else np.outer(g, y)).reshape(x.shape)
            if need_y:
                gy = (x.T @ g if x.ndim == 2 else np.outer(x, g)).reshape(y.shape)
            return gx, gy

        return Tensor._make(x @ y, (self, other), back)

    def __getitem__(self, idx):
        shape = self.shape

        basic = isinstance(idx, (slice, int)) or (
            isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx)
        )

        def back(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.value[idx], (self,), back)

    # -- elementwise functions -----------------------------------------------
    def tanh(self):
        y = np.tanh(self.value)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def exp(self):
        y = np.exp(self.value)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.value
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self):
        y = 0.5 * (1.0 + np.tanh(0.5 * self.value))
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def abs(self):
        x = self.value
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def clip(self, lo, hi):
        x = self.value
        inside = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    def huber(self, kappa: float):
        """0.5 x**2 for |x| <= kappa, kappa * (|x| - 0.5 kappa) beyond."""
        x = self.value
        ax = np.abs(x)
        y = np.where(ax <= kappa, 0.5 * x * x, kappa * (ax - 0.5 * kappa))
        return Tensor._make(y, (self,), lambda g: (g * np.clip(x, -kappa, kappa),))

    def log_softmax(self, axis: int = -1):
        x = self.value
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse
        p = np.exp(y)

        def back(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(y, (self,), back)

    # -- shape and reductions ---------------------------------------------------
    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Tensor._make(self.value.T, (self,), lambda g: (g.T,))

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def constant(x) -> Tensor:
    """A tensor that never receives a gradient."""
    return Tensor(np.array(x, dtype=np.float64, copy=True))


def where(cond, a, b) -> Tensor:
    a, b = Tensor._lift(a), Tensor._lift(b)
    cond = np.asarray(cond, dtype=bool)

    def back(g):
        return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)

    return Tensor._make(np.where(cond, a.value, b.value), (a, b), back)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    return where(a.value <= b.value, a, b)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), back)


class GradTape:
    """Records tensor operations for one backward pass.

    Tapes nest; operations are recorded on the innermost active tape unless an
    operand already belongs to another tape.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64, copy=True), tape=self)
        self._watched.append(t)
        return t

    def gradient(self, loss: Tensor, wrt):
        """Gradient of scalar ``loss`` w.r.t. a watched tensor or a list of them."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise UntapedError("loss was not produced by operations recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        single = isinstance(wrt, Tensor)
        targets = [wrt] if single else list(wrt)
        for t in targets:
            if t.tape is not self:
                raise UntapedError("gradient requested for a tensor this tape does not watch")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent.tape is None or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
        out = [grads.get(id(t), np.zeros_like(t.value)) for t in targets]
        return out[0] if single else out
