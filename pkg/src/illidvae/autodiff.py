"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Computation is define-by-run: open a :class:`Tape`, run the forward pass with
:class:`Tensor` arithmetic, then call :func:`backward` on a scalar loss.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sq_norm(w)
    ...     grads = backward(loss)
    >>> grads[w].data
    array([2., 4.])

Only scalar-tensor broadcasting is implicit.  Row-wise bias addition and
column slicing have their own explicit ops.
"""
from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "backward",
    "matmul", "add", "sub", "mul", "negate", "softplus", "sigmoid", "tanh",
    "exp", "log", "square", "transpose", "add_bias", "sum", "mean", "sq_norm",
    "sum_axis", "logsumexp_rows", "log_softmax_rows", "reshape", "concat_cols", "take_cols", "as_tensor",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An autodiff precondition was violated (e.g. non-scalar loss)."""


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    ``requires_grad`` marks a leaf (parameter).  Tensors produced by ops while
    a tape is active carry ``node``, an index into that tape's record list.
    """

    __slots__ = ("data", "requires_grad", "node", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; scalars broadcast, nothing else does
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

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("inputs", "backward_fn", "shape")

    def __init__(self, inputs, backward_fn, shape):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.shape = shape


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; tapes nest per thread but ops record only onto
    the innermost one.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _node_of(self, t: Tensor) -> Optional[int]:
        if t._tape is self and t.node is not None:
            return t.node
        if t.requires_grad:
            # leaves get a record lazily, the first time this tape sees them
            idx = len(self.records)
            self.records.append(_Record((), None, t.shape))
            t._tape, t.node = self, idx
            self.leaves[idx] = t
            return idx
        return None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        nodes = tuple(self._node_of(t) for t in inputs)
        if all(n is None for n in nodes):
            return out
        self.records.append(_Record(nodes, backward_fn, out.shape))
        out._tape, out.node = self, len(self.records) - 1
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out._tape = None
    out.name = ""
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every tracked leaf.

    Returns a dict keyed by leaf tensor.  Leaves listed in ``wrt`` that the
    loss does not depend on map to zero tensors.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    grads: Dict[Tensor, Tensor] = {}
    if tape is None or loss.node is None:
        if wrt is None:
            raise ContractError("loss was not built on a live tape")
    else:
        adj: List[Optional[np.ndarray]] = [None] * (loss.node + 1)
        adj[loss.node] = np.ones(loss.shape)
        for idx in range(loss.node, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            rec = tape.records[idx]
            if rec.backward_fn is None:
                continue
            in_grads = rec.backward_fn(g)
            for node, ig in zip(rec.inputs, in_grads):
                if node is None or ig is None:
                    continue
                adj[node] = ig if adj[node] is None else adj[node] + ig
        for idx, leaf in tape.leaves.items():
            if idx <= loss.node and adj[idx] is not None:
                grads[leaf] = Tensor(adj[idx])
    if wrt is not None:
        for leaf in wrt:
            if leaf not in grads:
                grads[leaf] = Tensor(np.zeros(leaf.shape))
    return grads


def _binary_operands(a, b, opname: str):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def add_bias(x, b) -> Tensor:
    """Add row vector ``b`` (shape ``(n,)`` or ``(1, n)``) to every row of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.size != x.shape[1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    bshape = b.shape
    return _emit(x.data + b.data.reshape(1, -1), (x, b),
                 lambda g: (g, g.sum(axis=0).reshape(bshape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # x + log1p(exp(-x)) for x > 0 keeps exp from overflowing
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DimensionError("mean of an empty tensor")
    shape, n = a.shape, a.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def sq_norm(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.asarray(np.sum(ad * ad)), (a,), lambda g: (2.0 * float(g) * ad,))


def sum_axis(a, axis: int) -> Tensor:
    """Sum a matrix over ``axis`` (0 or 1), returning a vector."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"sum_axis: expected a matrix, got {a.shape}")
    shape = a.shape
    return _emit(a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def logsumexp_rows(a) -> Tensor:
    """Row-wise log-sum-exp of a matrix, returning a vector."""
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=1, keepdims=True)
    s = np.exp(ad - m)
    tot = s.sum(axis=1, keepdims=True)
    out = (m + np.log(tot)).reshape(-1)
    return _emit(out, (a,), lambda g: (g.reshape(-1, 1) * s / tot,))


def log_softmax_rows(a) -> Tensor:
    """Row-wise log-softmax of a matrix."""
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=1, keepdims=True)
    shifted = ad - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _emit(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: incompatible shapes {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    return _emit(np.concatenate([p.data for p in parts], axis=1), parts,
                 lambda g: tuple(np.split(g, cuts, axis=1)))


def take_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"take_cols: bad range [{start}, {stop}) for {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.data[:, start:stop].copy(), (a,), back)


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray,
                           rel_step: float = 1e-5) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |x_i|)`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        h = rel_step * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
