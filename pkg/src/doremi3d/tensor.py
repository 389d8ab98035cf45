"""Dense fp64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape nothing is recorded, which
doubles as an inference mode.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> grads = backward(tape, loss)
    >>> grads[x].tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from doremi3d.errors import ConfigurationError, NonFiniteError, UsageError

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence["Array | None"]]

_GELU_C = np.sqrt(2.0 / np.pi)
LAYER_NORM_EPS = 1e-6


def _checked(arr: Array, name: str | None = None) -> Array:
    # a sum of finite values is finite unless it overflows, so the full scan
    # only runs when the cheap one fails
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
    return arr


class Tensor:
    """An fp64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _checked(np.array(data, dtype=np.float64), name)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already topologically
    sorted and a reversed sweep visits every node exactly once.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def references(self, tensor: Tensor) -> bool:
        """True if any recorded node consumes or produces ``tensor``."""
        for node in self.nodes:
            if node.output is tensor or any(t is tensor for t in node.inputs):
                return True
        return False

    def backward(self, loss: Tensor) -> dict[Tensor, Array]:
        return backward(self, loss)


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: Array, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op and record it if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    # op outputs are fresh arrays, so they are adopted without a copy
    out = Tensor.__new__(Tensor)
    out.data = _checked(np.asarray(data, dtype=np.float64))
    out.requires_grad = False
    out.grad = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Array]:
    """Propagate d(loss)/d(.) through ``tape``.

    Leaf tensors (those not produced by a recorded node) get their gradient
    accumulated into ``.grad``. Returns a mapping from every reached
    requires_grad tensor to its gradient.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss was not recorded on a tape (was it computed outside the Tape block?)")
    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                gi = _unbroadcast(gi, t.data.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    out: dict[Tensor, Array] = {}
    for key, t in owners.items():
        if not t.requires_grad:
            continue
        out[t] = grads[key]
        if key not in produced:
            t.grad = grads[key].copy() if t.grad is None else t.grad + grads[key]
    return out


def finite_difference_gradient(f: Callable[[Array], float], x, h: float = 1e-6) -> Array:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: Array, b: Array) -> float:
    """||a - b|| / max(||a||, ||b||), guarded for all-zero inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return custom_op(out, (a, b), lambda g: (g / bd, -g * out / bd))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return custom_op(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return custom_op(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form, 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    half = t + 1.0
    half *= 0.5

    def back(g):
        inner = x2 * (3 * 0.044715 * _GELU_C)
        inner += _GELU_C
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= xd
        d *= 0.5
        d *= inner
        d += half
        d *= g
        return (d,)

    return custom_op(xd * half, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    # frozen operands get no gradient, which skips one product per call
    return custom_op(ad @ bd, (a, b), lambda g: (g @ bd.T if a.requires_grad else None,
                                                 ad.T @ g if b.requires_grad else None))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with x: N x Din, weight: Din x Dout, bias: Dout."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ConfigurationError(f"linear shape mismatch {xd.shape} @ {wd.shape}")
    out = xd @ wd
    if bias is None:
        return custom_op(out, (x, weight), lambda g: (g @ wd.T if x.requires_grad else None,
                                                      xd.T @ g if weight.requires_grad else None))
    if bias.data.shape != (wd.shape[1],):
        raise ConfigurationError(f"bias shape {bias.data.shape} != ({wd.shape[1]},)")
    out = out + bias.data
    return custom_op(out, (x, weight, bias), lambda g: (g @ wd.T if x.requires_grad else None,
                                                        xd.T @ g if weight.requires_grad else None,
                                                        g.sum(axis=0) if bias.requires_grad else None))


def sparse_apply(matrix: sparse.spmatrix, x: Tensor) -> Tensor:
    """Multiply a constant sparse matrix into ``x`` (rows)."""
    mt = matrix.T.tocsr()
    return custom_op(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


# ---------------------------------------------------------------- normalisation / softmax


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(xhat * gd + offset.data, (x, gain, offset), back)


def _softmax(xd: Array) -> Array:
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last(x: Tensor) -> Tensor:
    p = _softmax(x.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (x,), back)


def log_softmax_last(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return custom_op(out, (x,), back)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return custom_op(y, (x,), back)


# ---------------------------------------------------------------- indexing


def _row_sum(index: Array, rows: Array, n_rows: int) -> Array:
    """``out[index[i]] += rows[i]`` without the slow unbuffered ufunc path."""
    if index.size and np.unique(index).size == index.size:
        out = np.zeros((n_rows,) + rows.shape[1:])
        out[index] = rows
        return out
    flat = rows.reshape(rows.shape[0], -1)
    m = sparse.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n_rows, index.size))
    return np.asarray(m @ flat).reshape((n_rows,) + rows.shape[1:])


def take_rows(x: Tensor, index: Array) -> Tensor:
    """Gather ``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.int64)
    n = x.data.shape[0]
    return custom_op(x.data[index], (x,), lambda g: (_row_sum(index, g, n),))


def scatter_rows(n_rows: int, index: Array, src: Tensor) -> Tensor:
    """Rows of ``src`` summed into an ``n_rows``-row zero array at ``index``."""
    index = np.asarray(index, dtype=np.int64)
    return custom_op(_row_sum(index, src.data, n_rows), (src,), lambda g: (g[index],))


def pick(x: Tensor, cols: Array) -> Tensor:
    """``x[i, cols[i]]`` for every row i."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    shape = x.data.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return custom_op(x.data[rows, cols], (x,), back)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def transpose(x: Tensor) -> Tensor:
    return custom_op(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- composites


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]], activation=gelu) -> Tensor:
    """Linear layers with ``activation`` between them (none after the last)."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i < len(layers) - 1:
            h = activation(h)
    return h
