"""Dense tensors with reverse-mode automatic differentiation.

Every array that takes part in training is a :class:`Tensor`. Operations on
tensors that require gradients record a :class:`Node` holding the parents and
a backward rule. :func:`backward` collects the reachable nodes into a
:class:`Tape` (topological order) and sweeps it in reverse, accumulating
gradients into leaf tensors.

The graph lives on the tensors themselves, so independent graphs can be built
and differentiated on different threads without sharing state. Gradient
recording can be suspended per thread with :func:`no_grad`.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from Python data (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording on the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    """One recorded operation: its inputs and how to push a gradient back to them."""

    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents: Sequence["Tensor"], backward_fn: Callable, op: str):
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """A dense n-dimensional array that can take part in differentiation.

    Args:
        data: Array-like values. Python data is converted to the default dtype;
            numpy float arrays keep their dtype.
        requires_grad: Whether backward should produce a gradient for this tensor.
        name: Optional label, used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        elif not isinstance(data, np.ndarray):
            arr = arr.astype(_DEFAULT_DTYPE, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat view of the values in row-major order."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(parents, backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Tape and backward sweep
# ---------------------------------------------------------------------------
class Tape:
    """Recorded operations reachable from an output, in topological order.

    Every entry's inputs are produced by earlier entries (or are leaves).
    """

    def __init__(self, nodes: list[Tensor]):
        self.entries = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in reversed(t.node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.entries if t.node is not None]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate: a leaf used along several paths receives the sum,
    and repeated calls add to existing ``.grad`` arrays.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad += g
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast (e.g. a bias row over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * a.data * g,)

    return _make(a.data * a.data, (a,), bw, "square")


def sqrt(a: Tensor, grad_floor: float = 0.0) -> Tensor:
    """Elementwise root; the derivative divides by ``max(out, grad_floor)``.

    A positive ``grad_floor`` keeps the backward pass finite at zero without
    changing the forward value.
    """
    out = np.sqrt(a.data)

    def bw(g):
        return (g / (2.0 * np.maximum(out, grad_floor)),)

    return _make(out, (a,), bw, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), bw, "relu")


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty tensor list")
    ref = tensors[0]
    ax = axis % ref.ndim if ref.ndim else 0
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[x.shape for x in tensors]} differ outside axis {axis}"
            )
    offsets = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def take_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-D table; the one-hot product reduced to indexing."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"take_rows: table must be 2-D, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "take_rows")


def index(a: Tensor, i: int) -> Tensor:
    """Slice ``a[i]`` along the first axis."""
    if not -a.shape[0] <= i < a.shape[0]:
        raise IndexError(f"index {i} out of range for leading extent {a.shape[0]}")

    def bw(g):
        out = np.zeros_like(a.data)
        out[i] = g
        return (out,)

    return _make(a.data[i], (a,), bw, "index")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Normalization layers
# ---------------------------------------------------------------------------
def softmax_rows(a: Tensor) -> Tensor:
    """Stabilized softmax over the last axis."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("softmax_rows: input contains NaN")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def exp_normalize_rows(a: Tensor) -> Tensor:
    """x / sum(exp(x)) over the last axis (rows are not stochastic)."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("exp_normalize_rows: input contains NaN")
    return div(a, tsum(exp(a), axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean and unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ValueError("layer_norm: last axis is empty")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def dropout(
    a: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in evaluation."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), bw, "dropout")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------
def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def finite_diff_errors(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-6,
    coords: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Compare analytic gradients with central differences, per parameter.

    ``f`` is re-evaluated with each sampled coordinate nudged by +/- ``step``.
    Up to ``coords`` coordinates are drawn without replacement from every
    parameter (all of them when the tensor is smaller).

    Returns:
        Mapping from parameter label to its maximum relative error. A
        non-finite function value or gradient yields ``inf``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    if not np.all(np.isfinite(loss.data)):
        return {_label(p, i): float("inf") for i, p in enumerate(params)}
    errors = {}
    for i, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        chosen = (
            np.arange(flat.size)
            if flat.size <= coords
            else rng.choice(flat.size, size=coords, replace=False)
        )
        worst = 0.0
        for c in chosen:
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                hi = float(f().data.reshape(-1)[0])
            flat[c] = orig - step
            with no_grad():
                lo = float(f().data.reshape(-1)[0])
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * step)
            exact = analytic.reshape(-1)[c]
            if not (np.isfinite(numeric) and np.isfinite(exact)):
                worst = float("inf")
                break
            worst = max(worst, float(relative_error(exact, numeric)))
        errors[_label(p, i)] = worst
    return errors


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-6,
    coords: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Maximum relative error between backward() and central differences."""
    errors = finite_diff_errors(f, params, step=step, coords=coords, rng=rng)
    return max(errors.values()) if errors else 0.0


def _label(p: Tensor, i: int) -> str:
    return p.name or f"param{i}"
