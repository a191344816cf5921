"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op builds its output through :func:`_record`, which
stores the parent tensors and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order.

Broadcasting is limited to leading-batch expansion: for binary ops the
shape of one operand must be a suffix of the other's (a scalar counts as
the empty suffix). Anything else raises a ``ValueError`` naming both shapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD = threading.local()  # per-thread so concurrent inference cannot switch recording off elsewhere


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference on frozen parameters)."""
    previous = is_grad_enabled()
    _GRAD.enabled = False
    try:
        yield
    finally:
        _GRAD.enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_GRAD, "enabled", True)


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -------------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every ancestor that requires it.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is
        given. The recorded graph is released afterwards, so a second call
        on the same output raises.
        """
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"upstream grad shape {grad.shape} != tensor shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already released by a previous backward(); rebuild the forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad (no recorded graph)")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy() if node._backward is None else g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._consumed = False
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    sa, sb = a.shape, b.shape
    if sa != sb:
        short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
        if long_[len(long_) - len(short):] != short:
            raise ValueError(f"incompatible shapes {sa} and {sb}: only leading-batch expansion is supported")
    return a, b


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for tensor of rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_check_axis(a, x.ndim) for a in axes)
    else:
        axes = tuple(range(x.ndim))
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[_check_axis(a, x.ndim)] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; ``None`` swaps the last two (matrix transpose)."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ValueError(f"transpose needs rank >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = _check_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"cannot concat shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record(out, tensors, backward)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing (``x[index]``); repeated indices accumulate in backward."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise IndexError(f"index out of range for shape {x.shape}: {exc}") from None

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, copy=True), (x,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of a 2-D table selected by an integer array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"embedding table must be 2-D, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes.

    Either both operands carry identical leading batch axes, or ``b`` is a
    plain matrix shared across ``a``'s batch (a weight).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# normalisation and probabilities
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation along ``axis`` (no affine part)."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    mu = x.data.mean(axis=axis, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centred * inv
    n = x.shape[axis]

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _record(out, (x,), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of integer ``target`` under ``softmax(logits)``.

    ``logits`` has shape ``(..., C)`` and ``target`` shape ``(...)``; the
    result holds one loss per position (a scalar for 1-D logits).
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    classes = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= classes):
        raise IndexError(f"target index out of range [0, {classes})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, -1)
        return (grad * np.asarray(g)[..., None],)

    return _record(np.asarray(-picked, dtype=logits.dtype), (logits,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is ``None``."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on ``(N, C, H, W)`` inputs with ``(O, C, kh, kw)`` filters."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    xp = _pad_hw(x.data, pad)
    ho = (hgt + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : ho * stride : stride, : wo * stride : stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + hgt, pad : pad + wid] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, backward)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``tensor.data``."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(fn().data.sum())
            flat[i] = orig - eps
            minus = float(fn().data.sum())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def gradcheck(
    fn: Callable[[], Tensor], tensors: Iterable[Tensor], eps: float = 1e-5, sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error ``|analytic - numeric| / max(1, |numeric|)`` over ``tensors``.

    With ``sample`` set, only that many randomly chosen coordinates per
    tensor are perturbed (for large parameter sets).
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        analytic = np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        coords = range(flat.size) if sample is None or sample >= flat.size else rng.choice(flat.size, sample, replace=False)
        num = np.zeros(len(coords))
        ana = np.zeros(len(coords))
        with no_grad():
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                plus = float(fn().data.sum())
                flat[i] = orig - eps
                minus = float(fn().data.sum())
                flat[i] = orig
                num[k] = (plus - minus) / (2 * eps)
                ana[k] = analytic.reshape(-1)[i]
        err = np.linalg.norm(ana - num) / max(1.0, np.linalg.norm(num))
        worst = max(worst, float(err))
    return worst
