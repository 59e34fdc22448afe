"""Dense tensors with a dynamically recorded tape for reverse-mode gradients.

Every op takes and returns :class:`Tensor`. Shapes must line up exactly; the
only implicit broadcast is a Python scalar against a tensor. Use
:func:`broadcast_to` when a row or vector has to be repeated.

Convolutions are channels-last: a batch of skeleton features is laid out as
``[B, T, V, C]`` and a kernel as ``[kt, ks, C_in, C_out]``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32


class ShapeError(ValueError):
    pass


def get_dtype():
    return _DTYPE


def set_precision(name: str) -> None:
    """Set the dtype new tensors are created with: ``"float32"`` or ``"float64"``."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name).type


@contextlib.contextmanager
def precision(name: str):
    prev = np.dtype(_DTYPE).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.array(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar; all of these route through the checked ops below
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    # op outputs keep the dtype numpy produced; only leaves are cast
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- graph


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; exact zeros for unreached ones."""
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + float(s), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def hinge(a: Tensor) -> Tensor:
    """max(0, a) elementwise."""
    return relu(a)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes), 1.0 / n)


def norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (Frobenius when several axes are given).

    The subgradient at zero is taken to be zero.
    """
    axes = _norm_axes(axis, a.ndim)
    out = np.sqrt((a.data * a.data).sum(axis=axes))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        ratio = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(ratio, axes),)

    return _make(out, (a,), bw)


def dot(a: Tensor, b: Tensor, axis=-1) -> Tensor:
    return sum(mul(a, b), axis)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; size-1 axes of ``a`` are repeated to ``shape``."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(out, (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., M, K] @ b[K, N]`` or batched ``a[..., M, K] @ b[..., K, N]``.

    Batch dimensions must match exactly when ``b`` is not 2-D.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw)


def _pad(x: np.ndarray, pt: int, ps: int) -> np.ndarray:
    if pt == 0 and ps == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pt), (ps, ps), (0, 0)))


def conv2d_output_shape(in_shape, kernel_shape, stride=(1, 1), padding=(0, 0)):
    b, t, v, cin = in_shape
    kt, ks, kcin, cout = kernel_shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input {tuple(in_shape)} has {cin} channels, kernel {tuple(kernel_shape)} expects {kcin}")
    to = (t + 2 * padding[0] - kt) // stride[0] + 1
    vo = (v + 2 * padding[1] - ks) // stride[1] + 1
    if to < 1 or vo < 1:
        raise ShapeError(f"conv2d: kernel {tuple(kernel_shape)} too large for input {tuple(in_shape)}")
    return (b, to, vo, cout)


def conv2d(x: Tensor, w: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of ``x[B, T, V, Cin]`` with ``w[kt, ks, Cin, Cout]``.

    Output is ``[B, (T + 2pt - kt)//st + 1, (V + 2ps - ks)//ss + 1, Cout]``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    st, ss = stride
    pt, ps = padding
    _, to, vo, cout = conv2d_output_shape(x.shape, w.shape, stride, padding)
    b = x.shape[0]
    kt, ks, cin = w.shape[:3]
    xp = _pad(x.data, pt, ps)
    wmat = w.data.reshape(-1, cout)
    if kt == ks == 1:
        cols = xp[:, ::st, ::ss][:, :to, :vo]
    else:
        # im2col: one [B, to, vo, kt, ks, Cin] copy, then a single matmul
        win = np.lib.stride_tricks.sliding_window_view(xp, (kt, ks), axis=(1, 2))
        cols = win[:, ::st, ::ss][:, :to, :vo].transpose(0, 1, 2, 4, 5, 3)
    cols = np.ascontiguousarray(cols).reshape(-1, kt * ks * cin)
    out = (cols @ wmat).reshape(b, to, vo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(b, to, vo, kt, ks, cin)
        gxp = np.zeros_like(xp)
        for i in range(kt):
            for j in range(ks):
                gxp[:, i:i + st * (to - 1) + 1:st, j:j + ss * (vo - 1) + 1:ss] += gcols[:, :, :, i, j]
        gx = gxp[:, pt:pt + x.shape[1], ps:ps + x.shape[2], :]
        return gx, gw

    return _make(out, (x, w), bw)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution of ``x[B, T, Cin]`` with ``w[k, Cin, Cout]``."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and kernel, got {x.shape} and {w.shape}")
    b, t, c = x.shape
    k, cin, cout = w.shape
    y = conv2d(reshape(x, (b, t, 1, c)), reshape(w, (k, 1, cin, cout)),
               stride=(stride, 1), padding=(padding, 0))
    return reshape(y, (b, y.shape[1], cout))


def upsample2(x: Tensor, axis: int = 1) -> Tensor:
    """Nearest-neighbour ×2 repeat along ``axis``."""
    axis = axis % x.ndim
    out = np.repeat(x.data, 2, axis=axis)

    def bw(g):
        shp = list(x.shape)
        shp.insert(axis + 1, 2)
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- classification


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (logits,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return scale(sum(picked), -1.0 / len(labels))


# ---------------------------------------------------------------- checking


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data`` (mutated in place)."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7,
                   rel_floor: float = 1e-2) -> float:
    """Worst elementwise ``|a - n| / max(|a|, |n|, f)``.

    ``f`` is ``rel_floor`` times the largest gradient entry (or ``floor`` if
    larger), so entries far below the tensor's scale, where central
    differences carry only roundoff, are judged against that scale.
    """
    diff = np.abs(analytic - numeric)
    if not diff.size:
        return 0.0
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor, rel_floor * scale))
    return float((diff / denom).max())


def check_gradients(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                    floor: float = 1e-7) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    params = list(params)
    analytic = grad(fn(), params)
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(fn, p, h), floor))
    return worst
