"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is on and any
input requires a gradient, the output keeps references to its parents plus a
closure mapping the output cotangent to parent cotangents. ``backward`` walks
that DAG once in reverse topological order.

Ops act on trailing dimensions, so a leading batch axis rides along for free:
``matmul`` on ``(B, N, D) @ (D, E)`` or ``layer_norm`` on ``(B, N, D)`` work
the same as on a single ``N x D`` matrix.

Single-threaded per graph. Gradient mode is thread-local, so a frozen model
can be evaluated under ``no_grad`` from several threads at once.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "bilinear_matrix",
    "bilinear_resize",
    "clamp",
    "concat_rows",
    "div",
    "elementwise",
    "exp",
    "finite_diff_check",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "log",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mse",
    "mul",
    "no_grad",
    "reshape",
    "sigmoid",
    "slice_rows",
    "softmax_rows",
    "split_rows",
    "square",
    "sub",
    "sum_",
    "take_rows",
    "tanh",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An op was called outside its precondition (e.g. backward on a non-scalar)."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


_CONSUMED = object()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # -- operators -----------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, grad=None, retain_graph: bool = False) -> None:
        backward(self, grad=grad, retain_graph=retain_graph)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{what}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def fn(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), fn, "div")


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _make(out, (x,), fn, "gelu")


def abs_(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def fn(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), fn, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def fn(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), fn, "minimum")


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "hadamard": mul,
    "div": div,
    "square": square,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "abs": abs_,
    "neg": lambda x: mul(x, -1.0),
}


def elementwise(kind: str, x, y=None) -> Tensor:
    """Dispatch a pointwise op by name; binary kinds take ``y`` (tensor or scalar)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; valid: {sorted(_ELEMENTWISE)}") from None
    if kind in ("add", "sub", "mul", "hadamard", "div"):
        if y is None:
            raise ContractError(f"{kind} needs a second operand")
        return fn(x, y)
    return fn(x)


# -- reductions and shape ops ---------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat_rows(a, b) -> Tensor:
    """Stack ``a`` on top of ``b`` along the row (second-to-last) axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: column mismatch between {a.shape} and {b.shape}")
    p = a.shape[-2]

    def fn(g):
        return g[..., :p, :], g[..., p:, :]

    return _make(np.concatenate([a.data, b.data], axis=-2), (a, b), fn, "concat_rows")


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    n = x.shape[-2]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_rows: [{start}, {stop}) invalid for {n} rows")

    def fn(g):
        full = np.zeros(x.shape)
        full[..., start:stop, :] = g
        return (full,)

    return _make(x.data[..., start:stop, :], (x,), fn, "slice_rows")


def split_rows(x, p: int) -> tuple[Tensor, Tensor]:
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"split_rows needs a matrix, got {x.shape}")
    n = x.shape[-2]
    if not 0 < p < n:
        raise DimensionError(f"split_rows: split point {p} invalid for {n} rows")
    return slice_rows(x, 0, p), slice_rows(x, p, n)


def take_rows(x, idx) -> Tensor:
    """Pick one row per batch entry: ``x[b, idx[b], :]`` for ``x`` of shape (B, N, k)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.shape != (x.shape[0],):
        raise DimensionError(f"take_rows: x {x.shape} with indices {idx.shape}")
    b = np.arange(x.shape[0])

    def fn(g):
        full = np.zeros(x.shape)
        full[b, idx] = g
        return (full,)

    return _make(x.data[b, idx], (x,), fn, "take_rows")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} disagree") from None

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, max-shifted per row."""
    x = _as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), fn, "softmax_rows")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit population variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs rows of width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), fn, "layer_norm")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out x n_in) along one axis, half-pixel centers, edge clamp."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"bilinear sizes must be >= 1, got {n_in} -> {n_out}")
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        w[i, i0] += 1.0 - frac
        w[i, i1] += frac
    return w


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resample a (..., h, w, c) grid to (..., out_h, out_w, c), channel by channel."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"bilinear_resize expects (..., h, w, c), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    out = x
    if out_h != h:
        ry = bilinear_matrix(h, out_h)
        out = _resample_axis(out, ry, axis=-3)
    if out_w != w:
        rx = bilinear_matrix(w, out_w)
        out = _resample_axis(out, rx, axis=-2)
    if out is x:
        # same-size resample is the identity; keep it as its own node
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    return out


def _resample_axis(x: Tensor, r: np.ndarray, axis: int) -> Tensor:
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ r.T, -1, axis)

    def fn(g):
        gm = np.moveaxis(g, axis, -1) @ r
        return (np.moveaxis(gm, -1, axis),)

    return _make(np.ascontiguousarray(out), (x,), fn, "bilinear_resize")


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def fn(g):
        ga = g * (2.0 / n) * d
        return ga, -ga

    return _make(np.asarray((d * d).sum() / n), (a, b), fn, "mse")


# -- backward -------------------------------------------------------------

def backward(loss: Tensor, grad=None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Leaf gradients add up across calls; reset them with ``zero_grad``. The graph
    is released afterwards unless ``retain_graph`` is set.
    """
    if loss._backward is _CONSUMED:
        raise ContractError("graph already consumed by an earlier backward(); pass retain_graph=True")
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward() on non-scalar output of shape {loss.shape}")
        grad = np.ones(loss.shape)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed gradient {grad.shape} vs output {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg

    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = _CONSUMED


# -- gradient oracle -------------------------------------------------------

def finite_diff_check(f: Callable[..., Tensor], x, eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward() grads and central differences.

    ``x`` is a leaf Tensor or a sequence of them; ``f`` is called with no
    arguments when ``x`` is a sequence (it closes over the tensors) and with
    ``x`` otherwise. ``max_coords`` subsamples coordinates per tensor.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    single = isinstance(x, Tensor)
    leaves: list[Tensor] = [x] if single else list(x)
    call = (lambda: f(x)) if single else f

    for t in leaves:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    call().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in leaves]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ga in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            coords: Iterable[int] = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = call().item()
                flat[i] = orig - eps
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(ga.reshape(-1)[i] - num) / max(1e-12, abs(num))
                worst = max(worst, err)
    for t in leaves:
        t.grad = None
    return worst
