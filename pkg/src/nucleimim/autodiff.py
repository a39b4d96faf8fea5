"""Small reverse-mode autodiff over numpy arrays.

Every primitive the model needs is defined here with an analytic backward
rule. Graphs are built eagerly: an op records its parents and a closure
mapping the output gradient to per-parent gradients. ``Tensor.backward``
walks the graph in reverse topological order and *adds* into the ``grad``
of every leaf that requires it (callers zero grads between steps).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (``"float32"``/``"float64"``)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating) or arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_toposort(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    return _result(d * cdf, (x,), lambda g: (g * (cdf + d * pdf),))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b`` (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError("where", cond.shape, a.shape, b.shape) from None
    out = np.where(cond, a.data, b.data)

    def backward(g):
        g = np.broadcast_to(g, shape)
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _result(out.astype(_DTYPE, copy=False), (a, b), backward)


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


# -- normalisation and probabilities ----------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward)


def softmax(x, axis: int = -1, key_mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``key_mask`` (broadcastable boolean) marks entries to exclude; their
    logits are treated as -inf so their probability is exactly zero.
    """
    x = as_tensor(x)
    z = x.data
    if key_mask is not None:
        z = np.where(key_mask, -np.inf, z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, targets, reduction: str = "sum", weights=None) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under ``logits`` (n, V)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    n, v = logits.shape
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    z = logits.data - (logits.data.max(axis=1, keepdims=True) if n else 0.0)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    w = np.ones(n, dtype=logits.data.dtype) if weights is None else np.asarray(weights, logits.data.dtype)
    rows = np.arange(n)
    nll = -logp[rows, targets] * w
    scale = 1.0
    if reduction == "mean":
        scale = 1.0 / max(n, 1)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray(nll.sum() * scale, dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (w * scale * g)[:, None],)

    return _result(out, (logits,), backward)


# -- spatial ops --------------------------------------------------------------

def conv2d(x, weight, bias=None) -> Tensor:
    """Valid-padding, stride-1 convolution in NHWC layout.

    ``weight`` has shape (kh, kw, c_in, c_out).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2] \
            or weight.shape[0] > x.shape[1] or weight.shape[1] > x.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, h, w, c = x.shape
    kh, kw, _, co = weight.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, kh * kw * c)
    wmat = weight.data.reshape(kh * kw * c, co)
    out = cols @ wmat
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError("conv2d", weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gw = cols.reshape(-1, kh * kw * c).T @ g.reshape(-1, co)
        gcols = (g @ wmat.T).reshape(n, oh, ow, kh, kw, c)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + oh, j:j + ow, :] += gcols[:, :, :, i, j, :]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.reshape(-1, co).sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward)


def bilinear_sample(fmap, batch_index, ys, xs) -> Tensor:
    """Bilinearly sample ``fmap`` (B, H, W, D) at fractional cell coordinates.

    ``ys``/``xs`` are in cell-centre units (cell (i, j) has its centre at
    (i, j)); points are clamped to the valid range. Returns (n, D).
    """
    fmap = as_tensor(fmap)
    if fmap.ndim != 4:
        raise ShapeError("bilinear_sample", fmap.shape, np.shape(ys))
    _, h, w, _ = fmap.shape
    bi = np.asarray(batch_index, dtype=np.int64)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    if not (bi.shape == y.shape == x.shape):
        raise ShapeError("bilinear_sample", bi.shape, y.shape, x.shape)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    hy, hx = 1.0 - ly, 1.0 - lx
    corners = ((y0, x0, hy * hx), (y0, x1, hy * lx), (y1, x0, ly * hx), (y1, x1, ly * lx))
    dt = fmap.data.dtype
    out = sum(fmap.data[bi, yy, xx] * ww.astype(dt)[:, None] for yy, xx, ww in corners)

    def backward(g):
        gf = np.zeros_like(fmap.data)
        for yy, xx, ww in corners:
            np.add.at(gf, (bi, yy, xx), g * ww.astype(dt)[:, None])
        return (gf,)

    return _result(np.asarray(out, dtype=dt), (fmap,), backward)


# -- verification -------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Returns max |analytic - numeric| / max(1, |analytic|) over the checked
    flat coordinates (all of them unless ``coords`` is given). Must run in
    float64.
    """
    if _DTYPE is not np.float64:
        raise RuntimeError("grad_check requires float64 precision")
    x = x if isinstance(x, Tensor) else Tensor(x)
    base = x.data.copy()
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    flat = xt.data.reshape(-1)
    for i in idx:
        flat[i] = base.flat[i] + eps
        fp = f(Tensor(xt.data)).item()
        flat[i] = base.flat[i] - eps
        fm = f(Tensor(xt.data)).item()
        flat[i] = base.flat[i]
        num = (fp - fm) / (2.0 * eps)
        a = analytic.flat[i]
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(a)):
            raise NonFiniteError(f"non-finite value at coordinate {np.unravel_index(i, base.shape)}")
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """grad_check every tensor in ``params`` in place; ``loss_fn`` closes over them.

    With ``max_coords`` only that many random coordinates per tensor are
    perturbed.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        n = p.data.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            a = analytic[name].flat[i]
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss perturbing {name}{np.unravel_index(i, p.shape)}")
            worst = max(worst, abs(a - (fp - fm) / (2 * eps)) / max(1.0, abs(a)))
        errors[name] = worst
    for p in params.values():
        p.grad = None
    return errors
