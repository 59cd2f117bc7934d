"""Small reverse-mode autodiff engine on top of numpy.

Only the operators needed by the adapter network are provided: convolution
(im2col), relu, batch normalization, linear, global average pooling and a
softmax cross entropy. Every operator checks its output for NaN/Inf.

Training runs in float32; gradient checking needs float64 tensors.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def thread_limit(n: int | None = None):
    """Context manager capping BLAS threads.

    ``n`` defaults to the ``AMDL_THREADS`` environment variable. With one
    thread every operator is bitwise reproducible.
    """
    if n is None:
        env = os.environ.get("AMDL_THREADS")
        if not env:
            return contextlib.nullcontext()
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"AMDL_THREADS must be an integer, got {env!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


class Tensor:
    """Dense array with an optional gradient slot.

    Tensors produced by operators remember their parents and a closure that
    maps the output gradient to the parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``.

    Calling twice without zeroing adds the gradients up. Leaves outside the
    graph are left untouched.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), bw, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels, columns run over (kh, kw, C) of an NHWC padded input."""
    n, c = xp.shape[0], xp.shape[3]
    if kh == kw == 1:
        sub = xp[:, : stride * ho : stride, : stride * wo : stride, :]
        return sub.reshape(n * ho * wo, c)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    center: Tensor | None = None,
    center_bias: Tensor | None = None,
) -> Tensor:
    """2-D cross-correlation, NCHW input and OIkhkw filters.

    ``center`` is an optional (O, I, 1, 1) kernel added to the centre tap of
    ``w`` (and ``center_bias`` to ``b``). With same-size padding this equals a
    parallel pointwise convolution at the same stride, computed in one pass.

    Internally works channels-last; the returned array has NCHW shape but
    NHWC memory order, which the next convolution consumes without copying.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise DimensionError(f"conv2d: input has {c} channels, filter expects {i}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({o},)")
    if center is not None:
        if center.shape != (o, i, 1, 1):
            raise DimensionError(f"conv2d: centre kernel shape {center.shape} != ({o}, {i}, 1, 1)")
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("conv2d: a centre kernel needs an odd filter size")
    if center_bias is not None and center_bias.shape != (o,):
        raise DimensionError(f"conv2d: centre bias shape {center_bias.shape} != ({o},)")
    _check_finite(x.data, "conv2d input")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")

    xh = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xh
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    tap = ((kh // 2) * kw + kw // 2) * c  # first column of the centre tap
    if center is not None:
        wmat = wmat.copy()
        wmat[:, tap : tap + c] += center.data[:, :, 0, 0]
    with np.errstate(over="ignore", invalid="ignore"):  # caught by the finiteness check below
        out = cols @ wmat.T
    if b is not None:
        out += b.data
    if center_bias is not None:
        out += center_bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = None
        if w.requires_grad:
            dw = np.ascontiguousarray((g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        dc = None
        if center is not None and center.requires_grad:
            dc = (g2.T @ cols[:, tap : tap + c]).reshape(o, c, 1, 1)
        need_gsum = (b is not None and b.requires_grad) or (center_bias is not None and center_bias.requires_grad)
        gsum = g2.sum(axis=0) if need_gsum else None
        db = gsum if (b is not None and b.requires_grad) else None
        dcb = gsum if (center_bias is not None and center_bias.requires_grad) else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            if kh == kw == 1 and stride == 1 and pad == 0:
                dxp = dcols.reshape(n, ho, wo, c)
            else:
                dxp = np.zeros(xp.shape, dtype=dcols.dtype)
                for di in range(kh):
                    for dj in range(kw):
                        dxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += dcols[:, :, :, di, dj, :]
            dx = (dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp).transpose(0, 3, 1, 2)
        grads = {"x": dx, "w": dw, "b": db, "center": dc, "center_bias": dcb}
        return tuple(grads[k] for k in names)

    names = ["x", "w"]
    parents = [x, w]
    for key, t in (("b", b), ("center", center), ("center_bias", center_bias)):
        if t is not None:
            names.append(key)
            parents.append(t)
    return _make(out, parents, bw, "conv2d")


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Loop-based reference convolution (no im2col), used as a test oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, w))
    for r in range(ho):
        for s in range(wo):
            patch = xp[:, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
            for oc in range(o):
                out[:, oc, r, s] = (patch * w[oc]).sum(axis=(1, 2, 3))
    if b is not None:
        out += b[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# normalization, dense layers, pooling, loss


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the batch statistics (biased variance) normalize the
    input and the running buffers are updated in place:
    ``running = (1 - momentum) * running + momentum * batch``.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma/beta must have shape ({c},)")
    dt = x.dtype
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise DimensionError("batchnorm in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        m = None
        mean = running_mean.astype(dt, copy=False)
        var = running_var.astype(dt, copy=False)
        xc = x.data - mean.reshape(1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt, copy=False)
    xhat = xc * inv.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with x of shape (N, F) and w of shape (F, M)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        dx = g @ w.data.T if x.requires_grad else None
        dw = x.data.T @ g if w.requires_grad else None
        db = g.sum(axis=0) if (b is not None and b.requires_grad) else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def bw(g):
        d = softmax(logits.data)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """SGD hyperparameters plus one momentum buffer per parameter."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Iterable[Tensor], state: OptimState) -> None:
    """One SGD update with L2 weight decay folded into the gradient.

    ``g' = g + wd*w``, ``v = mom*v + g'``, ``w -= lr*v``. Gradients are
    cleared afterwards; parameters without a gradient are skipped.
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.momentum:
            v = state.velocity.get(id(p))
            if v is None:
                v = np.array(g, dtype=p.data.dtype, copy=True)
            else:
                v *= state.momentum
                v += g
            state.velocity[id(p)] = v
            g = v
        p.data -= (state.lr * g).astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckError(AssertionError):
    pass


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float | None = None,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    Returns the largest relative error ``|a - n| / max(|a|, |n|, 1e-8)``.
    If ``tol`` is given and exceeded, raises :class:`GradCheckError`.
    ``max_elements`` probes a random subset of each input instead of every entry.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        idx = np.arange(t.data.size)
        if max_elements is not None and idx.size > max_elements:
            idx = np.sort(rng.choice(idx, size=max_elements, replace=False))
        for flat in idx:
            pos = np.unravel_index(flat, t.shape)
            orig = t.data[pos]
            t.data[pos] = orig + h
            fp = float(fn(*inputs).data)
            t.data[pos] = orig - h
            fm = float(fn(*inputs).data)
            t.data[pos] = orig
            num = (fp - fm) / (2 * h)
            ana = float(a[pos])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    if tol is not None and worst > tol:
        raise GradCheckError(f"max relative gradient error {worst:.3e} exceeds {tol:.1e}")
    return worst
