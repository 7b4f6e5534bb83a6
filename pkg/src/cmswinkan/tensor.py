"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .kernels import DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor requiring grad."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        # intermediate grads are fresh arrays that no op mutates, so no copy
        node.grad = g if node.grad is None else node.grad + g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


scale = mul


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


def cyclic_shift(x: Tensor, shift: tuple[int, int], axes: tuple[int, int] = (1, 2)) -> Tensor:
    """Cyclically shift the two spatial axes; ``(-s, -s)`` undoes ``(s, s)``."""
    return roll(x, shift, axes)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def einsum(spec: str, *operands) -> Tensor:
    """Differentiable einsum for explicit ``'in,in->out'`` specs without repeated
    indices inside a single operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, rhs = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(ops):
        raise DimensionError(f"einsum spec {spec!r} expects {len(ins)} operands")
    try:
        out = np.einsum(spec, *[o.data for o in ops], optimize=True)
    except ValueError as e:
        raise DimensionError(f"einsum {spec!r} on shapes {[o.shape for o in ops]}: {e}") from e

    def bw(g):
        res = []
        for i, op in enumerate(ops):
            if not op.requires_grad:
                res.append(None)
                continue
            others = [ins[j] for j in range(len(ops)) if j != i]
            avail = set(rhs).union(*others) if others else set(rhs)
            target = ins[i]
            keep = "".join(c for c in target if c in avail)
            sub_spec = ",".join([rhs] + others) + "->" + keep
            gi = np.einsum(sub_spec, g, *[ops[j].data for j in range(len(ops)) if j != i], optimize=True)
            if keep != target:
                # indices private to this operand: the gradient is constant along them
                gi = gi.reshape([gi.shape[keep.index(c)] if c in keep else 1 for c in target])
                gi = np.broadcast_to(gi, op.shape).copy()
            res.append(gi)
        return tuple(res)

    return _make(out, ops, bw, "einsum")


# ---------------------------------------------------------------------------
# fused neural-network primitives
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layernorm")


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
    """Batch normalisation over all axes but 1 of ``[B,C,...]``.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1.0 - momentum
        running_var += momentum * var.ravel() * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(bshape)
        xc = x.data - mu
        var = running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * g_
            if training:
                gx = inv * (
                    gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gh * inv
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm")


def cross_entropy_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(targets.shape[0])
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p / targets.shape[0],)

    return _make(np.array(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# spatial ops on [B,C,H,W] (or [C,H,W]) maps
# ---------------------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    return x, False


def unfold_kxk(x: Tensor, k: int, padding: int = 0, stride: int = 1) -> Tensor:
    """``[B,C,H,W] -> [B,C,k*k,Ho,Wo]``: every k x k window, zero-padded."""
    B, C, H, W = x.shape
    cols = kernels.unfold(x.data, k, stride, padding)
    Ho, Wo = cols.shape[4:]

    def bw(g):
        return (kernels.fold(g.reshape(B, C, k, k, Ho, Wo), H, W, k, stride, padding),)

    return _make(cols.reshape(B, C, k * k, Ho, Wo), (x,), bw, "unfold")


def fold_kxk(cols: Tensor, out_hw: tuple[int, int], k: int, padding: int = 0, stride: int = 1) -> Tensor:
    """Adjoint of :func:`unfold_kxk`: ``[B,C,k*k,Ho,Wo] -> [B,C,H,W]`` by scatter-add."""
    B, C, kk, Ho, Wo = cols.shape
    if kk != k * k:
        raise DimensionError(f"fold expects {k * k} window slots, got {kk}")
    H, W = out_hw
    if kernels.conv_out_size(H, k, stride, padding) != Ho or kernels.conv_out_size(W, k, stride, padding) != Wo:
        raise DimensionError(f"fold target {out_hw} inconsistent with {Ho}x{Wo} windows")
    out = kernels.fold(cols.data.reshape(B, C, k, k, Ho, Wo), H, W, k, stride, padding)

    def bw(g):
        return (kernels.unfold(g, k, stride, padding).reshape(cols.shape),)

    return _make(out, (cols,), bw, "fold")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[B,Cin,H,W]`` (or ``[Cin,H,W]``) with ``[Cout,Cin,k,k]``."""
    xb, squeeze = _batched(x)
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {kernel.shape}")
    if xb.shape[1] != cin:
        raise DimensionError(f"input channels {xb.shape[1]} != kernel channels {cin} ({x.shape} vs {kernel.shape})")
    B = xb.shape[0]
    if kh == 1 and stride == 1 and padding == 0:
        Ho, Wo = xb.shape[2:]
        cols = reshape(xb, (B, cin, Ho * Wo))
    else:
        cols = unfold_kxk(xb, kh, padding, stride)
        Ho, Wo = cols.shape[3:]
        cols = reshape(cols, (B, cin * kh * kw, Ho * Wo))
    out = reshape(matmul(reshape(kernel, (cout, cin * kh * kw)), cols), (B, cout, Ho, Wo))
    if bias is not None:
        out = add(out, reshape(bias, (1, cout, 1, 1)))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic ``[dst, src]`` linear interpolation matrix, align-corners=False."""
    if dst <= 0 or src <= 0:
        raise DimensionError(f"interpolation sizes must be positive, got {src} -> {dst}")
    m = np.zeros((dst, src))
    scale_ = src / dst
    for o in range(dst):
        pos = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(pos)), src - 1)
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize ``[C,h,w]`` / ``[B,C,h,w]`` maps with separable bilinear weights."""
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"upsample target must be positive, got {(out_h, out_w)}")
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise DimensionError(f"upsample target {(out_h, out_w)} smaller than source {(h, w)}")
    if (h, w) == (out_h, out_w):
        return x
    lead = x.shape[:-2]
    flat = reshape(x, (-1, h, w))
    out = matmul(matmul(Tensor(interp_matrix(h, out_h)), flat), Tensor(interp_matrix(w, out_w).T))
    return reshape(out, lead + (out_h, out_w))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


def window_partition(x: Tensor, m: int) -> Tensor:
    """``[B,H,W,C] -> [B*nW, m*m, C]`` non-overlapping m x m windows, row-major."""
    B, H, W, C = x.shape
    if H % m or W % m:
        raise DimensionError(f"window {m} does not divide spatial size {(H, W)}")
    t = reshape(x, (B, H // m, m, W // m, m, C))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (B * (H // m) * (W // m), m * m, C))


def window_reverse(windows: Tensor, m: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // m) * (W // m))
    t = reshape(windows, (B, H // m, W // m, m, m, C))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (B, H, W, C))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
