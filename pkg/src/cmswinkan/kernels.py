"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a vectorised numpy
fallback with identical semantics. The numba path is used when numba imports
cleanly and ``CMSWINKAN_PURE_NUMPY`` is unset (or ``0``); set it to ``1`` to
force the fallback, e.g. for debugging or on platforms without numba.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _env_wants_numpy() -> bool:
    return os.environ.get("CMSWINKAN_PURE_NUMPY", "0").lower() in ("1", "true", "yes")


USE_NUMBA = _HAVE_NUMBA and not _env_wants_numpy()


def set_backend(name: str) -> None:
    """Switch kernels between ``"numba"`` and ``"numpy"`` at runtime."""
    global USE_NUMBA
    if name == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("numba is not importable")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# B-spline basis (Cox-de Boor) with derivative
# ---------------------------------------------------------------------------


@njit(cache=True)
def _bspline_jit(x, t, k, lo, hi, out, dout):
    m = t.shape[0]
    left = np.empty(k + 1)
    right = np.empty(k + 1)
    vals = np.empty(k + 1)
    prev = np.empty(k + 1)
    for p in range(x.shape[0]):
        xv = x[p]
        inside = True
        if xv < lo:
            xv = lo
            inside = False
        elif xv > hi:
            xv = hi
            inside = False
        # span j with t[j] <= xv < t[j+1], restricted to the valid range
        a = 0
        b = m
        while a < b:
            mid = (a + b) // 2
            if t[mid] <= xv:
                a = mid + 1
            else:
                b = mid
        j = a - 1
        if j < k:
            j = k
        if j > m - k - 2:
            j = m - k - 2
        vals[0] = 1.0
        for d in range(1, k + 1):
            left[d] = xv - t[j + 1 - d]
            right[d] = t[j + d] - xv
            if d == k:
                for r in range(k):
                    prev[r] = vals[r]
            saved = 0.0
            for r in range(d):
                tmp = vals[r] / (right[r + 1] + left[d - r])
                vals[r] = saved + right[r + 1] * tmp
                saved = left[d - r] * tmp
            vals[d] = saved
        for r in range(k + 1):
            out[p, j - k + r] = vals[r]
        if k > 0 and inside:
            # degree k-1 values live at indices j-k+1 .. j
            for r in range(k + 1):
                i = j - k + r
                acc = 0.0
                q = i - (j - k + 1)
                if 0 <= q < k:
                    acc += prev[q] / (t[i + k] - t[i])
                q1 = q + 1
                if 0 <= q1 < k:
                    acc -= prev[q1] / (t[i + k + 1] - t[i + 1])
                dout[p, i] = k * acc


def _bspline_numpy(x, t, k, lo, hi):
    inside = (x >= lo) & (x <= hi)
    xc = np.clip(x, lo, hi)[:, None]
    m = t.shape[0]
    j = np.searchsorted(t, xc[:, 0], side="right") - 1
    j = np.clip(j, k, m - k - 2)
    basis = np.zeros((x.shape[0], m - 1))
    basis[np.arange(x.shape[0]), j] = 1.0
    lower = basis
    for d in range(1, k + 1):
        lower = basis
        w_left = (xc - t[: m - d - 1]) / (t[d : m - 1] - t[: m - d - 1])
        w_right = (t[d + 1 :] - xc) / (t[d + 1 :] - t[1 : m - d])
        basis = w_left * lower[:, :-1] + w_right * lower[:, 1:]
    deriv = np.zeros_like(basis)
    if k > 0:
        nb = basis.shape[1]
        idx = np.arange(nb)
        deriv = k * (
            lower[:, :nb] / (t[idx + k] - t[idx]) - lower[:, 1 : nb + 1] / (t[idx + k + 1] - t[idx + 1])
        )
        deriv[~inside] = 0.0
    return basis, deriv


def bspline_basis(x: np.ndarray, knots: np.ndarray, k: int, lo: float, hi: float):
    """Evaluate all degree-``k`` basis functions and their x-derivatives.

    ``x`` is flattened; inputs outside ``[lo, hi]`` are clamped and get a zero
    derivative. Returns ``(basis, dbasis)`` of shape ``(x.size, len(knots) - k - 1)``.
    """
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    knots = np.ascontiguousarray(knots, dtype=np.float64)
    if USE_NUMBA:
        nb = knots.shape[0] - k - 1
        out = np.zeros((flat.shape[0], nb))
        dout = np.zeros((flat.shape[0], nb))
        _bspline_jit(flat, knots, k, float(lo), float(hi), out, dout)
        return out, dout
    return _bspline_numpy(flat, knots, k, lo, hi)


# ---------------------------------------------------------------------------
# unfold / fold (im2col and its adjoint)
# ---------------------------------------------------------------------------


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(f"window {k} with stride {stride}, padding {pad} does not tile size {size}")
    return span // stride + 1


@njit(cache=True)
def _unfold_jit(x, k, stride, pad, out):
    B, C, H, W = x.shape
    Ho = out.shape[4]
    Wo = out.shape[5]
    for b in range(B):
        for c in range(C):
            for p in range(k):
                for q in range(k):
                    for i in range(Ho):
                        r = i * stride + p - pad
                        if r < 0 or r >= H:
                            continue
                        for jj in range(Wo):
                            s = jj * stride + q - pad
                            if 0 <= s < W:
                                out[b, c, p, q, i, jj] = x[b, c, r, s]


@njit(cache=True)
def _fold_jit(cols, k, stride, pad, out):
    B, C, H, W = out.shape
    Ho = cols.shape[4]
    Wo = cols.shape[5]
    for b in range(B):
        for c in range(C):
            for p in range(k):
                for q in range(k):
                    for i in range(Ho):
                        r = i * stride + p - pad
                        if r < 0 or r >= H:
                            continue
                        for jj in range(Wo):
                            s = jj * stride + q - pad
                            if 0 <= s < W:
                                out[b, c, r, s] += cols[b, c, p, q, i, jj]


def _unfold_numpy(x, k, stride, pad, Ho, Wo):
    B, C, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((B, C, k, k, Ho, Wo))
    for p in range(k):
        for q in range(k):
            out[:, :, p, q] = xp[:, :, p : p + stride * Ho : stride, q : q + stride * Wo : stride]
    return out


def _fold_numpy(cols, H, W, k, stride, pad):
    B, C = cols.shape[:2]
    Ho, Wo = cols.shape[4:]
    acc = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for p in range(k):
        for q in range(k):
            acc[:, :, p : p + stride * Ho : stride, q : q + stride * Wo : stride] += cols[:, :, p, q]
    return acc[:, :, pad : pad + H, pad : pad + W]


def unfold(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """``[B,C,H,W] -> [B,C,k,k,Ho,Wo]`` with zero padding."""
    B, C, H, W = x.shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    if USE_NUMBA:
        out = np.zeros((B, C, k, k, Ho, Wo))
        _unfold_jit(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad, out)
        return out
    return _unfold_numpy(x, k, stride, pad, Ho, Wo)


def fold(cols: np.ndarray, H: int, W: int, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add windows back onto ``[B,C,H,W]``."""
    B, C = cols.shape[:2]
    if USE_NUMBA:
        out = np.zeros((B, C, H, W))
        _fold_jit(np.ascontiguousarray(cols, dtype=np.float64), k, stride, pad, out)
        return out
    return _fold_numpy(cols, H, W, k, stride, pad)
