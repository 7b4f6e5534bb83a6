"""B-spline bases and the learnable spline activation layer.

Each edge (input i -> output o) carries ``w_b[o,i] * silu(x) + w_s[o,i] * sum_m c[o,i,m] N_m(x)``
and the layer output sums the edges into each output unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .nn import Module, he_normal
from .tensor import Tensor

# spline coefficients start as small noise so the base path dominates early training
COEF_INIT_SCALE = 0.1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class SplineGrid:
    knots: np.ndarray = field(repr=False)
    k: int
    lo: float
    hi: float

    def __post_init__(self):
        t = np.asarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", t)
        n = t.shape[0] - 1
        if self.k < 0:
            raise GridError(f"spline degree must be >= 0, got {self.k}")
        if t.ndim != 1 or np.any(np.diff(t) <= 0):
            raise GridError("knots must be a strictly increasing 1-D sequence")
        if n < 2 * self.k + 1:
            raise GridError(f"need n >= 2k+1 knots intervals, got n={n}, k={self.k}")
        if not (t[self.k] <= self.lo < self.hi <= t[n - self.k]):
            raise GridError(f"range [{self.lo}, {self.hi}] outside [t_k, t_(n-k)] = [{t[self.k]}, {t[n - self.k]}]")

    @property
    def num_basis(self) -> int:
        return self.knots.shape[0] - 1 - self.k

    @classmethod
    def uniform(cls, intervals: int = 5, k: int = 3, lo: float = -1.0, hi: float = 1.0) -> "SplineGrid":
        """``intervals`` equal cells on [lo, hi], extended by ``k`` knots on each side."""
        h = (hi - lo) / intervals
        knots = lo + h * np.arange(-k, intervals + k + 1)
        return cls(knots, k, lo, hi)


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Values of every basis function at ``x`` (scalar or array); shape ``x.shape + (num_basis,)``."""
    x = np.asarray(x, dtype=np.float64)
    vals, _ = kernels.bspline_basis(x, grid.knots, grid.k, grid.lo, grid.hi)
    return vals.reshape(x.shape + (grid.num_basis,))


def bspline(x: Tensor, grid: SplineGrid) -> Tensor:
    """Differentiable basis expansion ``[...] -> [..., num_basis]``."""
    vals, dvals = kernels.bspline_basis(x.data, grid.knots, grid.k, grid.lo, grid.hi)
    shape = x.shape + (grid.num_basis,)

    def bw(g):
        return ((g.reshape(-1, grid.num_basis) * dvals).sum(axis=1).reshape(x.shape),)

    return T._make(vals.reshape(shape), (x,), bw, "bspline")


class KanLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, grid: SplineGrid | None = None):
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"KanLayer dims must be positive, got ({in_dim}, {out_dim})")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.grid = grid or SplineGrid.uniform()
        self.base_fn = T.silu
        self.w_b = he_normal(rng, (out_dim, in_dim), in_dim)
        self.w_s = he_normal(rng, (out_dim, in_dim), in_dim)
        self.coef = T.parameter(rng.normal(0.0, COEF_INIT_SCALE, size=(out_dim, in_dim, self.grid.num_basis)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.DimensionError(f"KanLayer expects last dim {self.in_dim}, got {x.shape}")
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.in_dim))
        base = T.matmul(self.base_fn(flat), T.transpose(self.w_b, (1, 0)))
        basis = T.reshape(bspline(flat, self.grid), (-1, self.in_dim * self.grid.num_basis))
        weighted = T.reshape(self.coef * T.reshape(self.w_s, (self.out_dim, self.in_dim, 1)), (self.out_dim, -1))
        out = base + T.matmul(basis, T.transpose(weighted, (1, 0)))
        return T.reshape(out, lead + (self.out_dim,))


def kan_init(in_dim: int, out_dim: int, grid: SplineGrid | None = None, seed: int = 0) -> KanLayer:
    return KanLayer(in_dim, out_dim, np.random.default_rng(seed), grid)


class KanStack(Module):
    """Consecutive KAN layers, e.g. widths ``[C, hidden, C]``."""

    def __init__(self, widths: list[int], rng: np.random.Generator, grid: SplineGrid | None = None):
        self.layers = [KanLayer(a, b, rng, grid) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
