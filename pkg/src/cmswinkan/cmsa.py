"""Multi-scale fusion: learnable stage weights, resize/unify, windowed cross-scale attention.

Two shallow maps each predict, at every location, a ``K^2 x K^2`` attention
matrix over the ``K x K`` neighbourhood. Values come from the deepest map
(two CBR blocks and a linear projection); each location's window of values is
mixed by the second matrix, then by the first, and the mixed windows are
scatter-added back onto the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import CBR, Conv2d, Linear, Module
from .swin import StageFeatures
from .tensor import DimensionError, Tensor


@dataclass
class CmsaConfig:
    K: int = 3
    s: int = 1
    scale_init: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"CDFA window must be odd and >= 1, got {self.K}")
        if self.s != 1:
            raise ValueError("only s=1 (fusion width 2C, first stage passed through) is supported")


class Cdfa(Module):
    def __init__(self, dim: int, K: int, rng: np.random.Generator):
        self.dim, self.K = dim, K
        self.attn1 = Linear(dim, K**4, rng)
        self.attn2 = Linear(dim, K**4, rng)
        self.cbr1 = CBR(dim, dim, rng)
        self.cbr2 = CBR(dim, dim, rng)
        self.value = Linear(dim, dim, rng)

    def attention_maps(self, F: Tensor, which: int) -> Tensor:
        """Row-softmaxed maps ``[B, H, W, K^2, K^2]`` (rows = output slots)."""
        layer = self.attn1 if which == 1 else self.attn2
        B, _, H, W = F.shape
        kk = self.K * self.K
        a = layer(T.transpose(F, (0, 2, 3, 1)))  # [B,H,W,K^4]
        return T.softmax(T.reshape(a, (B, H, W, kk, kk)), axis=-1)

    def values(self, F3: Tensor) -> Tensor:
        v = self.cbr2(self.cbr1(F3))
        return T.transpose(self.value(T.transpose(v, (0, 2, 3, 1))), (0, 3, 1, 2))

    def forward(self, F1: Tensor, F2: Tensor, F3: Tensor) -> Tensor:
        if not (F1.shape == F2.shape == F3.shape) or F1.ndim != 4 or F1.shape[1] != self.dim:
            raise DimensionError(f"CDFA inputs must share shape [B,{self.dim},H,W]: {F1.shape}, {F2.shape}, {F3.shape}")
        K = self.K
        H, W = F1.shape[2:]
        a1 = self.attention_maps(F1, 1)
        a2 = self.attention_maps(F2, 2)
        v_win = T.unfold_kxk(self.values(F3), K, padding=K // 2)  # [B,2C,K^2,H,W]
        v_win = T.transpose(v_win, (0, 3, 4, 2, 1))  # [B,H,W,K^2,2C]
        mixed = T.matmul(a1, T.matmul(a2, v_win))
        return T.fold_kxk(T.transpose(mixed, (0, 4, 3, 1, 2)), (H, W), K, padding=K // 2)


class Cmsa(Module):
    def __init__(self, embed_dim: int, cfg: CmsaConfig, rng: np.random.Generator):
        self.cfg = cfg
        width = 2 * embed_dim
        self.scale_weights = T.parameter(np.array(cfg.scale_init, dtype=np.float64))
        self.unify2 = Conv2d(4 * embed_dim, width, 1, rng, bias=False)
        self.unify3 = Conv2d(8 * embed_dim, width, 1, rng, bias=False)
        self.cdfa = Cdfa(width, cfg.K, rng)

    def prepare(self, sf: StageFeatures) -> tuple[Tensor, Tensor, Tensor]:
        h, w = sf.f1.shape[2:]
        i, j, k = (self.scale_weights[n] for n in range(3))
        F1 = sf.f1 * i
        F2 = self.unify2(T.bilinear_upsample(sf.f2, h, w)) * j
        F3 = self.unify3(T.bilinear_upsample(sf.f3, h, w)) * k
        return F1, F2, F3

    def forward(self, sf: StageFeatures) -> Tensor:
        return self.cdfa(*self.prepare(sf))
