"""Hierarchical windowed-attention backbone whose feed-forward layers are KANs.

Internally token maps are channels-last ``[B, H, W, C]``; the stage features
handed to the fusion module are channels-first ``[B, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .kan import KanStack, SplineGrid
from .nn import LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor

MASK_VALUE = -1e4


@dataclass
class BackboneConfig:
    embed_dim: int = 24
    depths: tuple[int, ...] = (2, 2, 8, 2)
    num_heads: tuple[int, ...] = (4, 8, 16, 32)
    window_size: int = 7
    img_size: int = 224
    patch_size: int = 4
    kan_hidden: int = 16
    grid_intervals: int = 5
    spline_order: int = 3
    rel_pos_bias: bool = True

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.num_heads = tuple(self.num_heads)
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("backbone has exactly four stages")
        if self.img_size % (self.patch_size * 8):
            raise DimensionError(f"input size {self.img_size} not divisible by {self.patch_size * 8}")
        for i, heads in enumerate(self.num_heads):
            width = self.embed_dim * 2**i
            if width % heads:
                raise ValueError(f"stage {i}: {heads} heads do not divide width {width}")
            res = self.stage_resolution(i)
            if res % effective_window(res, self.window_size):
                raise DimensionError(f"stage {i}: window {self.window_size} does not divide resolution {res}")

    def stage_resolution(self, i: int) -> int:
        return self.img_size // self.patch_size // 2**i

    def grid(self) -> SplineGrid:
        return SplineGrid.uniform(self.grid_intervals, self.spline_order)


def effective_window(resolution: int, window: int) -> int:
    """Windows never exceed the map; a map that fits in one window is not shifted."""
    return min(resolution, window)


@dataclass
class StageFeatures:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    extras: dict = field(default_factory=dict)


def channels_first(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


def channels_last(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


class PatchEmbed(Module):
    """Non-overlapping p x p patches (3*p*p features each), linear projection, LayerNorm."""

    def __init__(self, embed_dim: int, rng: np.random.Generator, patch_size: int = 4, in_ch: int = 3):
        self.p = patch_size
        self.in_ch = in_ch
        self.proj = Linear(in_ch * patch_size * patch_size, embed_dim, rng)
        self.norm = LayerNorm(embed_dim)

    def forward(self, img: Tensor) -> Tensor:
        B, C, H, W = img.shape
        p = self.p
        if C != self.in_ch or H % p or W % p:
            raise DimensionError(f"image {img.shape} not divisible into {p}x{p} patches of {self.in_ch} channels")
        t = T.reshape(img, (B, C, H // p, p, W // p, p))
        t = T.transpose(t, (0, 2, 4, 1, 3, 5))
        t = T.reshape(t, (B, H // p, W // p, C * p * p))
        return self.norm(self.proj(t))


def relative_position_index(m: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (m - 1)
    return rel[..., 0] * (2 * m - 1) + rel[..., 1]


def shift_attention_mask(H: int, W: int, m: int, s: int) -> np.ndarray:
    """``[nW, m*m, m*m]`` additive mask: 0 within a pre-shift region, MASK_VALUE across."""
    region = np.zeros((H, W))
    cnt = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            region[hs, ws] = cnt
            cnt += 1
    wins = region.reshape(H // m, m, W // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = wins[:, :, None] - wins[:, None, :]
    return np.where(diff != 0, MASK_VALUE, 0.0)


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator, rel_pos_bias: bool = True):
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide {dim}")
        self.dim, self.heads, self.window = dim, heads, window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.bias_table = (
            T.parameter(rng.normal(0.0, 0.02, size=((2 * window - 1) ** 2, heads))) if rel_pos_bias else None
        )
        self._rel_index = relative_position_index(window)

    def position_bias(self) -> Tensor | None:
        if self.bias_table is None:
            return None
        n = self.window**2
        b = T.getitem(self.bias_table, self._rel_index.reshape(-1))
        return T.transpose(T.reshape(b, (n, n, self.heads)), (2, 0, 1))

    def attention_weights(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Attention probabilities ``[nWB, heads, N, N]`` for windows ``[nWB, N, C]``."""
        q, k, _ = self._qkv(windows)
        return self._softmax(q, k, mask)

    def _qkv(self, windows: Tensor):
        nwb, n, c = windows.shape
        d = c // self.heads
        qkv = T.transpose(T.reshape(self.qkv(windows), (nwb, n, 3, self.heads, d)), (2, 0, 3, 1, 4))
        return qkv[0], qkv[1], qkv[2]

    def _softmax(self, q: Tensor, k: Tensor, mask: np.ndarray | None) -> Tensor:
        logits = T.matmul(q * self.scale, T.transpose(k, (0, 1, 3, 2)))
        bias = self.position_bias()
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            nw, n = mask.shape[0], mask.shape[1]
            logits = T.reshape(logits, (-1, nw, self.heads, n, n)) + mask[None, :, None]
            logits = T.reshape(logits, (-1, self.heads, n, n))
        return T.softmax(logits, axis=-1)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        nwb, n, c = windows.shape
        q, k, v = self._qkv(windows)
        attn = self._softmax(q, k, mask)
        out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (nwb, n, c))
        return self.proj(out)


class SwinKanBlock(Module):
    """Pre-norm residual block: ``x + (S)W-MSA(LN(x))`` then ``y + KAN(LN(y))``."""

    def __init__(
        self,
        dim: int,
        heads: int,
        resolution: int,
        window: int,
        shifted: bool,
        rng: np.random.Generator,
        kan_hidden: int = 16,
        grid: SplineGrid | None = None,
        rel_pos_bias: bool = True,
    ):
        self.resolution = resolution
        self.window = effective_window(resolution, window)
        self.shift = self.window // 2 if shifted and resolution > window else 0
        if resolution % self.window:
            raise DimensionError(f"window {self.window} does not divide resolution {resolution}")
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, self.window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.kan = KanStack([dim, kan_hidden, dim], rng, grid)
        self.mask = shift_attention_mask(resolution, resolution, self.window, self.shift) if self.shift else None

    def attend(self, x: Tensor) -> Tensor:
        """The (shifted-)window attention branch alone, on ``[B,H,W,C]``."""
        B, H, W, C = x.shape
        if H % self.window or W % self.window:
            raise DimensionError(f"window {self.window} does not divide spatial size {(H, W)}")
        if (H, W) != (self.resolution, self.resolution):
            raise DimensionError(f"block built for {self.resolution}x{self.resolution}, got {(H, W)}")
        s = self.shift
        if s:
            x = T.cyclic_shift(x, (-s, -s))
        y = self.attn(T.window_partition(x, self.window), self.mask)
        y = T.window_reverse(y, self.window, H, W)
        if s:
            y = T.cyclic_shift(y, (s, s))
        return y

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attend(self.norm1(x))
        return x + self.kan(self.norm2(x))


class PatchMerge(Module):
    """2x2 neighbourhood concat (4c) -> LayerNorm -> linear 4c -> 2c."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def gather(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise DimensionError(f"patch merging needs even spatial dims, got {(H, W)}")
        t = T.reshape(x, (B, H // 2, 2, W // 2, 2, C))
        t = T.transpose(t, (0, 1, 3, 4, 2, 5))
        return T.reshape(t, (B, H // 2, W // 2, 4 * C))

    def forward(self, x: Tensor) -> Tensor:
        return self.reduction(self.norm(self.gather(x)))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        grid = cfg.grid()
        C = cfg.embed_dim
        self.patch_embed = PatchEmbed(C, rng, cfg.patch_size)
        self.stages: list[list[SwinKanBlock]] = []
        blocks, merges = [], []
        for i, depth in enumerate(cfg.depths):
            dim = C * 2**i
            res = cfg.stage_resolution(i)
            stage = [
                SwinKanBlock(
                    dim, cfg.num_heads[i], res, cfg.window_size, b % 2 == 1, rng, cfg.kan_hidden, grid, cfg.rel_pos_bias
                )
                for b in range(depth)
            ]
            blocks.extend(stage)
            self.stages.append(stage)
            if i < 3:
                merges.append(PatchMerge(dim, rng))
        self.blocks = blocks
        self.merges = merges
        self.norm = LayerNorm(C * 8)

    def forward(self, img: Tensor) -> StageFeatures:
        if img.ndim == 3:
            img = T.reshape(img, (1,) + img.shape)
        if img.shape[2:] != (self.cfg.img_size, self.cfg.img_size):
            raise DimensionError(f"backbone configured for {self.cfg.img_size}px input, got {img.shape}")
        x = self.patch_embed(img)
        captured = []
        for i, stage in enumerate(self.stages):
            for block in stage:
                x = block(x)
            if i < 3:
                x = self.merges[i](x)
                captured.append(channels_first(x))
        f4 = channels_first(self.norm(x))
        return StageFeatures(captured[0], captured[1], captured[2], f4)
