"""Dual-receptive-field encoder: dilated stem, strided downsampling, adaptive
patch embedding and heterogeneous Swin transformer stages.

Token grids are kept as (B, H, W, C) between blocks and converted to
(B, C, H, W) feature maps at stage boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import ConvBNReLU, LayerNorm, Linear, Mlp, Module, Parameter
from .rng import trunc_normal
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9


# ------------------------------------------------------------- windows
def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * nW, window * window, C), windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"window {window} does not divide grid {h}x{w}")
    t = T.reshape(x, (b, h // window, window, w // window, window, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b * (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    nw = (h // window) * (w // window)
    b = windows.shape[0] // nw
    c = windows.shape[-1]
    t = T.reshape(windows, (b, h // window, w // window, window, window, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b, h, w, c))


def shift_size(grid: int, window: int) -> int:
    # a single window already sees the whole grid
    return 0 if grid <= window else window // 2


@lru_cache(maxsize=None)
def shifted_window_mask(h: int, w: int, window: int, shift: int) -> Optional[np.ndarray]:
    """Additive (nW, n, n) mask keeping wrapped-around regions apart after a cyclic shift."""
    if shift == 0:
        return None
    label = np.zeros((h, w))
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for hs in cuts:
        for ws in cuts:
            label[hs, ws] = cnt
            cnt += 1
    lab = label.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    lab = lab.reshape(-1, window * window)
    diff = lab[:, None, :] - lab[:, :, None]
    mask = np.where(diff != 0, MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def _add_mask(scores: Tensor, mask: Optional[np.ndarray], bias: Optional[Tensor]) -> Tensor:
    # scores: (B * nW, heads, n, n)
    if bias is not None:
        scores = scores + bias
    if mask is None:
        return scores
    bw, heads, n, _ = scores.shape
    nw = mask.shape[0]
    s = T.reshape(scores, (bw // nw, nw, heads, n, n))
    s = s + Tensor(mask[None, :, None].astype(scores.dtype))
    return T.reshape(s, (bw, heads, n, n))


# ---------------------------------------------------------- attention
def heterogeneous_attention(q1: Tensor, k1: Tensor, v1: Tensor, q2: Tensor, k2: Tensor, v2: Tensor,
                            mask: Optional[np.ndarray] = None, bias: Optional[Tensor] = None,
                            return_weights: bool = False):
    """Attention whose scores sum both branches' query-key products.

    Inputs are (..., n, dk).  Scores are
    ``(q1 k1^T + q2 k2^T) / sqrt(2 dk)``; one softmax over keys yields the
    weights applied to both value streams.  Returns ``(z1, z2)`` or
    ``(z1, z2, (w1, w2))`` where ``w1``/``w2`` are the weights used for each
    branch's values.
    """
    if q1.shape[-2] != q2.shape[-2] or k1.shape[-2] != k2.shape[-2]:
        raise ShapeError(f"branch sequence lengths differ: {q1.shape} vs {q2.shape}")
    dk = q1.shape[-1]
    scores = T.matmul(q1, T.swapaxes(k1, -1, -2)) + T.matmul(q2, T.swapaxes(k2, -1, -2))
    scores = T.scale(scores, 1.0 / math.sqrt(2 * dk))
    if mask is not None or bias is not None:
        scores = _add_mask(scores, mask, bias)
    weights = T.softmax(scores, axis=-1)
    z1 = T.matmul(weights, v1)
    z2 = T.matmul(weights, v2)
    if return_weights:
        return z1, z2, (weights, weights)
    return z1, z2


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None,
                         bias: Optional[Tensor] = None) -> Tensor:
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None or bias is not None:
        scores = _add_mask(scores, mask, bias)
    return T.matmul(T.softmax(scores, axis=-1), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class RelativePositionBias(Module):
    """Learned per-head bias indexed by relative offset inside a window."""

    def __init__(self, window: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
        rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (window - 1)
        self._index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self._n = window * window
        self._heads = heads

    def forward(self) -> Tensor:
        b = T.getitem(self.table, self._index.reshape(-1))
        return T.transpose(T.reshape(b, (self._n, self._n, self._heads)), (2, 0, 1))


class HeteroWindowAttention(Module):
    """Multi-head heterogeneous attention over aligned window pairs.

    Branch 1 uses projections q1/k1/v1 (W), branch 2 uses q2/k2/v2 (U); the
    output projection is block-diagonal (proj1, proj2).
    """

    def __init__(self, dim: int, hidden: int, heads: int, rng: np.random.Generator,
                 window: int, pos_bias: bool = False):
        super().__init__()
        self.heads = heads
        self.q1 = Linear(dim, hidden, rng)
        self.k1 = Linear(dim, hidden, rng)
        self.v1 = Linear(dim, hidden, rng)
        self.q2 = Linear(dim, hidden, rng)
        self.k2 = Linear(dim, hidden, rng)
        self.v2 = Linear(dim, hidden, rng)
        self.proj1 = Linear(hidden, dim, rng)
        self.proj2 = Linear(hidden, dim, rng)
        self.pos_bias = RelativePositionBias(window, heads, rng) if pos_bias else None

    def forward(self, x1: Tensor, x2: Tensor, mask: Optional[np.ndarray] = None):
        h = self.heads
        bias = self.pos_bias() if self.pos_bias is not None else None
        z1, z2 = heterogeneous_attention(
            _split_heads(self.q1(x1), h), _split_heads(self.k1(x1), h), _split_heads(self.v1(x1), h),
            _split_heads(self.q2(x2), h), _split_heads(self.k2(x2), h), _split_heads(self.v2(x2), h),
            mask=mask, bias=bias)
        return self.proj1(_merge_heads(z1)), self.proj2(_merge_heads(z2))


class WindowAttention(Module):
    """Standard single-branch window multi-head self-attention."""

    def __init__(self, dim: int, hidden: int, heads: int, rng: np.random.Generator,
                 window: int, pos_bias: bool = False):
        super().__init__()
        self.heads = heads
        self.q = Linear(dim, hidden, rng)
        self.k = Linear(dim, hidden, rng)
        self.v = Linear(dim, hidden, rng)
        self.proj = Linear(hidden, dim, rng)
        self.pos_bias = RelativePositionBias(window, heads, rng) if pos_bias else None

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        h = self.heads
        bias = self.pos_bias() if self.pos_bias is not None else None
        z = scaled_dot_attention(_split_heads(self.q(x), h), _split_heads(self.k(x), h),
                                 _split_heads(self.v(x), h), mask=mask, bias=bias)
        return self.proj(_merge_heads(z))


def windowed(attn, xs: Sequence[Tensor], window: int, shift: int) -> list[Tensor]:
    """Run ``attn`` over (shifted) windows of each branch grid and undo the partition.

    ``attn`` takes one windowed tensor per branch plus the mask and returns
    the same number of tensors.  This is W-HMSA when ``shift == 0`` and
    SW-HMSA otherwise.
    """
    b, h, w, c = xs[0].shape
    if h % window or w % window:
        raise ShapeError(f"window {window} does not divide grid {h}x{w}")
    if shift:
        xs = [T.roll(x, (-shift, -shift), (1, 2)) for x in xs]
    wins = [window_partition(x, window) for x in xs]
    outs = attn(*wins, mask=shifted_window_mask(h, w, window, shift))
    if isinstance(outs, Tensor):
        outs = (outs,)
    outs = [window_reverse(o, window, h, w) for o in outs]
    if shift:
        outs = [T.roll(o, (shift, shift), (1, 2)) for o in outs]
    return outs


def w_hmsa(attn: HeteroWindowAttention, x1: Tensor, x2: Tensor, window: int,
           shifted: bool = False) -> tuple[Tensor, Tensor]:
    shift = shift_size(min(x1.shape[1], x1.shape[2]), window) if shifted else 0
    o1, o2 = windowed(attn, (x1, x2), window, shift)
    return o1, o2


# -------------------------------------------------------------- blocks
class HSTBlock(Module):
    """Pre-norm transformer block over one or two branch grids.

    ``mode`` selects the attention: ``hetero`` (shared scores across the
    two branches), ``independent`` (one standard attention per branch) or
    ``single`` (one branch only).
    """

    def __init__(self, dim: int, cfg: ModelConfig, shifted: bool, rng: np.random.Generator,
                 mode: str = "hetero"):
        super().__init__()
        if mode not in ("hetero", "independent", "single"):
            raise ValueError(f"unknown block mode {mode!r}")
        self.mode = mode
        self.shifted = shifted
        self.window = cfg.window
        nb = 1 if mode == "single" else 2
        self.norm1 = [LayerNorm(dim) for _ in range(nb)]
        if mode == "hetero":
            self.attn = HeteroWindowAttention(dim, cfg.d, cfg.n_heads, rng, cfg.window,
                                              cfg.relative_position_bias)
        elif mode == "independent":
            self.attn = [WindowAttention(dim, cfg.d, cfg.n_heads, rng, cfg.window,
                                         cfg.relative_position_bias) for _ in range(nb)]
        else:
            self.attn = WindowAttention(dim, cfg.d, cfg.n_heads, rng, cfg.window,
                                        cfg.relative_position_bias)
        self.norm2 = [LayerNorm(dim) for _ in range(nb)]
        self.mlp = [Mlp(dim, cfg.mlp_ratio * dim, rng) for _ in range(nb)]

    def attend(self, xs: list[Tensor]) -> list[Tensor]:
        h, w = xs[0].shape[1:3]
        shift = shift_size(min(h, w), self.window) if self.shifted else 0
        if self.mode == "independent":
            return [windowed(a, (x,), self.window, shift)[0] for a, x in zip(self.attn, xs)]
        return windowed(self.attn, xs, self.window, shift)

    def forward(self, xs: list[Tensor]) -> list[Tensor]:
        if len(xs) != len(self.norm1):
            raise ShapeError(f"block expects {len(self.norm1)} branch grids, got {len(xs)}")
        normed = [n(x) for n, x in zip(self.norm1, xs)]
        xs = [x + a for x, a in zip(xs, self.attend(normed))]
        return [x + m(n(x)) for x, n, m in zip(xs, self.norm2, self.mlp)]


class AdaptivePatchEmbed(Module):
    """Per-channel SoftPool over 2x2 patches followed by a linear layer.

    With ``flatten=True`` the patch is flattened instead (the plain
    flatten-and-project embedding).
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, patch: int = 2,
                 flatten: bool = False):
        super().__init__()
        self.patch = patch
        self.flatten = flatten
        self.fc = Linear(cin * patch * patch if flatten else cin, cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        s = self.patch
        if h % s or w % s:
            raise ShapeError(f"patch size {s} does not divide {h}x{w}")
        t = T.reshape(x, (b, c, h // s, s, w // s, s))
        t = T.transpose(t, (0, 2, 4, 1, 3, 5))  # B, Hp, Wp, C, s, s
        if self.flatten:
            vec = T.reshape(t, (b, h // s, w // s, c * s * s))
        else:
            vec = T.softpool(T.reshape(t, (b, h // s, w // s, c, s * s)), axis=-1)
        return self.fc(vec)


class PatchMerging(Module):
    """Concatenate 2x2 neighborhoods (4C) -> LayerNorm -> linear to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even grid sides, got {h}x{w}")
        return self.reduction(self.norm(merge_neighbourhoods(x)))


def merge_neighbourhoods(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 4C) with order (0,0), (1,0), (0,1), (1,1)."""
    b, h, w, c = x.shape
    t = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    t = T.transpose(t, (0, 1, 3, 4, 2, 5))
    return T.reshape(t, (b, h // 2, w // 2, 4 * c))


def grid_to_map(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


def map_to_grid(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


# ------------------------------------------------------------- encoder
@dataclass
class EncoderOutput:
    """Stage maps per branch: ``maps[r][m]`` is X^{r+1}_{m+1} as (B, C, H, W)."""

    maps: list[list[Tensor]]

    @property
    def branches(self) -> int:
        return len(self.maps)

    def stage(self, m: int) -> list[Tensor]:
        """All branch maps of 1-based stage ``m``."""
        return [branch[m - 1] for branch in self.maps]

    def shapes(self) -> list[list[tuple]]:
        return [[tuple(t.shape[1:]) for t in branch] for branch in self.maps]


def expected_encoder_shapes(C: int, H: int, W: int) -> list[tuple]:
    return [(C * 2 ** m, H // 2 ** m, W // 2 ** m) for m in range(5)]


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        C = cfg.C
        nb = 1 if cfg.one_rf else 2
        mode = "single" if cfg.one_rf else ("independent" if cfg.no_hst else "hetero")
        self.stem = [ConvBNReLU(3, C, 3, rng, dilation=r, padding=r) for r in range(1, nb + 1)]
        self.down = [ConvBNReLU(C, 2 * C, 2, rng, stride=2) for _ in range(nb)]
        self.embed = [AdaptivePatchEmbed(2 * C, 4 * C, rng, cfg.patch_size, flatten=cfg.no_ape)
                      for _ in range(nb)]
        self.stage3 = self._blocks(4 * C, cfg.blocks_per_stage[0], rng, mode)
        self.merge4 = [PatchMerging(4 * C, rng) for _ in range(nb)]
        self.stage4 = self._blocks(8 * C, cfg.blocks_per_stage[1], rng, mode)
        self.merge5 = [PatchMerging(8 * C, rng) for _ in range(nb)]
        self.stage5 = self._blocks(16 * C, cfg.blocks_per_stage[2], rng, mode)

    def _blocks(self, dim, count, rng, mode):
        # alternating W / SW blocks
        return [HSTBlock(dim, self.cfg, shifted=bool(i % 2), rng=rng, mode=mode) for i in range(count)]

    def forward(self, image: Tensor) -> EncoderOutput:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"encoder expects (N, 3, H, W), got {image.shape}")
        self.cfg.check_input(*image.shape[2:])
        maps: list[list[Tensor]] = [[] for _ in self.stem]
        stage = 1
        try:
            xs = [conv(image) for conv in self.stem]
            for r, x in enumerate(xs):
                maps[r].append(x)
            stage = 2
            xs = [down(x) for down, x in zip(self.down, xs)]
            for r, x in enumerate(xs):
                maps[r].append(x)
            stage = 3
            grids = [emb(x) for emb, x in zip(self.embed, xs)]
            grids = self._run(self.stage3, grids, maps)
            stage = 4
            grids = self._run(self.stage4, [m(g) for m, g in zip(self.merge4, grids)], maps)
            stage = 5
            self._run(self.stage5, [m(g) for m, g in zip(self.merge5, grids)], maps)
        except ShapeError as exc:
            raise ShapeError(f"encoder stage {stage}: {exc}") from exc
        return EncoderOutput(maps)

    @staticmethod
    def _run(blocks, grids, maps):
        for blk in blocks:
            grids = blk(grids)
        for r, g in enumerate(grids):
            maps[r].append(grid_to_map(g))
        return grids
