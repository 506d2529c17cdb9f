"""Decoder: bilinear-pooling fusion, soft channel attention and prediction heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import EncoderOutput
from .nn import Conv2d, ConvBNReLU, Dropout, Linear, Module
from .tensor import ShapeError, Tensor

# Prediction-head biases start at logit(0.1) so that background pixels are
# predicted negative from step 0; without it the heads spend most of a short
# schedule drifting their offset.
FOREGROUND_PRIOR = 0.1
PRIOR_LOGIT = float(np.log(FOREGROUND_PRIOR / (1.0 - FOREGROUND_PRIOR)))


class Convs(Module):
    """(Conv3x3 - BN - ReLU) x 2; the first conv does the channel reduction."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvBNReLU(cin, cout, 3, rng, padding=1)
        self.conv2 = ConvBNReLU(cout, cout, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class MBP(Module):
    """Fuses the two encoder branches of one stage with the previous decoder output.

    ``mode``: ``bilinear`` (Hadamard product of the branches), ``skip``
    (plain concatenation of both branches) or ``single`` (branch 1 only).
    """

    def __init__(self, ch: int, prev_ch: int, rng: np.random.Generator, mode: str = "bilinear"):
        super().__init__()
        if mode not in ("bilinear", "skip", "single"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        enc_ch = 2 * ch if mode == "skip" else ch
        self.convs = Convs(enc_ch + prev_ch, ch, rng)

    def fuse(self, branches: list[Tensor]) -> Tensor:
        if self.mode == "bilinear":
            x1, x2 = branches
            if x1.shape != x2.shape:
                raise ShapeError(f"branch maps differ: {x1.shape} vs {x2.shape}")
            return x1 * x2
        if self.mode == "skip":
            return T.concat(branches, axis=1)
        return branches[0]

    def forward(self, branches: list[Tensor], prev: Optional[Tensor] = None) -> Tensor:
        x = self.fuse(branches)
        if prev is not None:
            up = T.upsample2x(prev)
            if up.shape[2:] != x.shape[2:]:
                raise ShapeError(f"upsampled decoder map {up.shape} does not match encoder map {x.shape}")
            x = T.concat([x, up], axis=1)
        return self.convs(x)


class SoftChannelAttention(Module):
    """beta = sigmoid(MLP(SoftPool(D))); Y = D + beta * D.

    With ``pooling='maxavg'`` the descriptor is the shared MLP applied to
    the global max and global average, summed before the sigmoid.
    """

    def __init__(self, ch: int, dropout_p: float, rng: np.random.Generator, pooling: str = "soft"):
        super().__init__()
        if ch < 2:
            raise ShapeError(f"channel attention needs at least 2 channels, got {ch}")
        if pooling not in ("soft", "maxavg"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        self.fc1 = Linear(ch, ch // 2, rng)
        self.drop = Dropout(dropout_p)
        self.fc2 = Linear(ch // 2, ch, rng)

    def mlp(self, v: Tensor, rng) -> Tensor:
        return self.fc2(self.drop(T.gelu(self.fc1(v)), rng))

    def weights(self, d: Tensor, rng=None) -> Tensor:
        n, c, h, w = d.shape
        if self.pooling == "soft":
            logits = self.mlp(T.global_softpool(d), rng)
        else:
            flat = T.reshape(d, (n, c, h * w))
            logits = self.mlp(T.amax(flat, axis=-1), rng) + self.mlp(T.mean(flat, axis=-1), rng)
        return T.sigmoid(logits)

    def forward(self, d: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        beta = self.weights(d, rng)
        n, c = beta.shape
        return d + T.reshape(beta, (n, c, 1, 1)) * d, beta


class DeepHead(Module):
    """1x1 conv to one channel, then bilinear upsampling to the input resolution."""

    def __init__(self, ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(ch, 1, 1, rng)
        self.conv.bias.data[...] = PRIOR_LOGIT

    def forward(self, y: Tensor, size: tuple[int, int]) -> Tensor:
        return T.resize_bilinear(self.conv(y), size)


@dataclass
class DecoderOutput:
    logits: Tensor
    aux1: Tensor
    aux3: Tensor
    d: list[Tensor] = field(default_factory=list)
    y: list[Tensor] = field(default_factory=list)
    beta: list[Optional[Tensor]] = field(default_factory=list)


def expected_decoder_shapes(C: int, H: int, W: int) -> list[tuple]:
    return [(C * 2 ** (5 - t), H // 2 ** (5 - t), W // 2 ** (5 - t)) for t in range(1, 6)]


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        C = cfg.C
        mode = "single" if cfg.one_rf else ("skip" if cfg.no_mbp else "bilinear")
        # stage t consumes encoder stage 6 - t with C * 2^(5 - t) channels
        chans = [C * 2 ** (5 - t) for t in range(1, 6)]
        fusion = [MBP(ch, 0 if t == 0 else 2 * ch, rng, mode) for t, ch in enumerate(chans)]
        if mode == "skip":
            self.skip = fusion
        else:
            self.mbp = fusion
        if cfg.maxavg_ca:
            self.maxavg_ca = [SoftChannelAttention(ch, cfg.dropout_p, rng, "maxavg") for ch in chans]
        elif not cfg.no_sca:
            self.sca = [SoftChannelAttention(ch, cfg.dropout_p, rng, "soft") for ch in chans]
        self.head = Conv2d(C, 1, 3, rng, padding=1)
        self.head.bias.data[...] = PRIOR_LOGIT
        self.aux_head1 = DeepHead(chans[0], rng)
        self.aux_head3 = DeepHead(chans[2], rng)

    @property
    def fusion(self) -> list[MBP]:
        return self.skip if hasattr(self, "skip") else self.mbp

    @property
    def attention(self) -> Optional[list[SoftChannelAttention]]:
        return getattr(self, "maxavg_ca", None) or getattr(self, "sca", None)

    def forward(self, enc: EncoderOutput, rng: Optional[np.random.Generator] = None) -> DecoderOutput:
        size = tuple(enc.maps[0][0].shape[2:])
        out = DecoderOutput(None, None, None)
        prev = None
        attention = self.attention
        for t in range(1, 6):
            try:
                d = self.fusion[t - 1](enc.stage(6 - t), prev)
                if attention is not None:
                    y, beta = attention[t - 1](d, rng)
                else:
                    y, beta = d, None
            except ShapeError as exc:
                raise ShapeError(f"decoder stage {t}: {exc}") from exc
            out.d.append(d)
            out.y.append(y)
            out.beta.append(beta)
            prev = y
        out.logits = self.head(prev)
        out.aux1 = self.aux_head1(out.y[0], size)
        out.aux3 = self.aux_head3(out.y[2], size)
        return out
