"""The full segmentation network: encoder + decoder."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import Decoder, DecoderOutput
from .encoder import Encoder, EncoderOutput
from .nn import Module
from .rng import INIT, make_rng
from .tensor import Tensor


class HSTMRF(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = make_rng(seed, INIT)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def features(self, image: Tensor, rng: Optional[np.random.Generator] = None
                 ) -> tuple[EncoderOutput, DecoderOutput]:
        enc = self.encoder(image)
        return enc, self.decoder(enc, rng)

    def forward(self, image: Tensor, rng: Optional[np.random.Generator] = None
                ) -> tuple[Tensor, Tensor, Tensor]:
        """Return (logits, aux1, aux3), each (N, 1, H, W)."""
        _, dec = self.features(image, rng)
        return dec.logits, dec.aux1, dec.aux3

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Logits (N, 1, H, W) for a float array (N, 3, H, W) in eval mode."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                x = Tensor(np.asarray(images, dtype=self.parameters()[0].dtype))
                logits, _, _ = self.forward(x)
        finally:
            self.train(was_training)
        return logits.data

    def signature(self) -> dict[str, tuple]:
        """Parameter name -> shape, used to tell model variants apart."""
        return {name: p.shape for name, p in self.named_parameters()}
