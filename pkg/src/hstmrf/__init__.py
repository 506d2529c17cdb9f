"""Dual-receptive-field transformer segmentation on a small numpy autodiff engine."""

from .config import ABLATION_STATES, ConfigError, LossWeights, ModelConfig, RunConfig, TrainConfig, load_config
from .data import SegSample, gen_synthetic, load_dataset, read_pnm, write_pnm
from .losses import total_loss
from .metrics import EvalResult, evaluate
from .model import HSTMRF
from .tensor import NonFiniteError, ShapeError, Tensor
from .train import Trainer, train

__version__ = "0.1.0"

__all__ = [
    "ABLATION_STATES", "ConfigError", "EvalResult", "HSTMRF", "LossWeights", "ModelConfig", "NonFiniteError",
    "RunConfig", "SegSample", "ShapeError", "Tensor", "TrainConfig", "Trainer", "evaluate", "gen_synthetic",
    "load_config", "load_dataset", "read_pnm", "total_loss", "train", "write_pnm",
]
