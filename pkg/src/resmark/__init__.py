"""Invisible image watermarking with a reusable RGB residual.

Train an encoder/decoder/discriminator in two stages, generalize the
watermark into a single message-specific residual, stamp image streams at
high throughput, and evaluate robustness under an 18-distortion suite.
"""

from .core import (
    Checkpoint,
    Corpus,
    load_checkpoint,
    load_image,
    quantize_roundtrip,
    random_message,
    save_checkpoint,
    save_image,
)
from .embedder import ResidualWatermark, extract, make_residual, stamp
from .evaluation import EvalReport, bit_accuracy, evaluate_robustness, psnr
from .models import ArchConfig, ModelBundle, decode, encode, init_model
from .training import TrainConfig, run_training

__all__ = [
    "ArchConfig",
    "Checkpoint",
    "Corpus",
    "EvalReport",
    "bit_accuracy",
    "evaluate_robustness",
    "psnr",
    "ModelBundle",
    "ResidualWatermark",
    "TrainConfig",
    "decode",
    "encode",
    "extract",
    "init_model",
    "load_checkpoint",
    "load_image",
    "make_residual",
    "quantize_roundtrip",
    "random_message",
    "run_training",
    "save_checkpoint",
    "save_image",
    "stamp",
]

__version__ = "0.1.0"
