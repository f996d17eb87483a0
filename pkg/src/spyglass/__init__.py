"""Hybrid spatial-spectral detector for AI-generated images."""

from .autodiff import Tape, Tensor, backward
from .augment import AugmentPolicy, augment, policy_from_name
from .data import (
    GeneratorConfig,
    ImageRecord,
    decode_image,
    generate_synthetic,
    load_manifest,
    split_dataset,
    write_manifest,
)
from .evaluation import EvalReport, evaluate, export_embeddings, separation_score
from .model import DetectorModel, EncoderConfig, forward, fuse, predict
from .spectral import Spectrum, fft2, magnitude_spectrum, spectral_input, to_grayscale
from .training import (
    AdamState,
    TrainConfig,
    TrainHistory,
    adam_step,
    bce_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
