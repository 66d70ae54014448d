"""vilaco: weakly supervised image forgery localization.

Trains a dual-branch vision-language model from image-level real/fake
labels alone and predicts pixel-level tamper masks at inference time.
"""

__version__ = "0.1.0"

from .config import Config, load_config, save_config
from .data import EvalSample, TrainSample, generate_corpus, load_dataset
from .errors import (CheckpointError, ConfigError, DataError, InputError,
                     NumericalError, VilacoError)
from .metrics import combined_f1, evaluate, image_f1, iou, pixel_f1
from .model import ForgeryLocalizer, build_model
from .trainer import Trainer, lambda_ccs, restore_trainer

__all__ = [
    "__version__",
    "Config", "load_config", "save_config",
    "TrainSample", "EvalSample", "generate_corpus", "load_dataset",
    "VilacoError", "ConfigError", "InputError", "DataError",
    "CheckpointError", "NumericalError",
    "pixel_f1", "image_f1", "combined_f1", "iou", "evaluate",
    "ForgeryLocalizer", "build_model",
    "Trainer", "lambda_ccs", "restore_trainer",
]
