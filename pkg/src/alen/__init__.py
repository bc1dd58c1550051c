"""Attention-guided enhancement of low-light camera raws.

The package is a self-contained numpy implementation: a small reverse-mode
autodiff engine (:mod:`alen.tensor`), attention blocks (:mod:`alen.blocks`),
the U-shaped network (:mod:`alen.network`), losses and metrics
(:mod:`alen.losses`), Bayer-domain data handling (:mod:`alen.rawdata`),
training/evaluation (:mod:`alen.training`), gradient verification
(:mod:`alen.gradcheck`), a scikit-learn style wrapper
(:mod:`alen.estimator`), and a command line front end (:mod:`alen.cli`).
"""

from .errors import (ConfigurationError, DataError, DimensionError,
                     NonFiniteLossError, UsageError)
from .estimator import LowLightEnhancer
from .gradcheck import CheckResult, check_names, finite_diff_check, run_checks
from .losses import LossConfig, combined_loss, l1_loss, psnr, ssim_map, ssim_metric
from .network import (ModelConfig, ModelWeights, build, enhance, forward,
                      load_model_config, preprocess_raw)
from .rawdata import (NoiseModel, Pair, RawFrame, augment, load_dataset,
                      load_raw, load_rgb, mosaic_rgb, normalize_mosaic,
                      pack_bayer, procedural_rgb, save_raw, save_rgb,
                      synth_lowlight, unpack_bayer, write_dataset)
from .tensor import Tensor, grad_enabled, no_grad
from .training import (AdamState, Checkpoint, MetricsReport, TrainConfig,
                       TrainResult, adam_step, evaluate, format_report,
                       load_checkpoint, lr_at, model_predictor, restore,
                       save_checkpoint, snapshot, train, write_history_csv,
                       write_metrics_csv)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Checkpoint", "CheckResult", "ConfigurationError",
    "DataError", "DimensionError", "LossConfig", "LowLightEnhancer",
    "MetricsReport", "ModelConfig", "ModelWeights", "NoiseModel",
    "NonFiniteLossError", "Pair", "RawFrame", "Tensor", "TrainConfig",
    "TrainResult", "UsageError", "adam_step", "augment", "build",
    "check_names", "combined_loss", "enhance", "evaluate",
    "finite_diff_check", "format_report", "forward", "grad_enabled",
    "l1_loss", "load_checkpoint", "load_dataset", "load_model_config", "load_raw",
    "load_rgb", "lr_at", "model_predictor", "mosaic_rgb", "no_grad",
    "normalize_mosaic", "pack_bayer", "preprocess_raw", "procedural_rgb",
    "psnr", "restore", "run_checks", "save_checkpoint", "save_raw",
    "save_rgb", "snapshot", "ssim_map", "ssim_metric", "synth_lowlight",
    "train", "unpack_bayer", "write_dataset", "write_history_csv",
    "write_metrics_csv",
]
