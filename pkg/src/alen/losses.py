"""Training losses (L1, SSIM, weighted blend) and evaluation metrics (PSNR).

The SSIM statistics use a Gaussian-weighted window over the valid region
(no padding), computed per channel. Everything loss-side is built from
tensor-engine primitives and is differentiable; ``psnr`` is metric-only
and works on plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    c1: float = 0.01 ** 2  # for data range 1.0
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha {self.alpha} outside [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigurationError(f"ssim_window {self.ssim_window} must be odd and >= 3")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigurationError("c1 and c2 must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """2-D Gaussian weights normalized to sum 1, float64."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shapes {pred.shape} vs {target.shape}")
    return T.absolute(pred - target).mean()


def _windowed_mean(x: Tensor, win: Tensor) -> Tensor:
    return T.conv2d(x, win)


def ssim_map(pred: Tensor, target: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-site SSIM over the valid region, shape (N,C,H-k+1,W-k+1).

    Plain arrays are accepted and wrapped; pass Tensors to differentiate.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise DimensionError(f"ssim_map: shapes {pred.shape} vs {target.shape}")
    if pred.data.ndim != 4:
        raise DimensionError(f"ssim_map: expected 4-D images, got {pred.shape}")
    n, c, h, w = pred.shape
    k = cfg.ssim_window
    if h < k or w < k:
        raise DimensionError(f"ssim_map: image {h}x{w} smaller than the {k}x{k} window")
    win = Tensor(gaussian_window(k, cfg.ssim_sigma).astype(pred.dtype).reshape(1, 1, k, k))

    # fold channels into the batch so one single-channel conv serves all
    x = T.reshape(pred, (n * c, 1, h, w))
    y = T.reshape(target, (n * c, 1, h, w))
    mx = _windowed_mean(x, win)
    my = _windowed_mean(y, win)
    mxy = mx * my
    mx2 = mx * mx
    my2 = my * my
    sx = _windowed_mean(x * x, win) - mx2   # E[x^2] - E[x]^2
    sy = _windowed_mean(y * y, win) - my2
    sxy = _windowed_mean(x * y, win) - mxy
    num = (T.scale(mxy, 2.0) + cfg.c1) * (T.scale(sxy, 2.0) + cfg.c2)
    den = (mx2 + my2 + cfg.c1) * (sx + sy + cfg.c2)
    out = num / den
    ho, wo = out.shape[2], out.shape[3]
    return T.reshape(out, (n, c, ho, wo))


def ssim_metric(pred: Tensor, target: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean SSIM over map sites and channels; exactly 1 for identical inputs."""
    return ssim_map(pred, target, cfg).mean()


def combine_loss_values(l1: float, ssim: float, alpha: float) -> float:
    """The blend alpha*L1 + (1-alpha)*(1-SSIM) on plain numbers."""
    return alpha * l1 + (1.0 - alpha) * (1.0 - ssim)


def combined_loss(pred: Tensor, target: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha-weighted L1 plus (1-alpha)-weighted SSIM distance, a scalar tensor."""
    l1 = l1_loss(pred, target)
    s = ssim_metric(pred, target, cfg)
    one = Tensor(np.asarray(1.0, dtype=s.dtype))
    return T.scale(l1, cfg.alpha) + T.scale(one - s, 1.0 - cfg.alpha)


def psnr(pred, target, data_range: float = 1.0) -> float:
    """10*log10(range^2/MSE) in dB; +inf when the images are identical."""
    a = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    b = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)
