"""Scikit-learn style front end: fit on raw/reference pairs, predict RGB.

X is a sequence of :class:`alen.rawdata.Pair`; there is no separate ``y``
(each pair carries its own reference image). Constructor arguments are stored
verbatim so ``get_params`` / ``set_params`` / ``clone`` behave as usual.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DataError
from .losses import LossConfig, psnr
from .network import ModelConfig
from .rawdata import Pair
from .training import TrainConfig, model_predictor, restore, train


def _as_pair_list(X) -> List[Pair]:
    if isinstance(X, Pair):
        return [X]
    try:
        pairs = list(X)
    except TypeError:
        raise DataError(f"expected a Pair or a sequence of Pair, got {type(X).__name__}")
    if not pairs:
        raise DataError("empty input: need at least one raw/reference pair")
    for i, p in enumerate(pairs):
        if not isinstance(p, Pair):
            raise DataError(f"X[{i}] is {type(p).__name__}, expected Pair")
    return pairs


class LowLightEnhancer(BaseEstimator):
    """U-shaped raw-to-RGB enhancer trained with an L1 + structural loss.

    Defaults are sized for a workstation (3 levels, 8 base channels, short
    schedule); production-scale settings are 5 levels / 32 channels / 4000
    epochs via the config classmethods in :mod:`alen.network` and
    :mod:`alen.training`.
    """

    def __init__(self, base_width: int = 8, depth: int = 3,
                 ratios=(0.5, 0.8, 1.0, 1.2), enable_cab: bool = True,
                 enable_mab: bool = True, enable_isl: bool = True,
                 nonlocal_downsample: int = 2, cab_reduction: int = 4,
                 epochs: int = 200, lr0: float = 1e-4,
                 lr_schedule=((100, 2e-5), (150, 1e-5)), crop: int = 64,
                 batch_size: int = 1, use_augment: bool = True,
                 alpha: float = 0.85, seed: int = 0):
        self.base_width = base_width
        self.depth = depth
        self.ratios = ratios
        self.enable_cab = enable_cab
        self.enable_mab = enable_mab
        self.enable_isl = enable_isl
        self.nonlocal_downsample = nonlocal_downsample
        self.cab_reduction = cab_reduction
        self.epochs = epochs
        self.lr0 = lr0
        self.lr_schedule = lr_schedule
        self.crop = crop
        self.batch_size = batch_size
        self.use_augment = use_augment
        self.alpha = alpha
        self.seed = seed

    # -- config assembly ----------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            base_width=self.base_width, depth=self.depth,
            ratios=tuple(self.ratios), enable_cab=self.enable_cab,
            enable_mab=self.enable_mab, enable_isl=self.enable_isl,
            nonlocal_downsample=self.nonlocal_downsample,
            cab_reduction=self.cab_reduction, seed=self.seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, schedule=tuple(tuple(s) for s in self.lr_schedule),
            epochs=self.epochs, batch_size=self.batch_size, crop=self.crop,
            use_augment=self.use_augment, seed=self.seed)

    def _loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha)

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None) -> "LowLightEnhancer":
        pairs = _as_pair_list(X)
        result = train(self._model_config(), self._train_config(), pairs,
                       loss_cfg=self._loss_config())
        self.weights_, _, _ = restore(result.checkpoint)
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.n_pairs_ = len(pairs)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "weights_"):
            raise NotFittedError(
                "This LowLightEnhancer instance is not fitted yet; call fit first.")

    def predict(self, X) -> List[np.ndarray]:
        """Enhanced linear RGB, one (3, H, W) float32 array per pair."""
        self._check_fitted()
        fn = model_predictor(self.weights_)
        return [fn(p)[0] for p in _as_pair_list(X)]

    def transform(self, X) -> List[np.ndarray]:
        return self.predict(X)

    def score(self, X, y=None) -> float:
        """Mean reconstruction PSNR (dB) against each pair's reference."""
        self._check_fitted()
        pairs = _as_pair_list(X)
        preds = self.predict(pairs)
        return float(np.mean([psnr(out[None], p.target)
                              for out, p in zip(preds, pairs)]))
