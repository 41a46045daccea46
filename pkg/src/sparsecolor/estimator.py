"""Estimator-style wrapper: ``fit`` on color images, ``predict`` on (target, reference) pairs."""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .color_space import LabImage, fit_to_resolution, lab_to_rgb, to_uint8
from .evaluator import psnr
from .losses import LossWeights
from .model import colorize
from .trainer import Trainer, TrainConfig, load_checkpoint, save_checkpoint
from .validation import check_color_image, check_color_images, check_k_r_params, check_labels, check_luminance
from .warp import make_eval_triplet


class ExemplarColorizer(BaseEstimator):
    """Two-stage reference-based colorizer.

    ``fit(X, y)`` trains on color images ``X`` (class ids ``y`` are optional
    and feed the classification term). ``predict(X)`` takes an iterable of
    ``(target, reference)`` pairs, where ``target`` is an L plane or an image
    whose L plane is used, and returns uint8 RGB images.
    """

    def __init__(
        self,
        resolution=256,
        scale_factor=1.0,
        class_count=1000,
        stage_mode="two_stage",
        mode="sparse",
        k=256,
        r=256,
        batch_size=8,
        epochs=5,
        max_steps=None,
        lr=1e-4,
        violent_prob=0.1,
        loss_weights=None,
        val_fraction=0.0,
        out_dir=None,
        random_state=0,
    ):
        self.resolution = resolution
        self.scale_factor = scale_factor
        self.class_count = class_count
        self.stage_mode = stage_mode
        self.mode = mode
        self.k = k
        self.r = r
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.lr = lr
        self.violent_prob = violent_prob
        self.loss_weights = loss_weights
        self.val_fraction = val_fraction
        self.out_dir = out_dir
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        check_k_r_params(self.k, self.r)
        weights = self.loss_weights
        if weights is None:
            weights = LossWeights()
        elif isinstance(weights, dict):
            weights = LossWeights(**weights)
        return TrainConfig(
            resolution=self.resolution,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            k=self.k,
            r=self.r,
            violent_prob=self.violent_prob,
            seed=int(self.random_state),
            class_count=self.class_count,
            scale_factor=self.scale_factor,
            stage_mode=self.stage_mode,
            weights=weights,
            val_fraction=self.val_fraction,
            max_steps=self.max_steps,
            out_dir=self.out_dir or tempfile.mkdtemp(prefix="sparsecolor-"),
        )

    def fit(self, X, y=None):
        config = self._train_config()
        images = [fit_to_resolution(img, config.resolution) for img in check_color_images(X)]
        labels = None if y is None else check_labels(y, len(images), config.class_count)
        trainer = Trainer(config, images, labels)
        self.checkpoint_ = str(trainer.fit())
        self.model_ = trainer.model
        self.config_ = config
        self.history_ = trainer.history
        self.n_iter_ = trainer.step
        return self

    def colorize(self, target, reference) -> LabImage:
        check_is_fitted(self, "model_")
        check_k_r_params(self.k, self.r)
        L = check_luminance(target)
        ref = check_color_image(reference, "reference")
        return colorize(self.model_, L, ref, self.mode, self.k, self.r, seed=int(self.random_state))

    def predict(self, X) -> list[np.ndarray]:
        return [to_uint8(lab_to_rgb(self.colorize(t, ref))) for t, ref in X]

    def score(self, X, y=None) -> float:
        """Mean PSNR when each image is colorized from a TPS-warped copy of itself."""
        check_is_fitted(self, "model_")
        scores = []
        for i, img in enumerate(check_color_images(X)):
            img = fit_to_resolution(img, self.config_.resolution)
            rng = np.random.default_rng([int(self.random_state), 6, i])
            L, ref, gt = make_eval_triplet(img, "TPS", rng)
            scores.append(psnr(to_uint8(lab_to_rgb(self.colorize(L, ref))), gt))
        return float(np.mean(scores))

    def save(self, path) -> str:
        check_is_fitted(self, "model_")
        return str(save_checkpoint(path, self.model_, None, self.config_, self.n_iter_))

    @classmethod
    def from_checkpoint(cls, path, **params) -> "ExemplarColorizer":
        ck = load_checkpoint(path)
        c = ck.config
        est = cls(
            resolution=c.resolution,
            scale_factor=c.scale_factor,
            class_count=c.class_count,
            stage_mode=c.stage_mode,
            k=c.k,
            r=c.r,
            batch_size=c.batch_size,
            epochs=c.epochs,
            max_steps=c.max_steps,
            lr=c.lr,
            violent_prob=c.violent_prob,
            loss_weights=c.weights.to_dict(),
            val_fraction=c.val_fraction,
            out_dir=c.out_dir,
            random_state=c.seed,
        )
        est.set_params(**params)
        est.model_, est.config_, est.checkpoint_ = ck.model, c, str(path)
        est.history_, est.n_iter_ = [], ck.step
        return est
