"""Scikit-learn style estimator facade over the model and trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import Sample
from .losses import LossWeights
from .model import ModelConfig, ProtoSoloNet
from .training import TrainConfig, train


def validate_images(X, image_size=None):
    """Check (n, 3, S, S) float images with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"X must have shape (n, 3, S, S), got {X.shape}")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"expected {image_size}px images, got {X.shape[2]}px")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


class ProtoSoloClassifier(BaseEstimator, ClassifierMixin):
    """Interpretable classifier driven by one prototype activation per class.

    Parameters mirror the model/training configuration; ``fit`` expects
    images of shape (n, 3, S, S) with values in [0, 1] and integer labels.
    """

    def __init__(
        self,
        prototypes_per_class=10,
        comparison_mode="feature_map",
        aggregation="single_activation",
        epsilon=1e-4,
        backbone_channels=(16, 32, 64),
        backbone_kernels=(5, 3, 3),
        backbone_strides=(2, 2, 2),
        shaping_channels=(32, 32),
        feature_height=6,
        feature_width=6,
        warm_epochs=5,
        joint_epochs=30,
        fc_epochs=10,
        warm_lr=3e-3,
        joint_lr=2e-3,
        fc_lr=0.2,
        batch_size=2,
        fc_batch_size=2,
        anchor_weight=1.2,
        spread_weight=0.05,
        lambda1=0.8,
        lambda2=-0.08,
        lambda3=1e-4,
        separation_sign="repel",
        projection="none",
        seed=0,
    ):
        self.prototypes_per_class = prototypes_per_class
        self.comparison_mode = comparison_mode
        self.aggregation = aggregation
        self.epsilon = epsilon
        self.backbone_channels = backbone_channels
        self.backbone_kernels = backbone_kernels
        self.backbone_strides = backbone_strides
        self.shaping_channels = shaping_channels
        self.feature_height = feature_height
        self.feature_width = feature_width
        self.warm_epochs = warm_epochs
        self.joint_epochs = joint_epochs
        self.fc_epochs = fc_epochs
        self.warm_lr = warm_lr
        self.joint_lr = joint_lr
        self.fc_lr = fc_lr
        self.batch_size = batch_size
        self.fc_batch_size = fc_batch_size
        self.anchor_weight = anchor_weight
        self.spread_weight = spread_weight
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.separation_sign = separation_sign
        self.projection = projection
        self.seed = seed

    def _model_config(self, image_size, num_classes):
        return ModelConfig(
            num_classes=num_classes,
            prototypes_per_class=self.prototypes_per_class,
            image_size=image_size,
            backbone_channels=tuple(self.backbone_channels),
            backbone_kernels=tuple(self.backbone_kernels),
            backbone_strides=tuple(self.backbone_strides),
            shaping_channels=tuple(self.shaping_channels),
            feature_height=self.feature_height,
            feature_width=self.feature_width,
            comparison_mode=self.comparison_mode,
            aggregation=self.aggregation,
            epsilon=self.epsilon,
        )

    def _train_config(self):
        return TrainConfig(
            warm_epochs=self.warm_epochs,
            joint_epochs=self.joint_epochs,
            fc_epochs=self.fc_epochs,
            warm_lr=self.warm_lr,
            joint_lr=self.joint_lr,
            fc_lr=self.fc_lr,
            batch_size=self.batch_size,
            fc_batch_size=self.fc_batch_size,
            anchor_weight=self.anchor_weight,
            spread_weight=self.spread_weight,
            seed=self.seed,
            projection=self.projection,
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3),
            separation_sign=self.separation_sign,
        )

    def fit(self, X, y):
        X = validate_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be one label per image")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        config = self._model_config(X.shape[2], int(self.classes_.size))
        self.model_ = ProtoSoloNet(config, seed=self.seed)
        dummy_mask = np.ones((X.shape[2], X.shape[2]), dtype=bool)
        samples = [
            Sample(image=X[i], label=int(encoded[i]), mask=dummy_mask, id=f"fit_{i:05d}")
            for i in range(X.shape[0])
        ]
        self.checkpoint_, self.training_log_ = train(samples, self.model_, self._train_config())
        return self

    def decision_function(self, X):
        self._check_fitted()
        X = validate_images(X, self.model_.config.image_size)
        return self.model_.forward(X).logits.data

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")
