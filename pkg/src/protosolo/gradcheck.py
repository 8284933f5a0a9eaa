"""Finite-difference gradient checking against the analytic backward pass."""

from __future__ import annotations

import numpy as np

from .losses import LossWeights, total_loss
from .model import ModelConfig, ProtoSoloNet


def toy_setup(seed=0, num_classes=3, prototypes_per_class=2, batch=4):
    """Small seeded model + batch used for end-to-end gradient checks."""
    config = ModelConfig(
        num_classes=num_classes,
        prototypes_per_class=prototypes_per_class,
        image_size=16,
        backbone_channels=(4, 6),
        backbone_kernels=(3, 3),
        backbone_strides=(2, 2),
        shaping_channels=(5, 4),
        feature_height=3,
        feature_width=3,
    )
    rng = np.random.default_rng(seed)
    model = ProtoSoloNet(config, seed=seed)
    images = rng.uniform(0.0, 1.0, size=(batch, 3, 16, 16))
    labels = rng.integers(0, num_classes, size=batch)
    return model, images, labels


def loss_value(model, images, labels, weights, separation_sign):
    total, _, _, _ = total_loss(model, images, labels, weights, separation_sign)
    return total.item()


def max_relative_grad_error(
    model, images, labels, weights=None, separation_sign="repel", step=1e-3
):
    """Max over all parameters of the analytic-vs-central-difference error.

    Error per entry is |analytic - numeric| / max(1, |analytic|, |numeric|):
    relative where gradients are large, absolute near zero.
    """
    weights = weights or LossWeights()
    total, _, _, _ = total_loss(model, images, labels, weights, separation_sign)
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    total.backward()
    worst = 0.0
    worst_name = None
    for name, p in params.items():
        if not p.requires_grad:
            continue  # frozen tensors (fixed-zero biases) take no gradient
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value(model, images, labels, weights, separation_sign)
            flat[i] = orig - step
            lo = loss_value(model, images, labels, weights, separation_sign)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.ravel()[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
                worst_name = f"{name}[{i}]"
    return worst, worst_name
