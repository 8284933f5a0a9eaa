"""The four training losses and their weighted total.

Cross-entropy drives accuracy; the clustering cost pulls each sample's
nearest same-class prototype toward its nearest feature row; the separation
cost involves the nearest other-class prototype; the weight-factor cost
shrinks off-class-diagonal connection weights so each class's logit depends
only on its own maximum similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SEPARATION_SIGNS = ("paper", "repel")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.8
    lambda2: float = -0.08
    lambda3: float = 1e-4


def _check_batch(features, labels):
    labels = np.asarray(labels, dtype=np.intp)
    if features.data.ndim != 3:
        raise ValueError(f"expected (B, N, L) comparison features, got {features.data.shape}")
    if labels.shape != (features.data.shape[0],):
        raise ValueError("labels must align with the batch")
    if labels.size == 0:
        raise ValueError("empty batch")
    return labels


def cluster_loss(features, labels, prototypes, num_classes):
    """Batch mean of min over same-class prototypes and rows of squared distance.

    ``features`` are comparison rows (B, N, L); ``prototypes`` is (K*U, L).
    """
    features = ad.as_tensor(features)
    labels = _check_batch(features, labels)
    dists = ad.pairwise_sq_dists(features, prototypes)
    dmin, _ = ad.min_last(dists)  # (B, UK)
    b = features.data.shape[0]
    grouped = ad.reshape(dmin, (b, num_classes, -1))
    own = ad.take_index1(grouped, labels)  # (B, U)
    per_sample, _ = ad.min_last(own)
    return ad.mean(per_sample)


def separation_loss(features, labels, prototypes, num_classes):
    """Negated batch mean of the minimum heterogeneous squared distance.

    The minimum runs over all prototypes of classes other than the sample's
    label; the result is <= 0.
    """
    if num_classes < 2:
        raise ValueError("separation loss needs at least two classes")
    features = ad.as_tensor(features)
    labels = _check_batch(features, labels)
    dists = ad.pairwise_sq_dists(features, prototypes)
    dmin, _ = ad.min_last(dists)
    b = features.data.shape[0]
    grouped = ad.reshape(dmin, (b, num_classes, -1))
    masked = ad.mask_index1(grouped, labels)
    flat = ad.reshape(masked, (b, -1))
    per_sample, _ = ad.min_last(flat)
    return -ad.mean(per_sample)


def anchor_loss(features, labels, prototypes, num_classes):
    """Mean over prototypes of distance to the nearest same-class row.

    The mirror image of the clustering cost: rather than pulling each
    sample toward its nearest prototype, every prototype is pulled toward
    the nearest comparison row among batch samples of its class.  This
    keeps prototypes that no sample currently selects on the feature
    manifold instead of leaving them frozen at initialisation.  Prototypes
    whose class is absent from the batch are excluded from the mean.
    """
    features = ad.as_tensor(features)
    labels = _check_batch(features, labels)
    dists = ad.pairwise_sq_dists(features, prototypes)  # (B, M, N)
    dmin, _ = ad.min_last(dists)  # (B, M)
    m = dmin.data.shape[1]
    if m % num_classes != 0:
        raise ValueError("prototype count must divide evenly among classes")
    proto_class = np.repeat(np.arange(num_classes), m // num_classes)
    valid = labels[:, None] == proto_class[None, :]  # (B, M)
    present = valid.any(axis=0)
    if not present.any():
        raise ValueError("batch contains no samples for any prototype class")
    shifted = ad.add(dmin, ad.Tensor(np.where(valid, 0.0, ad.MASK_VALUE)))
    per_proto, _ = ad.min_last(ad.swapaxes(shifted, 0, 1))  # (M,)
    weights_vec = present.astype(float) / present.sum()
    return ad.sum_(ad.mul(per_proto, ad.Tensor(weights_vec)))


def spread_loss(features, labels, prototypes, num_classes):
    """Mean over prototypes of ln(1 + distance to nearest other-class row).

    Companion to the anchoring cost: anchoring alone lets starved
    prototypes settle on class-agnostic rows that every class shares, which
    collapses heterogeneous distances.  Maximising this saturating spread
    (subtracting it from the objective) herds each prototype toward rows
    its own class does not share with others.  The log keeps the push
    bounded so prototypes cannot be driven off the feature manifold.
    """
    features = ad.as_tensor(features)
    labels = _check_batch(features, labels)
    if num_classes < 2:
        raise ValueError("spread loss needs at least two classes")
    dists = ad.pairwise_sq_dists(features, prototypes)  # (B, M, N)
    dmin, _ = ad.min_last(dists)  # (B, M)
    m = dmin.data.shape[1]
    if m % num_classes != 0:
        raise ValueError("prototype count must divide evenly among classes")
    proto_class = np.repeat(np.arange(num_classes), m // num_classes)
    valid = labels[:, None] != proto_class[None, :]  # (B, M)
    present = valid.any(axis=0)
    if not present.any():
        raise ValueError("batch contains no samples outside any prototype class")
    shifted = ad.add(dmin, ad.Tensor(np.where(valid, 0.0, ad.MASK_VALUE)))
    per_proto, _ = ad.min_last(ad.swapaxes(shifted, 0, 1))  # (M,)
    damped = ad.log1p_(per_proto)
    weights_vec = present.astype(float) / present.sum()
    return ad.sum_(ad.mul(damped, ad.Tensor(weights_vec)))


def weight_factor_loss(fc_weights, num_classes=None):
    """Sum of |w| over all connections that cross class boundaries.

    For a (K, K) single-activation matrix this is the off-diagonal L1 mass;
    for a (K, K*U) dense matrix, own-class blocks are excluded instead.
    """
    fc_weights = ad.as_tensor(fc_weights)
    if fc_weights.data.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got {fc_weights.data.shape}")
    k, cols = fc_weights.data.shape
    if cols == k:
        mask = 1.0 - np.eye(k)
    elif num_classes is not None and cols % num_classes == 0 and k == num_classes:
        u = cols // num_classes
        mask = np.ones((k, cols))
        for t in range(k):
            mask[t, t * u : (t + 1) * u] = 0.0
    else:
        raise ValueError(
            f"weight matrix {fc_weights.data.shape} is neither square nor "
            "a per-prototype class-connection matrix"
        )
    return ad.sum_(ad.mul(ad.abs_(fc_weights), ad.Tensor(mask)))


def total_loss(model, images, labels, weights, separation_sign="repel", trace=None):
    """Weighted total plus a per-term breakdown for logging.

    ``separation_sign="paper"`` applies lambda2 * L_sep literally (with
    L_sep <= 0 and lambda2 < 0 this attracts heterogeneous prototypes);
    ``"repel"`` applies the stated intent: the term added to the minimized
    total is -|weighted| times the mean minimum heterogeneous distance.
    Reported L_sep is the literal (negated-mean) value in both cases.
    """
    if separation_sign not in SEPARATION_SIGNS:
        raise ValueError(f"unknown separation_sign {separation_sign!r}")
    cfg = model.config
    if cfg.num_classes < 2:
        raise ValueError("training requires at least two classes")
    labels = np.asarray(labels, dtype=np.intp)
    if trace is None:
        trace = model.forward(images)
    b = trace.dmin.data.shape[0]

    crs = ad.softmax_cross_entropy(trace.logits, labels)

    grouped = ad.reshape(trace.dmin, (b, cfg.num_classes, cfg.prototypes_per_class))
    own = ad.take_index1(grouped, labels)
    clst_per_sample, _ = ad.min_last(own)
    clst = ad.mean(clst_per_sample)

    masked = ad.mask_index1(grouped, labels)
    hetero, _ = ad.min_last(ad.reshape(masked, (b, -1)))
    sep_raw = ad.mean(hetero)  # mean minimum heterogeneous distance, >= 0
    sep = -sep_raw  # Eq.-literal separation loss, <= 0

    lw = weight_factor_loss(model.fc_weights, cfg.num_classes)

    if separation_sign == "paper":
        sep_term = weights.lambda2 * sep
    else:
        sep_term = weights.lambda2 * sep_raw
    total = crs + weights.lambda1 * clst + sep_term + weights.lambda3 * lw
    terms = {
        "crs": crs.item(),
        "clst": clst.item(),
        "sep": sep.item(),
        "w": lw.item(),
        "total": total.item(),
    }
    parts = {"crs": crs, "clst": clst, "sep": sep, "sep_raw": sep_raw, "w": lw}
    return total, terms, trace, parts
