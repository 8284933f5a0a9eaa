"""Evaluation battery: accuracy, prototype fidelity, precision tables, PC.

Fidelity compares each prototype with its nearest same-class target feature
(channel map or full-channel vector, per the model's comparison mode) under
cosine similarity, euclidean distance, Pearson correlation, and generalized
Jaccard similarity.  Precision (Pr) measures the foreground fraction inside
each prototype's visualization bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import stack_images
from .explain import DEFAULT_KAPPA, explain_prototype

DEFAULT_PR_THRESHOLDS = (10, 20, 30, 40, 50)


@dataclass
class FidelityReport:
    per_prototype: list  # dicts with class, prototype, cos, ed, pcc, js
    mean_cos: float
    mean_ed: float
    mean_pcc: float
    mean_js: float
    undefined_count: int


@dataclass
class PrTable:
    thresholds: tuple
    percentages: list  # % of prototypes with Pr > threshold
    per_prototype: list = field(default_factory=list)  # Pr value per prototype


def accuracy(model, samples):
    """Top-1 accuracy in percent."""
    if not samples:
        raise ValueError("empty evaluation set")
    images, labels = stack_images(samples)
    predictions = model.predict(images)
    return float(np.mean(predictions == labels) * 100.0)


def cosine_similarity(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(a, b) / (na * nb))


def pearson_correlation(a, b):
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(ac, bc) / (na * nb))


def jaccard_similarity(a, b):
    """Generalized Jaccard sum(min)/sum(max) on the non-negative orthant.

    Negative prototype entries are clamped to zero for this metric only.
    """
    a = np.maximum(a, 0.0)
    b = np.maximum(b, 0.0)
    denom = np.sum(np.maximum(a, b))
    if denom == 0.0:
        return None
    return float(np.sum(np.minimum(a, b)) / denom)


def nearest_targets(model, train_samples):
    """Nearest same-class target feature row per prototype (exhaustive).

    Returns (targets (UK, L), sample_indices, inner_indices, distances).
    """
    cfg = model.config
    images, labels = stack_images(train_samples)
    rows = model.comparison_features(model.extract(images)).data  # (J, N, L)
    protos = model.prototypes.data
    n_inner = rows.shape[1]
    targets = np.zeros_like(protos)
    sample_idx = np.zeros(protos.shape[0], dtype=int)
    inner_idx = np.zeros(protos.shape[0], dtype=int)
    distances = np.zeros(protos.shape[0])
    for k in range(cfg.num_classes):
        members = np.nonzero(labels == k)[0]
        if members.size == 0:
            raise ValueError(f"class {k} has no training samples")
        candidates = rows[members].reshape(-1, rows.shape[2])
        for u in range(cfg.prototypes_per_class):
            p = k * cfg.prototypes_per_class + u
            d = np.linalg.norm(candidates - protos[p], axis=1)
            best = int(np.argmin(d))
            j_local, inner = divmod(best, n_inner)
            targets[p] = candidates[best]
            sample_idx[p] = members[j_local]
            inner_idx[p] = inner
            distances[p] = d[best]
    return targets, sample_idx, inner_idx, distances


def fidelity(model, train_samples):
    """FidelityReport between prototypes and nearest same-class targets.

    Prototypes with an undefined COS/PCC (zero-norm vector) are reported as
    such and excluded from the corresponding means, with a count.
    """
    cfg = model.config
    targets, sample_idx, inner_idx, distances = nearest_targets(model, train_samples)
    protos = model.prototypes.data
    rows = []
    undefined = 0
    for p in range(protos.shape[0]):
        cos = cosine_similarity(protos[p], targets[p])
        pcc = pearson_correlation(protos[p], targets[p])
        js = jaccard_similarity(protos[p], targets[p])
        if cos is None or pcc is None or js is None:
            undefined += 1
        rows.append(
            {
                "class": p // cfg.prototypes_per_class,
                "prototype": p % cfg.prototypes_per_class,
                "cos": cos,
                "ed": float(distances[p]),
                "pcc": pcc,
                "js": js,
                "target_sample": train_samples[sample_idx[p]].id,
                "target_inner": int(inner_idx[p]),
            }
        )

    def _mean(key):
        values = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(values)) if values else float("nan")

    return FidelityReport(
        per_prototype=rows,
        mean_cos=_mean("cos"),
        mean_ed=_mean("ed"),
        mean_pcc=_mean("pcc"),
        mean_js=_mean("js"),
        undefined_count=undefined,
    )


def precision_table(model, train_samples, thresholds=DEFAULT_PR_THRESHOLDS, kappa=DEFAULT_KAPPA):
    """Pr per prototype and the percentage exceeding each threshold.

    Pr = |bounding box ∩ foreground| / |bounding box| on the prototype's
    source training image.  Requires real masks; samples flagged as
    mask-missing are rejected rather than silently treated as foreground.
    """
    if any(s.mask_missing for s in train_samples):
        raise ValueError("precision table requires ground-truth masks")
    cfg = model.config
    pr_values = []
    for k in range(cfg.num_classes):
        for u in range(cfg.prototypes_per_class):
            overlay, j_src, _ = explain_prototype(k, u, model, train_samples, kappa)
            top, left, bottom, right = overlay.bbox
            mask = train_samples[j_src].mask
            box_area = (bottom - top + 1) * (right - left + 1)
            fg = int(np.sum(mask[top : bottom + 1, left : right + 1]))
            pr_values.append(fg / box_area)
    pr_values = np.asarray(pr_values)
    percentages = [
        float(np.mean(pr_values > t / 100.0) * 100.0) for t in thresholds
    ]
    return PrTable(
        thresholds=tuple(thresholds),
        percentages=percentages,
        per_prototype=pr_values.tolist(),
    )


def prototype_compactness(config):
    """Prototypes able to influence one class's logit under the decision rule."""
    if config.aggregation == "single_activation":
        return 1
    return config.prototypes_per_class


def format_fidelity(report):
    lines = ["metric\tmean", f"COS\t{report.mean_cos:.4f}", f"ED\t{report.mean_ed:.4f}",
             f"PCC\t{report.mean_pcc:.4f}", f"JS\t{report.mean_js:.4f}",
             f"undefined\t{report.undefined_count}"]
    return "\n".join(lines)


def format_pr_table(table):
    header = "\t".join(f"Pr>{t}%" for t in table.thresholds)
    row = "\t".join(f"{p:.1f}" for p in table.percentages)
    return f"{header}\n{row}"
