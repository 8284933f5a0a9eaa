"""Visualization and per-decision explanation machinery.

An explanation for class k names the single key prototype (the in-class
argmax of the similarity scores), the key channel of the input's feature
stack, and the similarity/weight/logit triple that produced the class
logit, together with bounding-box overlays for both the input feature map
and the prototype's closest training feature map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

DEFAULT_KAPPA = 95.0


@dataclass
class ActivationOverlay:
    source_id: str
    activation: np.ndarray  # (S, S) upsampled activation
    threshold: float
    mask: np.ndarray  # (S, S) bool key region
    bbox: tuple  # (top, left, bottom, right), inclusive pixel coords
    image: np.ndarray | None = None  # (3, S, S) source image, for rendering


@dataclass
class ClassExplanation:
    class_index: int
    prototype_index: int
    channel_index: int
    similarity: float
    weight: float
    logit: float
    input_overlay: ActivationOverlay
    prototype_overlay: ActivationOverlay
    prototype_source_id: str
    prototype_source_inner: int


@dataclass
class ExplanationRecord:
    input_id: str
    predicted_class: int
    logits: np.ndarray
    entries: list = field(default_factory=list)


def bilinear_upsample(grid, size):
    """Align-corners bilinear upsampling of a (H, W) map to (size, size).

    Output corners equal input corners exactly; output extremes are bounded
    by the input extremes.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    if size < h or size < w:
        raise ValueError(f"target size {size} is smaller than source {grid.shape}")
    if h == 1 and w == 1:
        return np.full((size, size), grid[0, 0])

    def coords(n_src):
        if n_src == 1 or size == 1:
            return np.zeros(size)
        return np.arange(size) * (n_src - 1) / (size - 1)

    ys, xs = coords(h), coords(w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def nearest_rank_threshold(values, kappa):
    """Value at the kappa-th percentile under the nearest-rank definition."""
    flat = np.sort(np.asarray(values).ravel())
    rank = int(np.ceil(kappa / 100.0 * flat.size))
    rank = min(max(rank, 1), flat.size)
    return float(flat[rank - 1])


def threshold_region(activation, kappa, source_id="", image=None):
    """Key region at the kappa-th percentile plus its minimal bounding box.

    Ties at the threshold are included; an all-equal activation yields the
    whole image as the (degenerate) key region.
    """
    if not 0.0 < kappa < 100.0:
        raise ValueError(f"kappa must lie in (0, 100), got {kappa}")
    activation = np.asarray(activation, dtype=np.float64)
    threshold = nearest_rank_threshold(activation, kappa)
    mask = activation >= threshold
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    bbox = (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))
    return ActivationOverlay(
        source_id=source_id,
        activation=activation,
        threshold=threshold,
        mask=mask,
        bbox=bbox,
        image=image,
    )


def explain_feature_map(sample, channel, model, kappa=DEFAULT_KAPPA):
    """Overlay for one channel of the sample's feature stack."""
    cfg = model.config
    if not 0 <= channel < cfg.feature_channels:
        raise ValueError(f"channel {channel} out of range [0, {cfg.feature_channels})")
    features = model.extract(sample.image[None]).data[0]
    upsampled = bilinear_upsample(features[channel], cfg.image_size)
    return threshold_region(upsampled, kappa, source_id=sample.id, image=sample.image)


def _prototype_activation_map(model, feature_stack, prototype_index, inner_index):
    """The (H1, W1) map visualized for one prototype on one feature stack."""
    cfg = model.config
    if cfg.comparison_mode == "feature_map":
        return feature_stack[inner_index]
    # feature_vector mode: similarity of the prototype at every position
    flat = feature_stack.reshape(cfg.feature_channels, -1).T  # (D, C1)
    d = np.sum((flat - model.prototypes.data[prototype_index]) ** 2, axis=1)
    sim = np.log(d + 1.0) - np.log(d + cfg.epsilon)
    return sim.reshape(cfg.feature_height, cfg.feature_width)


def explain_prototype(class_index, proto_index, model, train_samples, kappa=DEFAULT_KAPPA):
    """Nearest same-class training feature for one prototype, plus overlay.

    Returns (overlay, sample_index, inner_index) where inner_index is the
    winning channel (feature_map mode) or flattened position (vector mode).
    """
    cfg = model.config
    members = [
        (j, s) for j, s in enumerate(train_samples) if s.label == class_index
    ]
    if not members:
        raise ValueError(f"class {class_index} has no training samples")
    p_index = class_index * cfg.prototypes_per_class + proto_index
    proto = model.prototypes.data[p_index]
    best = None
    for j, sample in members:
        features = model.extract(sample.image[None]).data[0]
        flat = features.reshape(cfg.feature_channels, -1)
        rows = flat if cfg.comparison_mode == "feature_map" else flat.T
        d = np.linalg.norm(rows - proto, axis=1)
        inner = int(np.argmin(d))
        if best is None or d[inner] < best[0]:
            best = (float(d[inner]), j, inner, features)
    _, j_best, inner_best, features = best
    sample = train_samples[j_best]
    act = _prototype_activation_map(model, features, p_index, inner_best)
    upsampled = bilinear_upsample(act, cfg.image_size)
    overlay = threshold_region(upsampled, kappa, source_id=sample.id, image=sample.image)
    return overlay, j_best, inner_best


def explain_decision(sample, model, classes=None, train_samples=None, kappa=DEFAULT_KAPPA):
    """Per-class evidence bundle for one input.

    For each requested class: the key prototype (argmax of in-class scores),
    the key channel (argmin feature-map distance to that prototype), the
    similarity, FC weight, logit, and both overlays.  Prototype overlays
    need ``train_samples``; omit them to skip that half.
    """
    cfg = model.config
    table = model.score_table(sample.image)
    logits = (
        table.class_max @ model.fc_weights.data.T
        if cfg.aggregation == "single_activation"
        else table.scores.reshape(-1) @ model.fc_weights.data.T
    )
    predicted = int(np.argmax(logits))
    if classes is None:
        classes = list(range(cfg.num_classes))
    features = model.extract(sample.image[None]).data[0]
    flat = features.reshape(cfg.feature_channels, -1)
    record = ExplanationRecord(
        input_id=sample.id, predicted_class=predicted, logits=logits
    )
    for k in classes:
        u_star = int(table.class_argmax[k])
        p_index = k * cfg.prototypes_per_class + u_star
        proto = model.prototypes.data[p_index]
        if cfg.comparison_mode == "feature_map":
            c_star = int(np.argmin(np.linalg.norm(flat - proto, axis=1)))
            input_act = features[c_star]
        else:
            c_star = int(table.arg_inner[k, u_star])
            input_act = _prototype_activation_map(model, features, p_index, c_star)
        input_overlay = threshold_region(
            bilinear_upsample(input_act, cfg.image_size),
            kappa,
            source_id=sample.id,
            image=sample.image,
        )
        if train_samples is not None:
            proto_overlay, j_src, inner_src = explain_prototype(
                k, u_star, model, train_samples, kappa
            )
            source_id = train_samples[j_src].id
        else:
            proto_overlay, source_id, inner_src = None, "", -1
        weight = float(
            model.fc_weights.data[k, k]
            if cfg.aggregation == "single_activation"
            else model.fc_weights.data[k, p_index]
        )
        record.entries.append(
            ClassExplanation(
                class_index=k,
                prototype_index=u_star,
                channel_index=c_star,
                similarity=float(table.class_max[k]),
                weight=weight,
                logit=float(logits[k]),
                input_overlay=input_overlay,
                prototype_overlay=proto_overlay,
                prototype_source_id=source_id,
                prototype_source_inner=inner_src,
            )
        )
    return record


# ---------------------------------------------------------------------------
# rendering and export
# ---------------------------------------------------------------------------

_BOX_COLOR = np.array([1.0, 0.9, 0.1])  # yellow


def render_box(overlay):
    """Source image with the key-region bounding box drawn in yellow."""
    img = overlay.image.copy()
    top, left, bottom, right = overlay.bbox
    for c in range(3):
        img[c, top, left : right + 1] = _BOX_COLOR[c]
        img[c, bottom, left : right + 1] = _BOX_COLOR[c]
        img[c, top : bottom + 1, left] = _BOX_COLOR[c]
        img[c, top : bottom + 1, right] = _BOX_COLOR[c]
    return img


def render_heatmap(overlay, alpha=0.5):
    """Source image blended with a red-scaled activation heatmap."""
    act = overlay.activation
    span = act.max() - act.min()
    norm = (act - act.min()) / span if span > 0 else np.zeros_like(act)
    heat = np.stack([norm, 0.2 * norm, 1.0 - norm])
    return (1 - alpha) * overlay.image + alpha * heat


def _save_png(image, path):
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def export_explanation(record, out_dir):
    """Write PNG overlays and the structured sidecar for one record."""
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "input_id": record.input_id,
        "predicted_class": record.predicted_class,
        "logits": [float(v) for v in record.logits],
        "classes": [],
    }
    for entry in record.entries:
        k = entry.class_index
        _save_png(
            render_box(entry.input_overlay),
            out_dir / f"{record.input_id}_class{k}_input.png",
        )
        _save_png(
            render_heatmap(entry.input_overlay),
            out_dir / f"{record.input_id}_class{k}_input_heat.png",
        )
        if entry.prototype_overlay is not None:
            _save_png(
                render_box(entry.prototype_overlay),
                out_dir / f"{record.input_id}_class{k}_prototype.png",
            )
            _save_png(
                render_heatmap(entry.prototype_overlay),
                out_dir / f"{record.input_id}_class{k}_prototype_heat.png",
            )
        sidecar["classes"].append(
            {
                "class": k,
                "prototype_index": entry.prototype_index,
                "channel_index": entry.channel_index,
                "similarity": entry.similarity,
                "weight": entry.weight,
                "logit": entry.logit,
                "input_bbox": list(entry.input_overlay.bbox),
                "prototype_bbox": (
                    list(entry.prototype_overlay.bbox)
                    if entry.prototype_overlay is not None
                    else None
                ),
                "prototype_source_id": entry.prototype_source_id,
                "prototype_source_inner": entry.prototype_source_inner,
            }
        )
    path = out_dir / f"{record.input_id}.explain.json"
    path.write_text(json.dumps(sidecar, indent=2))
    return path
