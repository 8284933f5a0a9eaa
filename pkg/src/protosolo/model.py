"""The network: feature extractor, prototype layer, and classification head.

The extractor is a stack of stride-2 valid convolutions (backbone) followed
by two 1x1 convolutions (shaping network), all ReLU-activated.  Prototypes
are compared against per-channel feature maps ("feature_map" mode) or
against per-position full-channel feature vectors ("feature_vector" mode,
the traditional baseline).  The head either keeps only each class's maximum
prototype similarity ("single_activation") or sums all prototype scores with
class-connection weights ("dense_sum", the baseline convention).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

COMPARISON_MODES = ("feature_map", "feature_vector")
AGGREGATIONS = ("single_activation", "dense_sum")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    prototypes_per_class: int = 10
    image_size: int = 64
    # three stride-2 blocks keep receptive fields local (17px at 64px
    # input), so a feature cell can only respond to image content near
    # its own position; wider stacks let border cells see the object
    # center and detach prototype visualizations from the evidence
    backbone_channels: tuple = (16, 32, 64)
    backbone_kernels: tuple = (5, 3, 3)
    backbone_strides: tuple = (2, 2, 2)
    shaping_channels: tuple = (32, 32)
    feature_height: int = 6
    feature_width: int = 6
    comparison_mode: str = "feature_map"
    aggregation: str = "single_activation"
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.num_classes < 1 or self.prototypes_per_class < 1:
            raise ValueError("num_classes and prototypes_per_class must be >= 1")
        if self.comparison_mode not in COMPARISON_MODES:
            raise ValueError(f"unknown comparison_mode {self.comparison_mode!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if not (
            len(self.backbone_channels)
            == len(self.backbone_kernels)
            == len(self.backbone_strides)
        ):
            raise ValueError("backbone channel/kernel/stride lists must align")
        h = w = self.image_size
        for k, s in zip(self.backbone_kernels, self.backbone_strides):
            h = ad.conv_output_size(h, k, s)
            w = ad.conv_output_size(w, k, s)
        if (h, w) != (self.feature_height, self.feature_width):
            raise ValueError(
                f"backbone stack maps {self.image_size}px input to {h}x{w}, "
                f"config requires {self.feature_height}x{self.feature_width}"
            )

    @property
    def feature_channels(self):
        return self.shaping_channels[-1]

    @property
    def prototype_length(self):
        if self.comparison_mode == "feature_map":
            return self.feature_height * self.feature_width
        return self.feature_channels

    @property
    def num_prototypes(self):
        return self.num_classes * self.prototypes_per_class

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "prototypes_per_class": self.prototypes_per_class,
            "image_size": self.image_size,
            "backbone_channels": list(self.backbone_channels),
            "backbone_kernels": list(self.backbone_kernels),
            "backbone_strides": list(self.backbone_strides),
            "shaping_channels": list(self.shaping_channels),
            "feature_height": self.feature_height,
            "feature_width": self.feature_width,
            "comparison_mode": self.comparison_mode,
            "aggregation": self.aggregation,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("backbone_channels", "backbone_kernels", "backbone_strides", "shaping_channels"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ScoreTable:
    """Per-image prototype similarities for one input.

    ``arg_inner`` holds the winning channel index in feature_map mode and
    the winning flattened spatial position in feature_vector mode.
    """

    scores: np.ndarray  # (K, U)
    arg_inner: np.ndarray  # (K, U) int
    class_max: np.ndarray  # (K,)
    class_argmax: np.ndarray  # (K,) int


@dataclass
class ForwardTrace:
    """Graph nodes and routing indices from one batched forward pass."""

    features: ad.Tensor  # (B, C1, H1, W1)
    comparison: ad.Tensor  # (B, N, L)
    dists: ad.Tensor  # (B, UK, N)
    dmin: ad.Tensor  # (B, UK) min over the inner axis
    arg_inner: np.ndarray  # (B, UK) int
    scores: ad.Tensor  # (B, UK) similarity of dmin
    class_max: ad.Tensor  # (B, K) max over u (single_activation path)
    class_argmax: np.ndarray  # (B, K) int
    logits: ad.Tensor  # (B, K)


def similarity(phi, varphi, eps):
    """Similarity ln((d + 1) / (d + eps)) between two equal-shape arrays."""
    if eps <= 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    d = ad.sq_l2_distance(ad.as_tensor(phi), ad.as_tensor(varphi))
    return ad.log_similarity(d, eps)


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def initial_fc_weights(config):
    """Class-connection init: 1 on own-class links, -0.5 elsewhere."""
    k, u = config.num_classes, config.prototypes_per_class
    if config.aggregation == "single_activation":
        w = np.full((k, k), -0.5)
        np.fill_diagonal(w, 1.0)
    else:
        w = np.full((k, k * u), -0.5)
        for t in range(k):
            w[t, t * u : (t + 1) * u] = 1.0
    return w


class ProtoSoloNet:
    """Parameters plus forward passes; training is driven externally."""

    def __init__(self, config, seed=0, init_params=True):
        self.config = config
        self.conv_weights = []
        self.conv_biases = []
        if init_params:
            rng = np.random.default_rng(seed)
            in_ch = 3
            for out_ch, kern in zip(config.backbone_channels, config.backbone_kernels):
                fan_in = in_ch * kern * kern
                self.conv_weights.append(
                    ad.Tensor(
                        _he_uniform(rng, (out_ch, in_ch, kern, kern), fan_in),
                        requires_grad=True,
                    )
                )
                self.conv_biases.append(
                    ad.Tensor(np.zeros(out_ch), requires_grad=False)
                )
                in_ch = out_ch
            self.shaping_weights = []
            self.shaping_biases = []
            for out_ch in config.shaping_channels:
                self.shaping_weights.append(
                    ad.Tensor(
                        _he_uniform(rng, (out_ch, in_ch, 1, 1), in_ch),
                        requires_grad=True,
                    )
                )
                self.shaping_biases.append(
                    ad.Tensor(np.zeros(out_ch), requires_grad=False)
                )
                in_ch = out_ch
            self.prototypes = ad.Tensor(
                rng.uniform(0.0, 1.0, size=(config.num_prototypes, config.prototype_length)),
                requires_grad=True,
            )
            self.fc_weights = ad.Tensor(initial_fc_weights(config), requires_grad=True)
        else:
            self.shaping_weights = []
            self.shaping_biases = []
            self.prototypes = None
            self.fc_weights = None

    # -- parameter groups ----------------------------------------------------

    def named_parameters(self):
        params = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            params[f"backbone.{i}.weight"] = w
            params[f"backbone.{i}.bias"] = b
        for i, (w, b) in enumerate(zip(self.shaping_weights, self.shaping_biases)):
            params[f"shaping.{i}.weight"] = w
            params[f"shaping.{i}.bias"] = b
        params["prototypes"] = self.prototypes
        params["fc.weight"] = self.fc_weights
        return params

    # Conv biases stay fixed at zero: with a ReLU stack and no additive
    # offsets, a feature channel can only be bright where its input is,
    # which keeps activation maps anchored to image content.
    def backbone_parameters(self):
        return list(self.conv_weights)

    def shaping_parameters(self):
        return list(self.shaping_weights)

    # -- forward passes --------------------------------------------------------

    def extract(self, images):
        """Run backbone + shaping network on (B, 3, S, S) or (3, S, S) input."""
        x = ad.as_tensor(images)
        for w, b, s in zip(self.conv_weights, self.conv_biases, self.config.backbone_strides):
            x = ad.relu(ad.conv2d(x, w, b, stride=s))
        for w, b in zip(self.shaping_weights, self.shaping_biases):
            x = ad.relu(ad.conv2d(x, w, b, stride=1))
        return x

    def comparison_features(self, feature_stack):
        """Reshape the feature stack into comparison rows (B, N, L).

        feature_map mode: N = C1 channel maps of length H1*W1.
        feature_vector mode: N = H1*W1 positions of length C1.
        """
        cfg = self.config
        b = feature_stack.data.shape[0]
        flat = ad.reshape(
            feature_stack, (b, cfg.feature_channels, cfg.feature_height * cfg.feature_width)
        )
        if cfg.comparison_mode == "feature_map":
            return flat
        return ad.swapaxes(flat, 1, 2)

    def forward(self, images):
        """Full batched forward pass; returns a ForwardTrace."""
        cfg = self.config
        single = np.asarray(images).ndim == 3
        batch = np.asarray(images)[None] if single else np.asarray(images)
        features = self.extract(batch)
        comparison = self.comparison_features(features)
        dists = ad.pairwise_sq_dists(comparison, self.prototypes)  # (B, UK, N)
        dmin, arg_inner = ad.min_last(dists)
        scores = ad.log_similarity(dmin, cfg.epsilon)  # (B, UK)
        grouped = ad.reshape(scores, (batch.shape[0], cfg.num_classes, cfg.prototypes_per_class))
        class_max, class_argmax = ad.max_last(grouped)
        if cfg.aggregation == "single_activation":
            logits = ad.linear(class_max, self.fc_weights)
        else:
            logits = ad.linear(scores, self.fc_weights)
        return ForwardTrace(
            features=features,
            comparison=comparison,
            dists=dists,
            dmin=dmin,
            arg_inner=arg_inner,
            scores=scores,
            class_max=class_max,
            class_argmax=class_argmax,
            logits=logits,
        )

    def predict(self, images):
        """Predicted class indices for (B, 3, S, S) images."""
        trace = self.forward(images)
        return np.argmax(trace.logits.data, axis=-1)

    def score_table(self, image):
        """ScoreTable for one (3, S, S) image (no gradients retained)."""
        cfg = self.config
        trace = self.forward(image)
        k, u = cfg.num_classes, cfg.prototypes_per_class
        return ScoreTable(
            scores=trace.scores.data.reshape(k, u).copy(),
            arg_inner=trace.arg_inner.reshape(k, u).copy(),
            class_max=trace.class_max.data[0].copy(),
            class_argmax=trace.class_argmax[0].copy(),
        )


def prototype_scores(feature_stack, prototypes, config):
    """ScoreTable from a raw (C1, H1, W1) feature stack and prototype matrix.

    Functional form used by tests and the explainer; gradients are not kept.
    """
    cfg = config
    fs = np.asarray(feature_stack, dtype=np.float64)
    expected = (cfg.feature_channels, cfg.feature_height, cfg.feature_width)
    if fs.shape != expected:
        raise ValueError(f"feature stack shape {fs.shape}, config requires {expected}")
    protos = prototypes.data if isinstance(prototypes, ad.Tensor) else np.asarray(prototypes)
    if protos.shape != (cfg.num_prototypes, cfg.prototype_length):
        raise ValueError(
            f"prototype matrix shape {protos.shape} does not match "
            f"({cfg.num_prototypes}, {cfg.prototype_length})"
        )
    flat = fs.reshape(cfg.feature_channels, -1)
    rows = flat if cfg.comparison_mode == "feature_map" else flat.T
    diffs = rows[None, :, :] - protos[:, None, :]
    dists = np.einsum("mnl,mnl->mn", diffs, diffs)  # (UK, N)
    arg_inner = np.argmin(dists, axis=1)
    dmin = dists[np.arange(dists.shape[0]), arg_inner]
    scores = np.log(dmin + 1.0) - np.log(dmin + cfg.epsilon)
    k, u = cfg.num_classes, cfg.prototypes_per_class
    scores = scores.reshape(k, u)
    class_argmax = np.argmax(scores, axis=1)
    return ScoreTable(
        scores=scores,
        arg_inner=arg_inner.reshape(k, u),
        class_max=scores[np.arange(k), class_argmax],
        class_argmax=class_argmax,
    )


def classify(class_scores, fc_weights):
    """Logits P(y^t | x) = sum_k w[t, k] * G[k] (pure linear decomposition)."""
    g = np.asarray(class_scores, dtype=np.float64)
    w = fc_weights.data if isinstance(fc_weights, ad.Tensor) else np.asarray(fc_weights)
    if w.ndim != 2 or w.shape[1] != g.shape[-1]:
        raise ValueError(f"weight shape {w.shape} does not match scores {g.shape}")
    return g @ w.T
