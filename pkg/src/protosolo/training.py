"""Phased training, optional prototype projection, and checkpoint persistence.

The schedule follows the class-connection convention: a warm phase trains
the shaping network and prototypes with the backbone and FC frozen, a joint
phase unfreezes the backbone, and a final phase trains the FC layer alone
against cross-entropy plus the weight-factor penalty.  Projection, when
enabled, runs exactly once between the joint and FC phases.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .data import augment, stack_images
from .model import ModelConfig, ProtoSoloNet
from .optim import Adam

CHECKPOINT_MAGIC = "PROTOSOLO-CKPT"
CHECKPOINT_VERSION = 1

PROJECTION_MODES = ("none", "project")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, term):
        super().__init__(f"non-finite loss term {term!r} at epoch {epoch}")
        self.epoch = epoch
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    warm_epochs: int = 5
    joint_epochs: int = 30
    fc_epochs: int = 10
    warm_lr: float = 3e-3
    joint_lr: float = 2e-3
    fc_lr: float = 0.2
    batch_size: int = 2
    seed: int = 0
    projection: str = "none"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    separation_sign: str = "repel"
    use_augmentation: bool = False
    revive_prototypes: bool = False
    anchor_weight: float = 1.2
    spread_weight: float = 0.05
    # small fc batches give the L1 penalty many steps per epoch to pull
    # cross-class weights into the kink at zero
    fc_batch_size: int = 2

    def __post_init__(self):
        if self.projection not in PROJECTION_MODES:
            raise ValueError(f"unknown projection mode {self.projection!r}")
        if self.separation_sign not in L.SEPARATION_SIGNS:
            raise ValueError(f"unknown separation_sign {self.separation_sign!r}")
        if self.batch_size < 1 or self.fc_batch_size < 1:
            raise ValueError("batch sizes must be positive")

    def to_dict(self):
        d = {
            "warm_epochs": self.warm_epochs,
            "joint_epochs": self.joint_epochs,
            "fc_epochs": self.fc_epochs,
            "warm_lr": self.warm_lr,
            "joint_lr": self.joint_lr,
            "fc_lr": self.fc_lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "projection": self.projection,
            "lambda1": self.weights.lambda1,
            "lambda2": self.weights.lambda2,
            "lambda3": self.weights.lambda3,
            "separation_sign": self.separation_sign,
            "use_augmentation": self.use_augmentation,
            "revive_prototypes": self.revive_prototypes,
            "anchor_weight": self.anchor_weight,
            "spread_weight": self.spread_weight,
            "fc_batch_size": self.fc_batch_size,
        }
        return d


@dataclass
class EpochLog:
    epoch: int
    phase: str
    crs: float
    clst: float
    sep: float
    w: float
    total: float
    train_acc: float

    def row(self):
        return (
            f"{self.epoch}\t{self.phase}\t{self.crs:.6f}\t{self.clst:.6f}\t"
            f"{self.sep:.6f}\t{self.w:.6f}\t{self.total:.6f}\t{self.train_acc:.4f}"
        )


LOG_HEADER = "epoch\tphase\tL_crs\tL_clst\tL_sep\tL_w\tL_total\ttrain_acc"


def _run_phase(model, images, labels, cfg, phase, params, epochs, lr, epoch_offset, logs, rng, samples=None, aug_rng=None, epoch_end=None, lr_decay=False):
    if epochs <= 0:
        return epoch_offset
    # the fc phase rides an L1 plateau where the useful gradient is the
    # tiny constant penalty term; short moment memories let the moving
    # averages forget occasional large mini-batch spikes quickly enough
    # for that signal to drive full-size steps
    opt = Adam(params, lr=lr, betas=(0.8, 0.9) if phase == "fc" else (0.9, 0.999))
    n = images.shape[0]
    batch_size = cfg.fc_batch_size if phase == "fc" else cfg.batch_size
    for e in range(epochs):
        if lr_decay and phase == "fc":
            # the final-layer problem is convex with an L1 kink at zero:
            # hold the step size until the off-class weights have been
            # pulled into the kink, then cut it by a decade per epoch so
            # they settle there instead of oscillating at the step size
            hold = max(epochs - 3, 1)
            opt.lr = lr * 0.1 ** max(e - hold + 1, 0)
        elif lr_decay:
            # short warmup guards the fresh optimizer state, then cosine
            # decay to a 10% floor for fine late-phase convergence
            warm_span = min(3, epochs)
            if e < warm_span:
                opt.lr = lr * (0.3 + 0.7 * e / warm_span)
            else:
                frac = (e - warm_span) / max(epochs - 1 - warm_span, 1)
                opt.lr = lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
        epoch = epoch_offset + e
        order = rng.permutation(n)
        if cfg.use_augmentation and samples is not None:
            epoch_images = np.stack(
                [augment(samples[i], aug_rng).image for i in order]
            )
            epoch_labels = labels[order]
        else:
            epoch_images = images[order]
            epoch_labels = labels[order]
        sums = {"crs": 0.0, "clst": 0.0, "sep": 0.0, "w": 0.0, "total": 0.0}
        correct = 0
        batches = 0
        for start in range(0, n, batch_size):
            bx = epoch_images[start : start + batch_size]
            by = epoch_labels[start : start + batch_size]
            total, terms, trace, parts = L.total_loss(
                model, bx, by, cfg.weights, cfg.separation_sign
            )
            for key, value in terms.items():
                if not np.isfinite(value):
                    raise TrainingDiverged(epoch, key)
                sums[key] += value
            correct += int(np.sum(np.argmax(trace.logits.data, axis=1) == by))
            if phase == "fc":
                objective = parts["crs"] + cfg.weights.lambda3 * parts["w"]
            else:
                objective = total
                if cfg.anchor_weight > 0:
                    objective = objective + cfg.anchor_weight * L.anchor_loss(
                        trace.comparison, by, model.prototypes, model.config.num_classes
                    )
                if cfg.spread_weight > 0:
                    objective = objective - cfg.spread_weight * L.spread_loss(
                        trace.comparison, by, model.prototypes, model.config.num_classes
                    )
            opt.zero_grad()
            objective.backward()
            opt.step()
            batches += 1
        logs.append(
            EpochLog(
                epoch=epoch,
                phase=phase,
                crs=sums["crs"] / batches,
                clst=sums["clst"] / batches,
                sep=sums["sep"] / batches,
                w=sums["w"] / batches,
                total=sums["total"] / batches,
                train_acc=correct / n,
            )
        )
        if epoch_end is not None:
            epoch_end(e)
    return epoch_offset + epochs


def train(train_samples, model, cfg):
    """Run the phased schedule; returns (Checkpoint, per-epoch logs).

    Mutates ``model`` in place.  Prototypes are touched only by gradient
    steps, except for the single projection pass when configured.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    images, labels = stack_images(train_samples)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    logs = []
    epoch = 0

    revive_rng = np.random.default_rng([cfg.seed, 2])

    warm_params = model.shaping_parameters() + [model.prototypes]
    epoch = _run_phase(
        model, images, labels, cfg, "warm", warm_params, cfg.warm_epochs,
        cfg.warm_lr, epoch, logs, rng, train_samples, aug_rng,
    )
    def joint_epoch_end(e):
        # periodic revival, skipped near the end so revived prototypes
        # still have epochs left to settle onto their claimants
        if cfg.revive_prototypes and (e + 1) % 10 == 0 and e + 1 <= cfg.joint_epochs - 10:
            revive_dead_prototypes(model, train_samples, revive_rng)

    joint_params = model.backbone_parameters() + model.shaping_parameters() + [model.prototypes]
    epoch = _run_phase(
        model, images, labels, cfg, "joint", joint_params, cfg.joint_epochs,
        cfg.joint_lr, epoch, logs, rng, train_samples, aug_rng,
        epoch_end=joint_epoch_end, lr_decay=True,
    )
    projection_report = None
    if cfg.projection == "project":
        projection_report = project_prototypes(model, train_samples)
    epoch = _run_phase(
        model, images, labels, cfg, "fc", [model.fc_weights], cfg.fc_epochs,
        cfg.fc_lr, epoch, logs, rng, train_samples, aug_rng, lr_decay=True,
    )

    final = logs[-1] if logs else None
    metadata = {
        "epochs_completed": epoch,
        "seed": cfg.seed,
        "train_config": cfg.to_dict(),
        "final_losses": (
            {"crs": final.crs, "clst": final.clst, "sep": final.sep, "w": final.w, "total": final.total}
            if final
            else {}
        ),
    }
    ckpt = checkpoint_from_model(model, metadata)
    ckpt.projection_report = projection_report
    return ckpt, logs


def revive_dead_prototypes(model, train_samples, rng, noise_scale=0.2):
    """Reseed prototypes that no training sample currently selects.

    A prototype is claimed when it is the nearest of its class for at least
    one same-class sample.  Unclaimed prototypes receive no cluster or
    similarity gradient and would otherwise stay frozen at initialisation,
    the same starvation that empty-cluster reseeding fixes in k-means and
    dead-code revival fixes in vector-quantised codebooks.  Each dead
    prototype moves to the same-class comparison row that is worst covered
    (largest distance to the class's live prototypes), plus a jitter that
    keeps it out of the steep near-zero region of the similarity curve.
    Returns the number of prototypes revived.
    """
    cfg = model.config
    images, labels = stack_images(train_samples)
    rows = model.comparison_features(model.extract(images)).data  # (J, N, L)
    protos = model.prototypes.data
    u = cfg.prototypes_per_class
    revived = 0
    for k in range(cfg.num_classes):
        member_idx = np.nonzero(labels == k)[0]
        if member_idx.size == 0:
            continue
        class_protos = protos[k * u : (k + 1) * u]  # (U, L)
        class_rows = rows[member_idx].reshape(-1, rows.shape[2])  # (Jk*N, L)
        # distance of every row to every prototype of the class
        d = np.sum((class_rows[:, None, :] - class_protos[None, :, :]) ** 2, axis=2)
        # a sample claims the prototype nearest to its closest row
        per_sample = d.reshape(member_idx.size, rows.shape[1], u)
        claimed_by = per_sample.min(axis=1).argmin(axis=1)  # (Jk,)
        claimed = np.zeros(u, dtype=bool)
        claimed[claimed_by] = True
        n_inner = rows.shape[1]
        for j in np.nonzero(~claimed)[0]:
            coverage = d[:, claimed].min(axis=1) if claimed.any() else d.min(axis=1)
            target_row = int(np.argmax(coverage))
            target = class_rows[target_row]
            # jitter sized so the source sample ends up nearer to the
            # revived prototype than to any incumbent, making the claim
            # stick, while staying off the steep end of the similarity curve
            source_min = float(per_sample[target_row // n_inner].min())
            sigma = math.sqrt(max(0.25 * source_min, 1e-4) / target.size)
            sigma = min(sigma, noise_scale)
            class_protos[j] = target + rng.normal(0.0, sigma, size=target.shape)
            claimed[j] = True
            d[:, j] = np.sum((class_rows - class_protos[j]) ** 2, axis=1)
            per_sample = d.reshape(member_idx.size, n_inner, u)
            revived += 1
    return revived


def project_prototypes(model, train_samples):
    """Replace each prototype with its nearest same-class target feature.

    Targets are channel feature maps in feature_map mode and full-channel
    position vectors in feature_vector mode, searched exhaustively over the
    training set.  Returns a per-prototype report.
    """
    cfg = model.config
    images, labels = stack_images(train_samples)
    features = model.extract(images)
    rows = model.comparison_features(features).data  # (J, N, L)
    protos = model.prototypes.data
    report = []
    new_protos = protos.copy()
    for k in range(cfg.num_classes):
        member_idx = np.nonzero(labels == k)[0]
        if member_idx.size == 0:
            raise ValueError(f"class {k} has no training samples to project onto")
        candidates = rows[member_idx].reshape(-1, rows.shape[2])  # (Jk*N, L)
        n_inner = rows.shape[1]
        for u in range(cfg.prototypes_per_class):
            p_index = k * cfg.prototypes_per_class + u
            d = np.linalg.norm(candidates - protos[p_index], axis=1)
            best = int(np.argmin(d))
            j_local, inner = divmod(best, n_inner)
            sample = train_samples[member_idx[j_local]]
            new_protos[p_index] = candidates[best]
            report.append(
                {
                    "class": k,
                    "prototype": u,
                    "sample_id": sample.id,
                    "inner_index": inner,
                    "distance": float(d[best]),
                }
            )
    model.prototypes.data = new_protos
    return report


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    metadata: dict
    projection_report: list | None = None


def checkpoint_from_model(model, metadata=None):
    params = {name: p.data.copy() for name, p in model.named_parameters().items()}
    return Checkpoint(config=model.config, params=params, metadata=dict(metadata or {}))


def save_checkpoint(ckpt, path):
    """Write the little-endian binary format with a plain-text header."""
    names = sorted(ckpt.params)
    header = {
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "arrays": [
            {"name": name, "shape": list(ckpt.params[name].shape)} for name in names
        ],
    }
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
    buf.write(json.dumps(header, sort_keys=True).encode())
    buf.write(b"\n")
    for name in names:
        buf.write(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())
    path.write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Read and validate a checkpoint file; lossless inverse of save."""
    raw = path.read_bytes()
    nl1 = raw.find(b"\n")
    if nl1 < 0:
        raise ValueError(f"{path}: truncated before magic line")
    magic_line = raw[:nl1].decode(errors="replace").split()
    if len(magic_line) != 2 or magic_line[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:nl1]!r}")
    if int(magic_line[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {magic_line[1]}")
    nl2 = raw.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[nl1 + 1 : nl2].decode())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt header: {exc}") from exc
    body = raw[nl2 + 1 :]
    expected = sum(
        int(np.prod(a["shape"], dtype=np.int64)) for a in header["arrays"]
    )
    if len(body) != expected * 8:
        raise ValueError(
            f"{path}: payload is {len(body)} bytes, expected {expected * 8} "
            "(truncated or padded file)"
        )
    params = {}
    offset = 0
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset * 8)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += count
    config = ModelConfig.from_dict(header["config"])
    return Checkpoint(config=config, params=params, metadata=header.get("metadata", {}))


def model_from_checkpoint(ckpt):
    """Rebuild a ProtoSoloNet, rejecting any array whose shape disagrees."""
    model = ProtoSoloNet(ckpt.config, seed=0)
    expected = model.named_parameters()
    missing = set(expected) - set(ckpt.params)
    extra = set(ckpt.params) - set(expected)
    if missing or extra:
        raise ValueError(
            f"checkpoint parameter set mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, tensor in expected.items():
        arr = ckpt.params[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"array {name!r} has shape {arr.shape}, config requires {tensor.data.shape}"
            )
        tensor.data = arr.copy()
    return model


def load_model(path):
    return model_from_checkpoint(load_checkpoint(path))
