"""Exit checks for the package: one printed PASS/FAIL line per criterion.

These are the binding end-to-end properties: exact-oracle equivalence of
the scoring/loss/explanation paths, finite-difference gradient fidelity,
and the structural/metric outcomes of the default desk runs (final-layer
sparsity, prototype fidelity, projection orderings, explanation grounding,
accuracy, and reproducible persistence).
"""

import time

import numpy as np
import pytest

from protosolo import autodiff as ad
from protosolo.data import Sample, stack_images
from protosolo.explain import explain_decision, explain_prototype
from protosolo.gradcheck import max_relative_grad_error, toy_setup
from protosolo.losses import cluster_loss, separation_loss
from protosolo.metrics import (
    accuracy,
    fidelity,
    precision_table,
    prototype_compactness,
)
from protosolo.model import ModelConfig, ProtoSoloNet, prototype_scores
from protosolo.training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

from conftest import DESK_SEEDS


def _verdict(number, name, passed, detail):
    line = f"[{number}] {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    assert passed, line


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------


def test_gradient_fidelity():
    started = time.monotonic()
    model, images, labels = toy_setup(seed=0)
    err, name = max_relative_grad_error(model, images, labels)
    elapsed = time.monotonic() - started
    _verdict(
        1,
        "gradient fidelity",
        err < 1e-4 and elapsed < 60.0,
        f"max rel err {err:.3e} at {name}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. oracle equivalence on toy instances
# ---------------------------------------------------------------------------


def _toy_model_and_samples():
    config = ModelConfig(
        num_classes=3,
        prototypes_per_class=2,
        image_size=16,
        backbone_channels=(4, 6),
        backbone_kernels=(3, 3),
        backbone_strides=(2, 2),
        shaping_channels=(5, 4),
        feature_height=3,
        feature_width=3,
    )
    model = ProtoSoloNet(config, seed=7)
    rng = np.random.default_rng(7)
    samples = []
    for j in range(5):
        image = rng.uniform(0.0, 1.0, size=(3, 16, 16))
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 4:12] = True
        samples.append(Sample(image=image, label=j % 3, mask=mask, id=f"t{j}"))
    return model, samples


def test_oracle_equivalence():
    started = time.monotonic()
    model, samples = _toy_model_and_samples()
    cfg = model.config
    images, labels = stack_images(samples)
    protos = model.prototypes.data
    features = model.extract(images).data  # (B, C1, H1, W1)
    rows = features.reshape(len(samples), cfg.feature_channels, -1)  # channel rows
    failures = []

    # prototype_scores: loop over prototypes and channel rows
    for j in range(len(samples)):
        table = prototype_scores(features[j], model.prototypes, cfg)
        for p in range(cfg.num_prototypes):
            dists = [
                float(np.sum((rows[j, c] - protos[p]) ** 2))
                for c in range(cfg.feature_channels)
            ]
            dmin = min(dists)
            expected = np.log(dmin + 1.0) - np.log(dmin + cfg.epsilon)
            got = table.scores[p // cfg.prototypes_per_class, p % cfg.prototypes_per_class]
            if not np.isclose(got, expected, rtol=0, atol=1e-12):
                failures.append(f"scores p{p}")
            if table.arg_inner.ravel()[p] != int(np.argmin(dists)):
                failures.append(f"arg_inner p{p}")

    # cluster / separation losses: per-sample min loops
    comparison = ad.Tensor(
        np.transpose(rows, (0, 1, 2)), requires_grad=False
    )  # (B, C1, L) channel rows
    clst = cluster_loss(comparison, labels, model.prototypes, cfg.num_classes).item()
    sep = separation_loss(comparison, labels, model.prototypes, cfg.num_classes).item()
    clst_oracle, sep_oracle = [], []
    for j, s in enumerate(samples):
        own, het = [], []
        for p in range(cfg.num_prototypes):
            d = min(
                float(np.sum((rows[j, c] - protos[p]) ** 2))
                for c in range(cfg.feature_channels)
            )
            (own if p // cfg.prototypes_per_class == s.label else het).append(d)
        clst_oracle.append(min(own))
        sep_oracle.append(min(het))
    if not np.isclose(clst, np.mean(clst_oracle), rtol=0, atol=1e-12):
        failures.append("cluster_loss")
    if not np.isclose(sep, -np.mean(sep_oracle), rtol=0, atol=1e-12):
        failures.append("separation_loss")

    # explain_prototype: exhaustive scan over same-class samples and rows
    for k in range(cfg.num_classes):
        for u in range(cfg.prototypes_per_class):
            overlay, j_best, inner = explain_prototype(k, u, model, samples)
            p = k * cfg.prototypes_per_class + u
            best = min(
                (float(np.linalg.norm(rows[j, c] - protos[p])), j, c)
                for j, s in enumerate(samples)
                if s.label == k
                for c in range(cfg.feature_channels)
            )
            if (j_best, inner) != (best[1], best[2]):
                failures.append(f"explain_prototype {k}/{u}")

    # explain_decision: per-class argmax bookkeeping against the loops
    for j, s in enumerate(samples):
        record = explain_decision(s, model, train_samples=samples)
        table = model.score_table(s.image)
        logits = table.class_max @ model.fc_weights.data.T
        if record.predicted_class != int(np.argmax(logits)):
            failures.append(f"explain_decision predict {j}")
        for entry in record.entries:
            k = entry.class_index
            if entry.prototype_index != int(np.argmax(table.scores[k])):
                failures.append(f"explain_decision proto {j}/{k}")
            p = k * cfg.prototypes_per_class + entry.prototype_index
            d = [
                float(np.linalg.norm(rows[j, c] - protos[p]))
                for c in range(cfg.feature_channels)
            ]
            if entry.channel_index != int(np.argmin(d)):
                failures.append(f"explain_decision channel {j}/{k}")

    elapsed = time.monotonic() - started
    _verdict(
        2,
        "oracle equivalence",
        not failures and elapsed < 10.0,
        f"{len(failures)} mismatches {failures[:3]}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. final-layer structure after the default desk run
# ---------------------------------------------------------------------------


def test_fc_structure(desk_runs):
    run = desk_runs[0]
    w = run["model"].fc_weights.data
    off = np.abs(w - np.diag(np.diag(w))).max()
    diag_min = np.diag(w).min()
    _verdict(
        3,
        "final-layer structure",
        off < 5e-3 and diag_min > 1.0 and run["elapsed"] < 900.0,
        f"max off-diag {off:.2e}, min diag {diag_min:.2f}, {run['elapsed']:.0f}s",
    )


# ---------------------------------------------------------------------------
# 4. prototype fidelity without projection
# ---------------------------------------------------------------------------


def test_nonprojection_fidelity(desk_data, desk_runs):
    train_samples, _ = desk_data
    report = fidelity(desk_runs[0]["model"], train_samples)
    ok = (
        report.mean_cos >= 0.95
        and report.mean_pcc >= 0.95
        and report.mean_js >= 0.90
        and report.mean_ed <= 0.1
    )
    _verdict(
        4,
        "non-projection fidelity",
        ok,
        f"COS {report.mean_cos:.3f}, PCC {report.mean_pcc:.3f}, "
        f"JS {report.mean_js:.3f}, ED {report.mean_ed:.4f}",
    )


# ---------------------------------------------------------------------------
# 5. projection-vs-not ordering (accuracy and precision table)
# ---------------------------------------------------------------------------


def test_projection_ordering(desk_data, desk_runs, projection_runs):
    train_samples, test_samples = desk_data
    np_acc = np.mean([accuracy(desk_runs[s]["model"], test_samples) for s in DESK_SEEDS])
    p_acc = np.mean(
        [accuracy(projection_runs[s]["model"], test_samples) for s in DESK_SEEDS]
    )
    np_pr = np.mean(
        [precision_table(desk_runs[s]["model"], train_samples).percentages for s in DESK_SEEDS],
        axis=0,
    )
    p_pr = np.mean(
        [
            precision_table(projection_runs[s]["model"], train_samples).percentages
            for s in DESK_SEEDS
        ],
        axis=0,
    )
    acc_ok = np_acc >= p_acc - 0.5
    pr_ok = bool(np.all(np_pr >= p_pr))
    _verdict(
        5,
        "projection ordering",
        acc_ok and pr_ok,
        f"acc {np_acc:.2f} (no projection) vs {p_acc:.2f} (projection); "
        f"Pr {np.round(np_pr, 1).tolist()} vs {np.round(p_pr, 1).tolist()}",
    )


# ---------------------------------------------------------------------------
# 6. ablation ordering
# ---------------------------------------------------------------------------


def test_ablation_ordering(desk_data, desk_runs, projection_runs, vector_runs):
    _, test_samples = desk_data
    np_acc = np.mean([accuracy(desk_runs[s]["model"], test_samples) for s in DESK_SEEDS])
    p_acc = np.mean(
        [accuracy(projection_runs[s]["model"], test_samples) for s in DESK_SEEDS]
    )
    vec_acc = np.mean(
        [accuracy(vector_runs[s]["model"], test_samples) for s in DESK_SEEDS]
    )
    ok = np_acc >= p_acc and p_acc - vec_acc >= 1.0
    _verdict(
        6,
        "ablation ordering",
        ok,
        f"map/no-projection {np_acc:.2f} >= map/projection {p_acc:.2f}; "
        f"map {p_acc:.2f} vs vector {vec_acc:.2f} (margin {p_acc - vec_acc:.2f})",
    )


# ---------------------------------------------------------------------------
# 7. prototype compactness, no training involved
# ---------------------------------------------------------------------------


def test_compactness():
    single = prototype_compactness(ModelConfig())
    dense = prototype_compactness(ModelConfig(aggregation="dense_sum"))
    u = ModelConfig().prototypes_per_class
    _verdict(
        7,
        "compactness",
        single == 1 and dense == u,
        f"single_activation {single}, dense_sum {dense} (U={u})",
    )


# ---------------------------------------------------------------------------
# 8. explanation grounding against foreground masks
# ---------------------------------------------------------------------------


def test_explanation_grounding(desk_data, desk_runs):
    train_samples, _ = desk_data
    table = precision_table(desk_runs[0]["model"], train_samples, kappa=95.0)
    share = table.percentages[0]  # % of prototypes with Pr > 10%
    _verdict(
        8,
        "explanation grounding",
        share >= 70.0,
        f"{share:.1f}% of prototypes exceed 10% foreground precision",
    )


# ---------------------------------------------------------------------------
# 9. test accuracy across seeds
# ---------------------------------------------------------------------------


def test_classification_sanity(desk_data, desk_runs):
    _, test_samples = desk_data
    accs = {s: accuracy(desk_runs[s]["model"], test_samples) for s in DESK_SEEDS}
    _verdict(
        9,
        "classification sanity",
        all(a >= 95.0 for a in accs.values()),
        "test acc " + ", ".join(f"seed {s}: {a:.1f}%" for s, a in accs.items()),
    )


# ---------------------------------------------------------------------------
# 10. determinism and persistence
# ---------------------------------------------------------------------------


def test_determinism_persistence(tmp_path):
    config = ModelConfig(
        num_classes=2,
        prototypes_per_class=2,
        image_size=16,
        backbone_channels=(4, 6),
        backbone_kernels=(3, 3),
        backbone_strides=(2, 2),
        shaping_channels=(5, 4),
        feature_height=3,
        feature_width=3,
    )
    rng = np.random.default_rng(11)
    mask = np.ones((16, 16), dtype=bool)
    samples = [
        Sample(
            image=rng.uniform(0.0, 1.0, size=(3, 16, 16)),
            label=j % 2,
            mask=mask,
            id=f"d{j}",
        )
        for j in range(8)
    ]
    train_config = TrainConfig(
        warm_epochs=1, joint_epochs=2, fc_epochs=1, batch_size=4, seed=3
    )
    blobs = []
    for _ in range(2):
        model = ProtoSoloNet(config, seed=3)
        ckpt, _ = train(samples, model, train_config)
        path = tmp_path / f"run{len(blobs)}.ckpt"
        save_checkpoint(ckpt, path)
        blobs.append(path.read_bytes())
    identical = blobs[0] == blobs[1]

    # lossless round-trip
    path = tmp_path / "run0.ckpt"
    loaded = load_checkpoint(path)
    model = ProtoSoloNet(config, seed=3)
    ckpt, _ = train(samples, model, train_config)
    round_trip = all(
        np.array_equal(loaded.params[name], array)
        for name, array in ckpt.params.items()
    ) and set(loaded.params) == set(ckpt.params)

    # truncation rejected
    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blobs[0][: len(blobs[0]) // 2])
    try:
        load_checkpoint(truncated)
        rejected = False
    except ValueError:
        rejected = True

    _verdict(
        10,
        "determinism and persistence",
        identical and round_trip and rejected,
        f"byte-identical={identical}, round-trip={round_trip}, "
        f"truncation rejected={rejected}",
    )
