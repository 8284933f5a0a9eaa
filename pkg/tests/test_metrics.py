"""Accuracy, fidelity metrics, precision tables, and compactness."""

import numpy as np
import pytest

from protosolo.data import Sample, stack_images
from protosolo.metrics import (
    accuracy,
    cosine_similarity,
    fidelity,
    format_fidelity,
    format_pr_table,
    jaccard_similarity,
    nearest_targets,
    pearson_correlation,
    precision_table,
    prototype_compactness,
)
from protosolo.model import ModelConfig, ProtoSoloNet

TOY = dict(
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


def toy_model(seed=0, **overrides):
    cfg = ModelConfig(**{**TOY, **overrides})
    return ProtoSoloNet(cfg, seed=seed)


def toy_samples(n=9, size=16, num_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for j in range(n):
        image = rng.uniform(0.0, 1.0, size=(3, size, size))
        mask = np.zeros((size, size), dtype=bool)
        mask[4:12, 4:12] = True
        samples.append(
            Sample(image=image, label=j % num_classes, mask=mask, id=f"s{j:03d}")
        )
    return samples


class TestAccuracy:
    def test_matches_manual_count(self):
        model = toy_model()
        samples = toy_samples(9)
        images, labels = stack_images(samples)
        predictions = model.predict(images)
        expected = np.mean(predictions == labels) * 100.0
        assert accuracy(model, samples) == pytest.approx(expected)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            accuracy(toy_model(), [])


class TestPairMetrics:
    def test_cosine_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=8), rng.normal(size=8)
        expected = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cosine_similarity(a, b) == pytest.approx(expected)
        assert cosine_similarity(a, a) == pytest.approx(1.0)
        assert cosine_similarity(a, -a) == pytest.approx(-1.0)
        assert cosine_similarity(a, np.zeros(8)) is None

    def test_pearson_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=16), rng.normal(size=16)
        expected = np.corrcoef(a, b)[0, 1]
        assert pearson_correlation(a, b) == pytest.approx(expected)
        # correlation ignores affine shifts of either argument
        assert pearson_correlation(a + 5.0, 2.0 * b) == pytest.approx(expected)
        assert pearson_correlation(a, np.full(16, 3.0)) is None

    def test_jaccard_oracle(self):
        a = np.array([0.0, 1.0, 2.0, 3.0])
        b = np.array([1.0, 1.0, 1.0, 0.0])
        expected = (0.0 + 1.0 + 1.0 + 0.0) / (1.0 + 1.0 + 2.0 + 3.0)
        assert jaccard_similarity(a, b) == pytest.approx(expected)
        assert jaccard_similarity(a, a) == pytest.approx(1.0)

    def test_jaccard_clamps_negatives(self):
        a = np.array([-1.0, 2.0])
        b = np.array([1.0, 2.0])
        # negative entries are treated as zero
        assert jaccard_similarity(a, b) == pytest.approx(2.0 / 3.0)
        assert jaccard_similarity(-a, -b) is None or jaccard_similarity(
            np.array([-1.0, -2.0]), np.array([-3.0, -4.0])
        ) is None

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.normal(size=6)
            b = rng.normal(size=6)
            assert -1.0 - 1e-12 <= cosine_similarity(a, b) <= 1.0 + 1e-12
            assert -1.0 - 1e-12 <= pearson_correlation(a, b) <= 1.0 + 1e-12
            js = jaccard_similarity(np.abs(a), np.abs(b))
            assert 0.0 <= js <= 1.0


class TestNearestTargets:
    def test_brute_force_oracle(self):
        model = toy_model()
        samples = toy_samples(9)
        cfg = model.config
        targets, sample_idx, inner_idx, distances = nearest_targets(model, samples)
        protos = model.prototypes.data
        for k in range(cfg.num_classes):
            for u in range(cfg.prototypes_per_class):
                p = k * cfg.prototypes_per_class + u
                best = None
                for j, s in enumerate(samples):
                    if s.label != k:
                        continue
                    feats = model.extract(s.image[None]).data[0]
                    rows = feats.reshape(cfg.feature_channels, -1)
                    for c in range(rows.shape[0]):
                        d = np.linalg.norm(rows[c] - protos[p])
                        if best is None or d < best[0]:
                            best = (d, j, c, rows[c])
                assert distances[p] == pytest.approx(best[0])
                assert sample_idx[p] == best[1]
                assert inner_idx[p] == best[2]
                assert np.allclose(targets[p], best[3])

    def test_vector_mode_rows_are_positions(self):
        model = toy_model(comparison_mode="feature_vector")
        samples = toy_samples(6)
        targets, _, inner_idx, _ = nearest_targets(model, samples)
        cfg = model.config
        assert targets.shape == (cfg.num_prototypes, cfg.feature_channels)
        assert inner_idx.max() < cfg.feature_height * cfg.feature_width

    def test_missing_class_rejected(self):
        model = toy_model()
        samples = [s for s in toy_samples(9) if s.label != 1]
        with pytest.raises(ValueError, match="class 1"):
            nearest_targets(model, samples)


class TestFidelity:
    def test_report_consistency(self):
        model = toy_model()
        samples = toy_samples(9)
        report = fidelity(model, samples)
        assert len(report.per_prototype) == model.config.num_prototypes
        for key, mean in (
            ("cos", report.mean_cos),
            ("pcc", report.mean_pcc),
            ("js", report.mean_js),
            ("ed", report.mean_ed),
        ):
            values = [r[key] for r in report.per_prototype if r[key] is not None]
            assert mean == pytest.approx(np.mean(values))

    def test_planted_prototype_is_perfect(self):
        model = toy_model()
        samples = toy_samples(9)
        feats = model.extract(samples[0].image[None]).data[0]
        rows = feats.reshape(model.config.feature_channels, -1)
        # pick a channel with signal; dead channels have an undefined cosine
        row = rows[int(np.argmax(np.linalg.norm(rows, axis=1)))]
        assert np.linalg.norm(row) > 0
        model.prototypes.data[0] = row  # prototype 0 belongs to class 0
        report = fidelity(model, samples)
        entry = report.per_prototype[0]
        assert entry["cos"] == pytest.approx(1.0)
        assert entry["pcc"] == pytest.approx(1.0)
        assert entry["js"] == pytest.approx(1.0)
        assert entry["ed"] == pytest.approx(0.0, abs=1e-9)

    def test_zero_prototype_counted_undefined(self):
        model = toy_model()
        samples = toy_samples(9)
        model.prototypes.data[0] = 0.0
        report = fidelity(model, samples)
        assert report.undefined_count >= 1
        assert report.per_prototype[0]["cos"] is None

    def test_format_smoke(self):
        model = toy_model()
        report = fidelity(model, toy_samples(9))
        text = format_fidelity(report)
        assert "COS" in text and "JS" in text


class TestPrecisionTable:
    def test_values_match_mask_overlap(self):
        model = toy_model()
        samples = toy_samples(9)
        table = precision_table(model, samples)
        assert len(table.per_prototype) == model.config.num_prototypes
        assert all(0.0 <= v <= 1.0 for v in table.per_prototype)
        for t, pct in zip(table.thresholds, table.percentages):
            expected = np.mean(np.asarray(table.per_prototype) > t / 100.0) * 100.0
            assert pct == pytest.approx(expected)

    def test_percentages_monotone_in_threshold(self):
        model = toy_model()
        table = precision_table(model, toy_samples(9))
        assert all(
            a >= b for a, b in zip(table.percentages, table.percentages[1:])
        )

    def test_full_mask_gives_perfect_precision(self):
        model = toy_model()
        samples = toy_samples(9)
        for s in samples:
            s.mask[:] = True
        table = precision_table(model, samples)
        assert all(v == pytest.approx(1.0) for v in table.per_prototype)

    def test_missing_masks_rejected(self):
        model = toy_model()
        samples = toy_samples(9)
        samples[3].mask_missing = True
        with pytest.raises(ValueError, match="mask"):
            precision_table(model, samples)

    def test_format_smoke(self):
        model = toy_model()
        table = precision_table(model, toy_samples(9))
        assert "Pr>10%" in format_pr_table(table)


class TestCompactness:
    def test_one_prototype_per_decision(self):
        cfg = ModelConfig(**TOY)
        assert prototype_compactness(cfg) == 1

    def test_dense_sum_uses_all_class_prototypes(self):
        cfg = ModelConfig(**{**TOY, "aggregation": "dense_sum"})
        assert prototype_compactness(cfg) == cfg.prototypes_per_class
