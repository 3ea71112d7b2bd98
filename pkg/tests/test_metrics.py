"""Ranking metrics, PRO, score-map post-processing, per-object evaluation."""

import numpy as np
import pytest

from dmad import banks as bk
from dmad import features as fs
from dmad import synth
from dmad.enhance import KnowledgeMode
from dmad.errors import ValidationError
from dmad.evaluate import EvalConfig, evaluate
from dmad.learner import AugmentConfig, LossConfig, OptimizerState, TrainConfig, init_model, train
from dmad.metrics import auroc, average_precision, f1max, image_score, pixel_map, pro


# -- independent oracles -------------------------------------------------------


def auroc_pairs(scores, labels):
    """Pair-counting oracle: P(s_pos > s_neg) + half ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_sweep(scores, labels):
    """Threshold-sweep oracle: step integration with per-threshold rescans."""
    thresholds = sorted(set(scores), reverse=True)
    n_pos = sum(labels)
    ap = 0.0
    prev_tp = 0
    for t in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        ap += (tp - prev_tp) * (tp / (tp + fp))
        prev_tp = tp
    return ap / n_pos


def f1_sweep(scores, labels):
    """Threshold-sweep oracle with per-threshold rescans."""
    n_pos = sum(labels)
    best = 0.0
    for t in sorted(set(scores)):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        fn = n_pos - tp
        best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


class TestImageScore:
    def test_mean_of_top_five(self):
        assert image_score([1, 2, 3, 4, 5, 6]) == 4.0

    def test_fewer_than_five(self):
        assert image_score([1, 2, 3]) == 2.0

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=100)
        assert image_score(scores) == pytest.approx(np.sort(scores)[-5:].mean(), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=30)
        assert image_score(scores) == image_score(rng.permutation(scores))

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            image_score([])


class TestPixelMap:
    def test_constant_preserved_exactly(self):
        out = pixel_map(np.full((3, 4), 0.7), 12, 16, blur_sigma=2.0)
        assert (out == 0.7).all()

    def test_identity_when_same_dims_no_blur(self):
        grid = np.random.default_rng(2).normal(size=(4, 4))
        out = pixel_map(grid, 4, 4, blur_sigma=0.0)
        assert np.array_equal(out, grid)

    def test_blur_preserves_mass_of_hot_patch(self):
        grid = np.zeros((8, 8))
        grid[3, 4] = 1.0
        up = pixel_map(grid, 32, 32, blur_sigma=0.0)
        blurred = pixel_map(grid, 32, 32, blur_sigma=2.0)
        assert abs(blurred.sum() - up.sum()) <= 1e-3 * abs(up.sum())

    def test_smaller_target_rejected(self):
        with pytest.raises(ValidationError):
            pixel_map(np.zeros((4, 4)), 2, 8, blur_sigma=0.0)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValidationError):
            pixel_map(np.zeros((2, 2)), 4, 4, blur_sigma=-1.0)


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc([0.1, 0.9], [0, 1]) == 1.0

    def test_worked_example(self):
        assert auroc([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1]) == pytest.approx(0.75)

    def test_all_ties_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_complement_identity(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=20)  # continuous, ties have measure zero
        labels = rng.integers(0, 2, size=20)
        if labels.sum() in (0, 20):
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            auroc([0.1, 0.2], [1, 1])


class TestAveragePrecision:
    def test_top_hit(self):
        assert average_precision([0.9, 0.1], [1, 0]) == 1.0

    def test_worked_example(self):
        assert average_precision([0.9, 0.5, 0.1], [1, 0, 1]) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_positive_below_negative(self):
        assert average_precision([0.1, 0.9], [1, 0]) == 0.5

    def test_no_positive_rejected(self):
        with pytest.raises(ValidationError):
            average_precision([0.5], [0])


class TestF1Max:
    def test_separable(self):
        assert f1max([0.9, 0.1], [1, 0]) == 1.0

    def test_three_threshold_enumeration(self):
        assert f1max([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(0.8)

    def test_all_positive(self):
        assert f1max([0.3, 0.1, 0.9], [1, 1, 1]) == 1.0


class TestMetricOracles:
    def test_match_exhaustive_sweeps(self):
        rng = np.random.default_rng(4)
        for trial in range(120):
            n = int(rng.integers(2, 65))
            # mix continuous and heavily tied score sets
            if trial % 3 == 0:
                scores = rng.integers(0, 5, size=n).astype(float)
            else:
                scores = rng.normal(size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[int(rng.integers(n))] = 1
            if labels.sum() == n:
                labels[int(rng.integers(n))] = 0
            s, y = list(scores), list(labels)
            assert auroc(scores, labels) == pytest.approx(auroc_pairs(s, y), abs=1e-9)
            assert average_precision(scores, labels) == pytest.approx(ap_sweep(s, y), abs=1e-9)
            assert f1max(scores, labels) == pytest.approx(f1_sweep(s, y), abs=1e-9)

    def test_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        transformed = np.exp(scores) * 3.0 + 1.0
        assert auroc(scores, labels) == pytest.approx(auroc(transformed, labels), abs=1e-12)
        assert average_precision(scores, labels) == pytest.approx(
            average_precision(transformed, labels), abs=1e-12
        )
        assert f1max(scores, labels) == pytest.approx(f1max(transformed, labels), abs=1e-12)


class TestPro:
    def test_separable_region_full_score(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:4, 2:5] = 1
        amap = np.where(mask > 0, 10.0, 0.0) + np.arange(64).reshape(8, 8) * 1e-6
        assert pro([amap], [mask]) == pytest.approx(1.0, abs=1e-6)

    def test_constant_scores_hand_traced(self):
        # one distinct threshold: curve is (0,0) -> (1,1); clipped at 0.3 the
        # area is 0.5*0.3*0.3 and normalization by 0.3 gives 0.15
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1, 1] = 1
        amap = np.full((4, 4), 2.5)
        assert pro([amap], [mask], fpr_limit=0.3) == pytest.approx(0.15)

    def test_two_regions_one_missed(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0:2, 0:2] = 1   # region A
        mask[5:7, 5:7] = 1   # region B
        amap = np.zeros((8, 8))
        amap[0:2, 0:2] = 10.0          # A found immediately
        amap[5:7, 5:7] = -5.0          # B ranked below every normal pixel
        # normal pixels all score 0: curve holds mean overlap 0.5 from FPR 0 to 1
        assert pro([amap], [mask], fpr_limit=0.3) == pytest.approx(0.5)

    def test_no_regions_rejected(self):
        with pytest.raises(ValidationError):
            pro([np.zeros((4, 4))], [np.zeros((4, 4), dtype=np.uint8)])

    def test_connectivity_matters(self):
        # diagonal link merges regions of unequal size under 8-connectivity only
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1, 1] = 1
        mask[2, 2] = 1
        mask[2, 3] = 1
        amap = np.zeros((4, 4))
        amap[1, 1] = 5.0
        v8 = pro([amap], [mask], connectivity=8)
        v4 = pro([amap], [mask], connectivity=4)
        assert v8 != v4


@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory):
        tmp = tmp_path_factory.mktemp("eval")
        spec = synth.SynthSpec(
            num_objects=2, train_normal=10, test_normal=4, test_anomalous=4,
            h0=4, w0=4, c=6, outlier_images=3, seed=21,
        )
        res = synth.generate(spec, tmp)
        train_m = fs.load_manifest(res.train_manifest_path, "train")
        test_m = fs.load_manifest(res.test_manifest_path, "test")
        coreset = bk.CoresetConfig(retention=0.1, seed=1)
        normal = bk.build_normal_bank(train_m, coreset)
        outliers = synth.load_outlier_grids(res.outlier_dir)
        m_o = bk.build_pseudo_outlier_bank(outliers, train_m, bk.FusionConfig(pair_seed=2), coreset)
        abnormal = bk.compose_abnormal_bank("unsupervised", m_o)
        dual = bk.DualMemoryBank(normal, abnormal, "unsupervised")
        model = init_model(normal.c, KnowledgeMode(use_attention=True), seed=3)
        train(
            train_m, dual, model,
            LossConfig(lambda1=1.0, lambda2=0.0),
            AugmentConfig(noise_std=0.1, seed=4),
            TrainConfig(epochs=5, batch_size=2, seed=5),
            optimizer=OptimizerState(lr={"mlp": 2e-3, "attn_proj": 1e-3}),
        )
        return test_m, model, normal, abnormal


class TestEvaluate:
    def test_separable_dataset_scores_high(self, eval_setup):
        test_m, model, normal, abnormal = eval_setup
        report = evaluate(test_m, model, normal, abnormal, EvalConfig(blur_sigma=2.0))
        for obj, row in report.per_object.items():
            assert row["image_auroc"] == pytest.approx(1.0)

    def test_metrics_in_range(self, eval_setup):
        test_m, model, normal, abnormal = eval_setup
        report = evaluate(test_m, model, normal, abnormal, EvalConfig(blur_sigma=2.0))
        for row in list(report.per_object.values()) + [report.aggregate]:
            for value in row.values():
                assert value is None or 0.0 <= value <= 1.0

    def test_shuffled_manifest_gives_identical_report(self, eval_setup):
        test_m, model, normal, abnormal = eval_setup
        cfg = EvalConfig(blur_sigma=2.0)
        r1 = evaluate(test_m, model, normal, abnormal, cfg)
        shuffled = fs.DatasetManifest(
            entries=list(np.random.default_rng(9).permutation(np.array(test_m.entries, dtype=object))),
            role="test",
        )
        r2 = evaluate(shuffled, model, normal, abnormal, cfg)
        assert r1.per_object == r2.per_object
        assert r1.aggregate == r2.aggregate

    def test_single_class_object_marks_metrics_absent(self, eval_setup, tmp_path):
        test_m, model, normal, abnormal = eval_setup
        only_normals = fs.DatasetManifest(
            entries=[e for e in test_m.entries if e.label == "normal"], role="test"
        )
        report = evaluate(only_normals, model, normal, abnormal, EvalConfig(blur_sigma=2.0))
        for row in report.per_object.values():
            assert row["image_auroc"] is None
        assert report.aggregate["image_auroc"] is None

    def test_threads_do_not_change_results(self, eval_setup):
        test_m, model, normal, abnormal = eval_setup
        r1 = evaluate(test_m, model, normal, abnormal, EvalConfig(blur_sigma=2.0, threads=1))
        r2 = evaluate(test_m, model, normal, abnormal, EvalConfig(blur_sigma=2.0, threads=4))
        assert r1.per_object == r2.per_object
