import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milforge.data import Bag, ConfigurationError
from milforge.metrics import (
    EvalReport,
    UndefinedMetricError,
    evaluate,
    f1_macro,
    f1_per_class,
    level_report,
    ovr_auc,
    roc_auc,
)
from milforge.model import MILModel, ModelConfig


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


class TestRocAuc:
    def test_examples(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
        assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
        assert roc_auc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            roc_auc([0.1], [0, 1])

    def test_500_random_cases_equal_brute_force_exactly(self):
        rng = np.random.default_rng(7)
        done = 0
        while done < 500:
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                continue
            # Coarse grid so ties are common.
            scores = rng.integers(0, max(2, n // 4), n) / 8.0
            assert roc_auc(scores, labels) == pairwise_auc(scores.tolist(), labels.tolist())
            done += 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(-40, 40), st.booleans()), min_size=2, max_size=60))
    def test_monotone_invariance(self, pairs):
        s = np.array([p[0] for p in pairs]) / 8.0
        y = np.array([p[1] for p in pairs])
        if y.all() or not y.any():
            return
        assert roc_auc(np.exp(s), y) == roc_auc(s, y)


class TestF1:
    def test_perfect(self):
        assert f1_macro([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_single_predicted_class(self):
        assert f1_macro([1, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx(1 / 3)

    def test_absent_class_contributes_zero(self):
        with pytest.warns(UserWarning, match="class 2"):
            per = f1_per_class([0, 1], [0, 1], 3)
        assert per.tolist() == [1.0, 1.0, 0.0]


class TestReports:
    def test_macro_equals_mean_of_per_class(self, rng):
        scores = rng.uniform(size=(50, 4))
        truth = rng.integers(0, 4, 50)
        rep = level_report(scores, truth, 4)
        assert abs(rep.auc - np.mean(rep.per_class_auc)) <= 1e-9
        assert abs(rep.f1 - np.mean(rep.per_class_f1)) <= 1e-9
        assert all(0 <= v <= 1 for v in rep.per_class_auc + rep.per_class_f1)

    def test_binary_macro_equals_positive_class_for_softmax(self, rng):
        p1 = rng.uniform(size=40)
        truth = rng.integers(0, 2, 40)
        auc, per = ovr_auc(np.stack([1 - p1, p1], axis=1), truth, 2)
        assert auc == pytest.approx(roc_auc(p1, truth)) and per[0] == pytest.approx(per[1])

    def test_one_bag_per_class_perfect(self):
        c = 3
        cfg = ModelConfig("clamsb", num_classes=c, feature_dim=c, embed_dim=4, attn_dim=4)
        model = MILModel.init(cfg, seed=0, dtype=np.float64)
        for name in ("fc.b", "attn.bV", "attn.U", "attn.bU", "attn.bW", "head.b"):
            model[name].data[:] = 0
        model["fc.W"].data[:] = 10 * np.eye(4, c)
        model["attn.V"].data[:] = np.eye(4)
        model["attn.W"].data[:] = np.eye(c, 4)
        model["head.W"].data[:] = 5 * np.eye(c, 4)
        bags = [Bag(np.eye(c)[[j]], j, instance_truth=np.array([j]), id=j) for j in range(c)]
        rep = evaluate(model, bags)
        assert (rep.bag_auc, rep.bag_f1, rep.inst_auc, rep.inst_f1) == (1.0, 1.0, 1.0, 1.0)

    def test_instance_level_requires_truth(self):
        cfg = ModelConfig("clamsb", num_classes=2, feature_dim=3, embed_dim=4, attn_dim=2)
        model = MILModel.init(cfg, seed=0)
        bags = [Bag(np.ones((2, 3), np.float32), i % 2, id=i) for i in range(4)]
        with pytest.raises(ConfigurationError):
            evaluate(model, bags, level="instance")
        assert evaluate(model, bags).instance is None

    def test_deterministic_and_flat(self, rng):
        cfg = ModelConfig("clamsb", num_classes=2, feature_dim=3, embed_dim=4, attn_dim=2)
        model = MILModel.init(cfg, seed=0)
        bags = [
            Bag(rng.standard_normal((3, 3)).astype(np.float32), i % 2, instance_truth=np.array([i % 2, 0, 1]), id=i)
            for i in range(6)
        ]
        a, b = evaluate(model, bags), evaluate(model, bags)
        assert a.to_text() == b.to_text()
        flat = a.flat()
        assert list(flat)[:4] == ["bag_auc", "bag_f1", "inst_auc", "inst_f1"]
        assert flat["inst_count"] == 18 and flat["bag_count"] == 6

    def test_eval_report_without_instances(self):
        rep = EvalReport(level_report(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1], 2))
        assert np.isnan(rep.inst_auc) and rep.bag_auc == 1.0


def test_untrained_model_instance_auc_is_chance(mnist_arrays):
    from milforge.data import synth_mnist_bags

    bags = synth_mnist_bags(*mnist_arrays, 300, seed=7)
    model = MILModel.init(ModelConfig("clamsb", num_classes=4, feature_dim=784), seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = evaluate(model, bags)
    assert 0.4 <= rep.inst_auc <= 0.6
