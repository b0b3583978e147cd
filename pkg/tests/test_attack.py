from dataclasses import dataclass

import numpy as np
import pytest

from advids.attack import (
    AdversarialExample, attack_batch, fgsm_generate, input_gradient, input_gradients, load_adversarial_set,
    matrix_validity, perturbation_stats, save_adversarial_set, stack_perturbed, validity_analysis, violation_flags,
)
from advids.config import AttackConfig
from advids.data import APPLICATION, APPLICATION_WIDTH, NETWORK, NETWORK_WIDTH
from advids.exceptions import DimensionError, StatsError
from advids.metrics import classification_report, confusion_matrix
from advids.models import ClassifierConfig, Model, build_classifier
from advids.numerics import Linear, LogSoftmax, Rng, build_layer

TOL = 1e-12


@dataclass
class LogisticConfig:
    """两类线性 + log-softmax 的玩具模型"""
    input_width: int = 2

    kind = "logistic"

    def layer_specs(self):
        return [Linear(2, 2), LogSoftmax()]


def _logistic(w: float) -> Model:
    config = LogisticConfig()
    layers = [build_layer(spec, Rng(0)) for spec in config.layer_specs()]
    layers[0].params['weight'][...] = [[0.0, 0.0], [w, -w]]
    layers[0].params['bias'][...] = 0.0
    return Model(config, layers)


def _small_classifier(width: int, seed: int = 3) -> Model:
    return build_classifier(ClassifierConfig(input_width=width, channels=(4, 2), hidden_units=6), Rng(seed))


def _loss(model: Model, x: np.ndarray, y: int) -> float:
    return float(-model(x)[y])


class TestGradient:
    """损失对输入的梯度"""

    def test_matches_finite_difference(self):
        model = _small_classifier(7)
        x = Rng(4).uniform(0.1, 0.9, 7)
        grad = input_gradient(model, x, 2)
        h = 1e-6
        numeric = np.zeros(7)
        for i in range(7):
            plus, minus = x.copy(), x.copy()
            plus[i] += h
            minus[i] -= h
            numeric[i] = (_loss(model, plus, 2) - _loss(model, minus, 2)) / (2 * h)
        assert np.linalg.norm(grad - numeric) / np.linalg.norm(numeric) < 1e-4

    def test_leaves_parameter_grads_clean(self):
        model = _small_classifier(7)
        input_gradient(model, np.full(7, 0.5), 0)
        assert all(not np.any(g) for layer in model.layers for g in layer.grads.values())

    def test_zero_first_conv_gives_zero_gradient(self):
        model = _small_classifier(7)
        model.layers[0].params['weight'][...] = 0.0
        x = np.full(7, 0.3)
        assert not np.any(input_gradient(model, x, 1))
        example = fgsm_generate(model, x, 1, AttackConfig(epsilon=0.1))
        assert np.array_equal(example.perturbed, x)

    def test_batched_matches_single(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        _, _, test = sample_split
        features, labels = test.features[:4], test.labels[:4].astype(np.int64)
        batched = input_gradients(model, features, labels)
        for i in range(4):
            np.testing.assert_allclose(batched[i], input_gradient(model, features[i], int(labels[i])),
                                       rtol=1e-10, atol=TOL)

    def test_wrong_width(self):
        with pytest.raises(DimensionError):
            input_gradient(_small_classifier(7), np.zeros(6), 0)


class TestFgsm:
    """FGSM 生成"""

    def test_logistic_direction(self):
        """真实类别为 1 时，扰动方向与类别 1 的权重符号相反"""
        example = fgsm_generate(_logistic(2.0), np.array([0.5, 0.5]), 1, AttackConfig(epsilon=0.1))
        np.testing.assert_allclose(example.perturbed, [0.4, 0.6], atol=TOL)
        np.testing.assert_allclose(example.delta, [-0.1, 0.1], atol=TOL)
        assert example.true_label == 1

    def test_epsilon_zero_is_identity(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        _, _, test = sample_split
        result = attack_batch(model, test, AttackConfig(epsilon=0.0, filter_successful=False))
        for example in result.examples:
            assert np.array_equal(example.perturbed, example.original)
            assert example.adv_pred == example.clean_pred
        assert result.summary.adversarial_accuracy == result.summary.clean_accuracy

    def test_perturbation_is_plus_minus_epsilon(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        _, _, test = sample_split
        epsilon = 0.01
        result = attack_batch(model, test, AttackConfig(epsilon=epsilon, filter_successful=False))
        assert result.summary.kept == result.summary.total == len(test)
        delta = np.abs(np.stack([e.delta for e in result.examples]))
        assert np.all((delta < TOL) | (np.abs(delta - epsilon) < TOL))

    def test_group_statistics(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        schema, _, test = sample_split
        epsilon = 0.01
        result = attack_batch(model, test, AttackConfig(epsilon=epsilon, filter_successful=False))
        stats = perturbation_stats(result.examples, schema)
        application, network = stats.groups[APPLICATION], stats.groups[NETWORK]
        assert application.size == APPLICATION_WIDTH and network.size == NETWORK_WIDTH
        assert application.max_perturbed_count <= APPLICATION_WIDTH
        assert network.max_perturbed_count <= NETWORK_WIDTH
        for group in (application, network):
            assert group.mean_sq_distance == pytest.approx(epsilon ** 2 * group.mean_perturbed_count, rel=1e-9)
            assert group.max_linf <= epsilon + TOL

    def test_filter_keeps_only_successes(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        _, _, test = sample_split
        result = attack_batch(model, test, AttackConfig(epsilon=0.1))
        assert all(e.adv_pred != e.true_label for e in result.examples)
        assert result.summary.kept == round(result.summary.success_rate * result.summary.total)
        order = [e.original.tobytes() for e in result.examples]
        expected = [row.tobytes() for row, e in zip(test.features, attack_batch(
            model, test, AttackConfig(epsilon=0.1, filter_successful=False)).examples) if e.success]
        assert order == expected

    def test_perturbed_count_matches_nonzero_gradient(self, trained_classifier, sample_split):
        """每个样本被扰动的特征数等于 ∂J/∂x 非零分量的个数（按分组）"""
        model, _ = trained_classifier
        schema, _, test = sample_split
        subset = test.subset(np.arange(8))
        grads = input_gradients(model, subset.features, subset.labels.astype(np.int64))
        result = attack_batch(model, subset, AttackConfig(filter_successful=False))
        for grad, example in zip(grads, result.examples):
            stats = perturbation_stats([example], schema)
            for group in (APPLICATION, NETWORK):
                indices = schema.group_indices(group)
                assert stats.groups[group].max_perturbed_count == np.count_nonzero(grad[indices])
            assert np.count_nonzero(example.delta) == np.count_nonzero(grad)

    def test_default_attack_collapses_accuracy(self, adversarial_test):
        """默认 ε=0.01：干净准确率 >= 0.9，对抗准确率 <= 0.2"""
        summary = adversarial_test.summary
        assert summary.clean_accuracy >= 0.9
        assert summary.adversarial_accuracy <= 0.20
        assert summary.kept == len(adversarial_test.examples) >= 1

    def test_filtered_set_accuracy_is_zero(self, adversarial_test):
        examples = adversarial_test.examples
        report = classification_report(confusion_matrix([e.true_label for e in examples],
                                                        [e.adv_pred for e in examples]))
        assert report.accuracy == 0.0

    def test_full_label_arrays(self, adversarial_test):
        """true_labels / adv_preds 覆盖筛选前的全部样本"""
        summary = adversarial_test.summary
        assert adversarial_test.true_labels.shape == adversarial_test.adv_preds.shape == (summary.total,)
        correct = np.mean(adversarial_test.true_labels == adversarial_test.adv_preds)
        assert correct == pytest.approx(summary.adversarial_accuracy)

    def test_fgsm_set_mostly_out_of_range(self, trained_classifier, sample_split):
        """ε=0.01 的 FGSM 样本中至少 95% 在每个分组内都有越出 [0,1] 的特征"""
        model, _ = trained_classifier
        schema, _, test = sample_split
        result = attack_batch(model, test, AttackConfig(filter_successful=False))
        report = validity_analysis(result.examples, schema)
        for group in report.groups.values():
            assert group.pct_invalid_range >= 95.0, group

    def test_validity_filter(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        schema, _, test = sample_split
        result = attack_batch(model, test, AttackConfig(epsilon=0.01, filter_successful=False, filter_valid=True))
        if result.examples:
            report = validity_analysis(result.examples, schema)
            for group in report.groups.values():
                assert group.pct_invalid_range == group.pct_invalid_binary == 0.0
                assert group.pct_invalid_class_belonging == 0.0

    def test_clip(self, trained_classifier, sample_split):
        model, _ = trained_classifier
        _, _, test = sample_split
        result = attack_batch(model, test, AttackConfig(epsilon=0.2, filter_successful=False, clip=True))
        perturbed = stack_perturbed(result.examples, test.schema.width)
        assert perturbed.min() >= 0.0 and perturbed.max() <= 1.0


def _example(original, perturbed, true_label=0, adv_pred=1):
    return AdversarialExample(np.asarray(original, dtype=np.float64), np.asarray(perturbed, dtype=np.float64),
                              true_label, true_label, adv_pred)


class TestAnalysis:
    """扰动统计与有效性分析"""

    BASE = [0.5, 1.0, 0.0, 1.0, 0.0, 0.2, 0.0]

    def test_perturbation_example(self, small_schema):
        perturbed = list(self.BASE)
        perturbed[0] += 0.1
        perturbed[1] -= 0.1
        stats = perturbation_stats([_example(self.BASE, perturbed)], small_schema)
        application = stats.groups[APPLICATION]
        assert application.mean_perturbed_count == 2 and application.max_perturbed_count == 2
        assert application.mean_sq_distance == pytest.approx(0.02)
        assert application.max_l2 == pytest.approx(np.sqrt(0.02))
        assert application.max_linf == pytest.approx(0.1)
        assert stats.groups[NETWORK].max_perturbed_count == 0
        assert stats.groups[NETWORK].mean_sq_distance == 0.0

    def test_binary_half_invalid(self, small_schema):
        near_binary = list(self.BASE)
        near_binary[1] = 0.99
        report = matrix_validity(np.array([self.BASE, near_binary]), small_schema)
        assert report.count == 2
        assert report.groups[APPLICATION].pct_invalid_binary == 50.0
        assert report.groups[APPLICATION].pct_invalid_range == 0.0
        assert report.groups[APPLICATION].pct_invalid_class_belonging == 0.0
        assert report.groups[NETWORK].pct_invalid_binary == 0.0

    def test_perturbed_binary_flagged(self, small_schema):
        """二值列被 ±ε 扰动后该行标记为 invalid_binary，未扰动的分组不受影响"""
        perturbed = np.array([self.BASE, self.BASE])
        perturbed[0, 1] -= 0.01
        perturbed[1, 6] -= 0.01
        flags = violation_flags(perturbed, small_schema)
        assert flags[APPLICATION]['binary'].tolist() == [True, False]
        assert flags[NETWORK]['binary'].tolist() == [False, True]
        assert flags[NETWORK]['range'].tolist() == [False, True]

    def test_range_and_class_belonging(self, small_schema):
        no_category = list(self.BASE)
        no_category[3] = 0.0
        outside = list(self.BASE)
        outside[5] = 1.01
        two_categories = list(self.BASE)
        two_categories[2] = 1.0
        report = matrix_validity(np.array([no_category, outside, two_categories, self.BASE]), small_schema)
        assert report.groups[APPLICATION].pct_invalid_class_belonging == 50.0
        assert report.groups[NETWORK].pct_invalid_range == 25.0
        assert report.groups[APPLICATION].pct_invalid_range == 0.0

    def test_empty_sets(self, small_schema):
        with pytest.raises(StatsError):
            perturbation_stats([], small_schema)
        with pytest.raises(StatsError):
            validity_analysis([], small_schema)
        with pytest.raises(StatsError):
            matrix_validity(np.zeros((0, small_schema.width)), small_schema)

    def test_width_mismatch(self, small_schema):
        with pytest.raises(DimensionError):
            matrix_validity(np.zeros((1, small_schema.width + 1)), small_schema)


class TestPersistence:
    """对抗样本 CSV"""

    def test_save_and_load(self, small_schema, tmp_path):
        rng = Rng(9)
        examples = [_example(rng.uniform(0, 1, small_schema.width), rng.uniform(-0.1, 1.1, small_schema.width),
                             true_label=i, adv_pred=(i + 1) % 15) for i in range(3)]
        path = str(tmp_path / "adversarial.csv")
        save_adversarial_set(examples, small_schema, path)
        loaded = load_adversarial_set(path, small_schema)
        assert len(loaded) == 3
        for a, b in zip(examples, loaded):
            assert np.array_equal(a.original, b.original) and np.array_equal(a.perturbed, b.perturbed)
            assert (a.true_label, a.clean_pred, a.adv_pred) == (b.true_label, b.clean_pred, b.adv_pred)

    def test_empty_set(self, small_schema, tmp_path):
        path = str(tmp_path / "adversarial.csv")
        save_adversarial_set([], small_schema, path)
        assert load_adversarial_set(path, small_schema) == []
        assert stack_perturbed([], small_schema.width).shape == (0, small_schema.width)


if __name__ == "__main__":
    pytest.main([__file__])
