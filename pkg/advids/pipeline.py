"""
两阶段检测：判别器门控（第一阶段）+ CNN 分类器（第二阶段）
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from advids.data import CLASS_LABELS, CLASS_NAMES, ClassLabel, Dataset
from advids.exceptions import DimensionError, DomainError
from advids.gan import DetectorEvaluation, discriminator_scores, evaluate_detector
from advids.metrics import (
    ClassificationReport, ConfusionMatrix, classification_report, confusion_matrix, report_to_dict,
)

logger = logging.getLogger(__name__)

BATCH_SIZE = 512


@dataclass(frozen=True)
class Adversarial:
    score: float

    def to_dict(self):
        return {'verdict': 'adversarial', 'score': self.score}


@dataclass(frozen=True)
class Classified:
    score: float
    label: ClassLabel
    log_probs: np.ndarray = field(repr=False, compare=False)

    def to_dict(self):
        return {'verdict': 'classified', 'score': self.score, 'label': self.label.name}


Verdict = Union[Adversarial, Classified]


class TwoStageDetector:
    """
    第一阶段判别器得分 < threshold 判为对抗样本并直接返回，分类器不被调用；
    stage2_calls 记录送入分类器的样本数。
    """

    def __init__(self, discriminator, classifier, threshold: float = 0.5):
        d_width = getattr(discriminator, 'input_width', None)
        c_width = getattr(classifier, 'input_width', None)
        if d_width is not None and c_width is not None and d_width != c_width:
            raise DimensionError(f"判别器输入宽度 {d_width} 与分类器输入宽度 {c_width} 不一致")
        self.discriminator = discriminator
        self.classifier = classifier
        self.threshold = threshold
        self.input_width = d_width if d_width is not None else c_width
        self.stage2_calls = 0

    def scores(self, features: np.ndarray) -> np.ndarray:
        return discriminator_scores(self.discriminator, features)

    def classify(self, features: np.ndarray, batch_size: int = BATCH_SIZE) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        self.stage2_calls += features.shape[0]
        parts = [np.asarray(self.classifier(features[start:start + batch_size]), dtype=np.float64)
                 for start in range(0, features.shape[0], batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, len(CLASS_NAMES)))


def _check_width(detector: TwoStageDetector, features: np.ndarray, ndim: int):
    if features.ndim != ndim or (detector.input_width is not None and features.shape[-1] != detector.input_width):
        raise DimensionError(f"detect: 期望宽度 {detector.input_width}, 实际形状 {features.shape}")


def detect(detector: TwoStageDetector, x) -> Verdict:
    x = np.asarray(x, dtype=np.float64)
    _check_width(detector, x, 1)
    score = float(detector.scores(x[np.newaxis])[0])
    if score < detector.threshold:
        return Adversarial(score)
    log_probs = detector.classify(x[np.newaxis])[0]
    return Classified(score, CLASS_LABELS[int(np.argmax(log_probs))], log_probs)


def detect_batch(detector: TwoStageDetector, features: np.ndarray) -> List[Verdict]:
    """先对整批打分，只把通过门控的子集送入分类器"""
    features = np.asarray(features, dtype=np.float64)
    _check_width(detector, features, 2)
    scores = detector.scores(features)
    passing = np.flatnonzero(scores >= detector.threshold)
    log_probs = detector.classify(features[passing])
    verdicts: List[Verdict] = [Adversarial(float(score)) for score in scores]
    for row, index in enumerate(passing):
        verdicts[index] = Classified(float(scores[index]), CLASS_LABELS[int(np.argmax(log_probs[row]))],
                                     log_probs[row])
    return verdicts


@dataclass
class PipelineEvaluation:
    gate: DetectorEvaluation
    clean_report: Optional[ClassificationReport]  # 只统计通过门控的干净样本；全部被拦截时为 None
    clean_confusion: ConfusionMatrix
    ungated_report: ClassificationReport
    ungated_confusion: ConfusionMatrix
    suppressed: Dict[str, int]
    suppression_rate: float
    adversarial_passed: int
    stage2_calls: int

    def to_dict(self):
        return {
            'gate': self.gate.to_dict(),
            'gated_report': report_to_dict(self.clean_report) if self.clean_report is not None else None,
            'ungated_report': report_to_dict(self.ungated_report),
            'suppressed': dict(self.suppressed),
            'suppression_rate': self.suppression_rate,
            'adversarial_passed': self.adversarial_passed,
            'stage2_calls': self.stage2_calls,
        }


def evaluate_pipeline(detector: TwoStageDetector, clean_test: Dataset, adv_set: np.ndarray) -> PipelineEvaluation:
    """
    门控指标 + 两份分类报告：gated（通过门控的干净样本）与 ungated（全部干净样本直接分类）。
    被门控错误拦截的干净样本按真实类别计入 suppressed。
    """
    adversarial = np.asarray(adv_set, dtype=np.float64)
    if len(clean_test) == 0 or adversarial.shape[0] == 0:
        raise DomainError("evaluate_pipeline: 干净测试集与对抗集均不能为空")

    gate = evaluate_detector(detector.discriminator, clean_test, adversarial, detector.threshold)

    calls_before = detector.stage2_calls
    clean_verdicts = detect_batch(detector, clean_test.features)
    adv_verdicts = detect_batch(detector, adversarial)
    stage2_calls = detector.stage2_calls - calls_before

    passed = np.array([isinstance(v, Classified) for v in clean_verdicts], dtype=bool)
    labels = clean_test.labels
    predicted = np.array([v.label.index for v in clean_verdicts if isinstance(v, Classified)], dtype=np.int64)
    clean_confusion = confusion_matrix(labels[passed], predicted)
    clean_report = classification_report(clean_confusion) if passed.any() else None

    features = clean_test.features
    ungated_predicted = np.concatenate([
        np.asarray(detector.classifier(features[start:start + BATCH_SIZE])).argmax(axis=1)
        for start in range(0, features.shape[0], BATCH_SIZE)
    ])
    ungated_confusion = confusion_matrix(labels, ungated_predicted)
    ungated_report = classification_report(ungated_confusion)

    suppressed_counts = np.bincount(labels[~passed], minlength=len(CLASS_NAMES))
    suppressed = {name: int(count) for name, count in zip(CLASS_NAMES, suppressed_counts)}
    adversarial_passed = sum(isinstance(v, Classified) for v in adv_verdicts)

    evaluation = PipelineEvaluation(
        gate=gate,
        clean_report=clean_report,
        clean_confusion=clean_confusion,
        ungated_report=ungated_report,
        ungated_confusion=ungated_confusion,
        suppressed=suppressed,
        suppression_rate=float((~passed).mean()),
        adversarial_passed=int(adversarial_passed),
        stage2_calls=int(stage2_calls),
    )
    if clean_report is None:
        logger.warning("门控拦截了全部干净样本，第二阶段报告为空")
    else:
        logger.info(f"两阶段评估: gated accuracy {clean_report.accuracy:.4f}, "
                    f"ungated accuracy {ungated_report.accuracy:.4f}, "
                    f"suppression {evaluation.suppression_rate:.4f}")
    return evaluation
