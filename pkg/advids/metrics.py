"""
混淆矩阵与分类报告（每类 precision/recall/F1、accuracy、macro 与 weighted 平均）
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from advids.data import CLASS_NAMES
from advids.exceptions import DimensionError, DomainError, MetricsError

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """行 = 真实类别，列 = 预测类别"""
    counts: np.ndarray
    registry: Tuple[str, ...] = CLASS_NAMES

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=list(self.registry), columns=list(self.registry))


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int],
                     registry: Sequence[str] = CLASS_NAMES) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"y_true 与 y_pred 长度不一致: {y_true.size} != {y_pred.size}")
    k = len(registry)
    for name, values in (("y_true", y_true), ("y_pred", y_pred)):
        if values.size and (values.min() < 0 or values.max() >= k):
            bad = values[(values < 0) | (values >= k)][0]
            raise DomainError(f"{name} 中存在未知类别索引 {bad}（类别数 {k}）")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts=counts, registry=tuple(registry))


@dataclass
class ClassScores:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationReport:
    per_class: List[ClassScores]
    accuracy: float
    macro: ClassScores
    weighted: ClassScores
    total: int
    undefined: List[str] = field(default_factory=list)  # 零除置 0 的项，如 "precision:Normal"


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    """
    precision_c = TP_c / 列和，recall_c = TP_c / 行和；分母为 0 时取 0 并记入 undefined。
    macro 为各类简单平均，weighted 以 support 加权。
    """
    total = cm.total
    if total == 0:
        raise MetricsError("混淆矩阵为空，无法计算分类报告")
    counts = cm.counts
    per_class: List[ClassScores] = []
    undefined: List[str] = []
    for index, name in enumerate(cm.registry):
        hits = int(counts[index, index])
        predicted = int(counts[:, index].sum())
        support = int(counts[index, :].sum())
        if predicted == 0:
            undefined.append(f"precision:{name}")
        if support == 0:
            undefined.append(f"recall:{name}")
        precision = hits / predicted if predicted else 0.0
        recall = hits / support if support else 0.0
        per_class.append(ClassScores(name, precision, recall, _f1(precision, recall), support))

    k = len(per_class)
    macro = ClassScores(
        name="macro avg",
        precision=sum(s.precision for s in per_class) / k,
        recall=sum(s.recall for s in per_class) / k,
        f1=sum(s.f1 for s in per_class) / k,
        support=total,
    )
    weighted = ClassScores(
        name="weighted avg",
        precision=sum(s.precision * s.support for s in per_class) / total,
        recall=sum(s.recall * s.support for s in per_class) / total,
        f1=sum(s.f1 * s.support for s in per_class) / total,
        support=total,
    )
    if undefined:
        logger.warning(f"分类报告中 {len(undefined)} 项零除，已按 0 计: {', '.join(undefined)}")
    return ClassificationReport(
        per_class=per_class,
        accuracy=int(np.trace(counts)) / total,
        macro=macro,
        weighted=weighted,
        total=total,
        undefined=undefined,
    )


def format_report(report: ClassificationReport, digits: int = 2) -> str:
    width = max(len("weighted avg"), *(len(s.name) for s in report.per_class))
    header = f"{'':<{width}}  {'precision':>9}  {'recall':>9}  {'f1-score':>9}  {'support':>9}\n\n"

    def row(scores: ClassScores) -> str:
        return (f"{scores.name:<{width}}  {scores.precision:>9.{digits}f}  {scores.recall:>9.{digits}f}  "
                f"{scores.f1:>9.{digits}f}  {scores.support:>9}\n")

    body = "".join(row(s) for s in report.per_class)
    accuracy = f"\n{'accuracy':<{width}}  {'':>9}  {'':>9}  {report.accuracy:>9.{digits}f}  {report.total:>9}\n"
    return header + body + accuracy + row(report.macro) + row(report.weighted)


def report_to_dict(report: ClassificationReport) -> Dict:
    return {
        'per_class': [asdict(s) for s in report.per_class],
        'accuracy': report.accuracy,
        'macro_avg': asdict(report.macro),
        'weighted_avg': asdict(report.weighted),
        'total': report.total,
        'undefined': list(report.undefined),
    }


def confusion_to_csv(cm: ConfusionMatrix, path: str):
    cm.to_frame().to_csv(path, index_label="true\\pred")
