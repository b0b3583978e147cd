"""
FGSM 对抗样本生成、成功样本筛选，以及扰动质量与流量有效性分析
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from advids.config import AttackConfig
from advids.data import CLASS_NAMES, GROUPS, Dataset, FeatureSchema, label_from_name
from advids.exceptions import DimensionError, DomainError, IngestionError, StatsError
from advids.models import Model, predict
from advids.numerics import batch_cross_entropy, cross_entropy_loss, sign

logger = logging.getLogger(__name__)


@dataclass
class AdversarialExample:
    """对抗攻击流水线的基本单元"""
    original: np.ndarray
    perturbed: np.ndarray
    true_label: int
    clean_pred: int
    adv_pred: int

    @property
    def success(self) -> bool:
        return self.adv_pred != self.true_label

    @property
    def delta(self) -> np.ndarray:
        return self.perturbed - self.original


@dataclass
class AttackSummary:
    total: int
    kept: int
    clean_accuracy: float
    adversarial_accuracy: float
    success_rate: float
    epsilon: float

    def to_dict(self):
        return asdict(self)


@dataclass
class AttackResult:
    """examples 为筛选后保留的样本；true_labels 与 adv_preds 覆盖全部输入行"""
    examples: List[AdversarialExample]
    summary: AttackSummary
    true_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    adv_preds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def input_gradient(model: Model, x, y: int) -> np.ndarray:
    """损失对输入的精确解析梯度 ∂J/∂x；不修改模型的参数梯度"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_width,):
        raise DimensionError(f"input_gradient: 期望长度 {model.input_width}, 实际形状 {x.shape}")
    log_probs, caches = model.forward(x)
    _, grad = cross_entropy_loss(log_probs, y)
    grad_x = model.backward(caches, grad)
    model.zero_grads()
    return grad_x


def input_gradients(model: Model, features: np.ndarray, labels) -> np.ndarray:
    """批量版 input_gradient：逐样本求和损失，各行梯度互不影响"""
    features = np.asarray(features, dtype=np.float64)
    log_probs, caches = model.forward(features)
    _, grad = batch_cross_entropy(log_probs, labels, reduction="sum")
    grad_x = model.backward(caches, grad)
    model.zero_grads()
    return grad_x


def _perturb(features: np.ndarray, grads: np.ndarray, config: AttackConfig) -> np.ndarray:
    perturbed = features + config.epsilon * sign(grads)
    if config.clip:
        perturbed = np.clip(perturbed, 0.0, 1.0)
    return perturbed


def fgsm_generate(model: Model, x, y: int, config: AttackConfig) -> AdversarialExample:
    """x_adv = x + ε·sign(∇x J)，sign(0) = 0；默认不裁剪"""
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    grad = input_gradient(model, x, y)
    perturbed = _perturb(x, grad, config)
    clean_label, _ = predict(model, x)
    adv_label, _ = predict(model, perturbed)
    return AdversarialExample(
        original=x.copy(),
        perturbed=perturbed,
        true_label=int(y),
        clean_pred=clean_label.index,
        adv_pred=adv_label.index,
    )


def attack_batch(model: Model, dataset: Dataset, config: AttackConfig) -> AttackResult:
    """对每一行生成 FGSM 样本；按配置保留成功（及有效）的样本，顺序与输入一致"""
    config.validate()
    if len(dataset) == 0:
        raise DomainError("attack_batch: 数据集为空")
    examples: List[AdversarialExample] = []
    clean_correct = adv_correct = 0
    for start in range(0, len(dataset), config.batch_size):
        features = dataset.features[start:start + config.batch_size]
        labels = dataset.labels[start:start + config.batch_size].astype(np.int64)
        grads = input_gradients(model, features, labels)
        perturbed = _perturb(features, grads, config)
        clean_preds, _ = model.predict_batch(features)
        adv_preds, _ = model.predict_batch(perturbed)
        clean_correct += int(np.sum(clean_preds == labels))
        adv_correct += int(np.sum(adv_preds == labels))
        for i in range(features.shape[0]):
            examples.append(AdversarialExample(
                original=np.array(features[i]),
                perturbed=perturbed[i],
                true_label=int(labels[i]),
                clean_pred=int(clean_preds[i]),
                adv_pred=int(adv_preds[i]),
            ))

    total = len(examples)
    successes = sum(1 for e in examples if e.success)
    kept = examples
    if config.filter_successful:
        kept = [e for e in kept if e.success]
    if config.filter_valid and kept:
        valid = ~_any_invalid(np.stack([e.perturbed for e in kept]), dataset.schema)
        kept = [e for e, ok in zip(kept, valid) if ok]
    if not kept:
        logger.warning("筛选后没有剩余的对抗样本")

    summary = AttackSummary(
        total=total,
        kept=len(kept),
        clean_accuracy=clean_correct / total,
        adversarial_accuracy=adv_correct / total,
        success_rate=successes / total,
        epsilon=config.epsilon,
    )
    logger.info(f"FGSM(ε={config.epsilon}): 干净准确率 {summary.clean_accuracy:.4f}, "
                f"对抗准确率 {summary.adversarial_accuracy:.4f}, 成功率 {summary.success_rate:.4f}, "
                f"保留 {summary.kept}/{total}")
    return AttackResult(
        examples=kept,
        summary=summary,
        true_labels=np.array([e.true_label for e in examples], dtype=np.int64),
        adv_preds=np.array([e.adv_pred for e in examples], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# 扰动质量
# ---------------------------------------------------------------------------

@dataclass
class GroupPerturbation:
    """单个特征分组的扰动统计；sq_distance 为平方 L2 距离"""
    group: str
    size: int
    mean_perturbed_count: float
    max_perturbed_count: int
    mean_sq_distance: float
    max_sq_distance: float
    mean_l2: float
    max_l2: float
    mean_linf: float
    max_linf: float


@dataclass
class PerturbationStats:
    groups: Dict[str, GroupPerturbation] = field(default_factory=dict)
    count: int = 0

    def to_dict(self):
        return {'count': self.count, 'groups': {name: asdict(g) for name, g in self.groups.items()}}


def _stack(examples: List[AdversarialExample], schema: FeatureSchema):
    originals = np.stack([e.original for e in examples])
    perturbed = np.stack([e.perturbed for e in examples])
    if originals.shape[1] != schema.width or perturbed.shape != originals.shape:
        raise DimensionError(f"样本宽度 {perturbed.shape[1]} 与模式宽度 {schema.width} 不符")
    return originals, perturbed


def perturbation_stats(examples: List[AdversarialExample], schema: FeatureSchema) -> PerturbationStats:
    if not examples:
        raise StatsError("perturbation_stats: 对抗样本集为空")
    originals, perturbed = _stack(examples, schema)
    delta = perturbed - originals
    stats = PerturbationStats(count=len(examples))
    for group in GROUPS:
        indices = schema.group_indices(group)
        part = delta[:, indices] if indices.size else np.zeros((len(examples), 1))
        counts = np.count_nonzero(part, axis=1)
        sq = np.sum(part * part, axis=1)
        linf = np.max(np.abs(part), axis=1)
        stats.groups[group] = GroupPerturbation(
            group=group,
            size=int(indices.size),
            mean_perturbed_count=float(counts.mean()),
            max_perturbed_count=int(counts.max()),
            mean_sq_distance=float(sq.mean()),
            max_sq_distance=float(sq.max()),
            mean_l2=float(np.sqrt(sq).mean()),
            max_l2=float(np.sqrt(sq).max()),
            mean_linf=float(linf.mean()),
            max_linf=float(linf.max()),
        )
    return stats


# ---------------------------------------------------------------------------
# 有效性分析：取值范围 / 二值 / 类别归属
# ---------------------------------------------------------------------------

@dataclass
class GroupValidity:
    group: str
    pct_invalid_range: float
    pct_invalid_binary: float
    pct_invalid_class_belonging: float


@dataclass
class ValidityReport:
    groups: Dict[str, GroupValidity] = field(default_factory=dict)
    count: int = 0

    def to_dict(self):
        return {'count': self.count, 'groups': {name: asdict(g) for name, g in self.groups.items()}}


def violation_flags(matrix: np.ndarray, schema: FeatureSchema) -> Dict[str, Dict[str, np.ndarray]]:
    """每个分组、每条准则下逐行的违规标记"""
    if matrix.ndim != 2 or matrix.shape[1] != schema.width:
        raise DimensionError(f"矩阵形状 {matrix.shape} 与模式宽度 {schema.width} 不符")
    rows = matrix.shape[0]
    result = {}
    for group in GROUPS:
        indices = schema.group_indices(group)
        values = matrix[:, indices]
        invalid_range = np.any((values < 0.0) | (values > 1.0), axis=1) if indices.size else np.zeros(rows, bool)

        binary = schema.binary_indices(group)
        invalid_binary = np.zeros(rows, dtype=bool)
        if binary.size:
            invalid_binary = ~np.all(np.isin(matrix[:, binary], (0.0, 1.0)), axis=1)

        invalid_class = np.zeros(rows, dtype=bool)
        for members in schema.one_hot_groups(group).values():
            block = matrix[:, members]
            exactly_one = np.all(np.isin(block, (0.0, 1.0)), axis=1) & (block.sum(axis=1) == 1.0)
            invalid_class |= ~exactly_one
        result[group] = {'range': invalid_range, 'binary': invalid_binary, 'class': invalid_class}
    return result


def _any_invalid(matrix: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    flags = np.zeros(matrix.shape[0], dtype=bool)
    for criteria in violation_flags(matrix, schema).values():
        for mask in criteria.values():
            flags |= mask
    return flags


def matrix_validity(matrix: np.ndarray, schema: FeatureSchema) -> ValidityReport:
    """对任意特征矩阵（干净或对抗）计算违规百分比"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] == 0:
        raise StatsError("validity_analysis: 样本集为空")
    report = ValidityReport(count=int(matrix.shape[0]))
    for group, criteria in violation_flags(matrix, schema).items():
        report.groups[group] = GroupValidity(
            group=group,
            pct_invalid_range=100.0 * float(criteria['range'].mean()),
            pct_invalid_binary=100.0 * float(criteria['binary'].mean()),
            pct_invalid_class_belonging=100.0 * float(criteria['class'].mean()),
        )
    return report


def validity_analysis(examples: List[AdversarialExample], schema: FeatureSchema) -> ValidityReport:
    if not examples:
        raise StatsError("validity_analysis: 对抗样本集为空")
    _, perturbed = _stack(examples, schema)
    return matrix_validity(perturbed, schema)


# ---------------------------------------------------------------------------
# 持久化
# ---------------------------------------------------------------------------

def save_adversarial_set(examples: List[AdversarialExample], schema: FeatureSchema, path: str):
    """CSV: orig:<列>, adv:<列>, true_label, clean_pred, adv_pred, success"""
    names = [c.name for c in schema.columns]
    if examples:
        originals, perturbed = _stack(examples, schema)
    else:
        originals = perturbed = np.zeros((0, schema.width))
    frame = pd.concat([
        pd.DataFrame(originals, columns=[f"orig:{n}" for n in names]),
        pd.DataFrame(perturbed, columns=[f"adv:{n}" for n in names]),
        pd.DataFrame({
            'true_label': [CLASS_NAMES[e.true_label] for e in examples],
            'clean_pred': [CLASS_NAMES[e.clean_pred] for e in examples],
            'adv_pred': [CLASS_NAMES[e.adv_pred] for e in examples],
            'success': [int(e.success) for e in examples],
        }),
    ], axis=1)
    frame.to_csv(path, index=False)
    logger.info(f"已保存 {len(examples)} 个对抗样本: {path}")


def load_adversarial_set(path: str, schema: FeatureSchema) -> List[AdversarialExample]:
    try:
        frame = pd.read_csv(path, float_precision='round_trip', dtype={'true_label': str, 'clean_pred': str,
                                                                        'adv_pred': str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"无法读取对抗样本文件 {path}: {e}") from e
    names = [c.name for c in schema.columns]
    orig_columns = [f"orig:{n}" for n in names]
    adv_columns = [f"adv:{n}" for n in names]
    missing = [c for c in orig_columns + adv_columns + ['true_label', 'clean_pred', 'adv_pred']
               if c not in frame.columns]
    if missing:
        raise IngestionError(f"对抗样本文件缺少列 {missing[:5]}: {path}")
    originals = frame[orig_columns].to_numpy(dtype=np.float64)
    perturbed = frame[adv_columns].to_numpy(dtype=np.float64)
    return [
        AdversarialExample(
            original=originals[i],
            perturbed=perturbed[i],
            true_label=label_from_name(frame['true_label'].iloc[i]).index,
            clean_pred=label_from_name(frame['clean_pred'].iloc[i]).index,
            adv_pred=label_from_name(frame['adv_pred'].iloc[i]).index,
        )
        for i in range(len(frame))
    ]


def stack_perturbed(examples: List[AdversarialExample], width: int) -> np.ndarray:
    if not examples:
        return np.zeros((0, width))
    return np.stack([e.perturbed for e in examples])
