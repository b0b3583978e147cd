"""
生成器/判别器的极小极大训练、损失轨迹，以及判别器作为第一阶段对抗样本检测器的评估
"""

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from advids.config import DEFAULT_SEED, GanConfig
from advids.data import Dataset
from advids.exceptions import DimensionError, DivergenceError, DomainError
from advids.models import DiscriminatorConfig, GeneratorConfig, Model, build_discriminator, build_generator
from advids.numerics import OptimizerConfig, Rng, batch_bce, create_optimizer

logger = logging.getLogger(__name__)

REAL = "real"
FAKE = "fake"

GAN_BETAS = (0.5, 0.999)
RANGE_SAMPLE_SIZE = 16
CALIBRATION_BOUND = 1e-6


@dataclass
class LossCheckpoint:
    index: int
    generator_loss: float
    discriminator_loss: float


@dataclass
class LossTrace:
    """每 checkpoint_interval 个批次记录一次窗口内的平均损失"""
    checkpoints: List[LossCheckpoint] = field(default_factory=list)

    def __len__(self):
        return len(self.checkpoints)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'checkpoint': [c.index for c in self.checkpoints],
            'd_loss': [c.discriminator_loss for c in self.checkpoints],
            'g_loss': [c.generator_loss for c in self.checkpoints],
        })

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)


@dataclass
class ValidationSet:
    """阈值校准用的留出集：真实样本与对应的 FGSM 样本"""
    real: np.ndarray
    adversarial: np.ndarray


@dataclass
class GanResult:
    generator: Model
    discriminator: Model
    trace: LossTrace
    d_updates: int = 0
    g_updates: int = 0
    update_log: List[str] = field(default_factory=list)
    threshold: float = 0.5
    validation: Optional['DetectorEvaluation'] = None


def train_gan(real_data: Dataset, config: GanConfig, adversarial: Optional[np.ndarray] = None,
              validation: Optional[ValidationSet] = None) -> GanResult:
    """
    交替训练：每个批次先以冻结的 G(z) 更新判别器（真实标签 1，伪造标签 0），
    再以非饱和损失（G(z) 目标为 1）更新生成器。

    fgsm_in_training 打开时每个批次从 adversarial 中随机抽取同样数量的样本，
    以标签 0 和权重 adv_weight 计入判别器损失。
    calibrate 打开时在 validation 上校准阈值，结果写入 GanResult.threshold
    与判别器元数据 'threshold'。
    """
    config.validate()
    if len(real_data) == 0:
        raise DomainError("train_gan: 真实数据集为空")
    if config.fgsm_in_training and (adversarial is None or len(adversarial) == 0):
        raise DomainError("fgsm_in_training 已开启但未提供对抗样本")
    if config.calibrate and (validation is None or len(validation.real) == 0 or len(validation.adversarial) == 0):
        raise DomainError("calibrate 已开启但未提供非空的验证集")

    rng = Rng(config.seed if config.seed is not None else DEFAULT_SEED)
    init_rng, shuffle_rng, noise_rng = rng.child(0), rng.child(1), rng.child(2)
    width = real_data.schema.width
    lattice = tuple(int(i) for i in real_data.schema.lattice_indices())
    generator = build_generator(GeneratorConfig(noise_dim=config.noise_dim, output_width=width), init_rng)
    discriminator = build_discriminator(
        DiscriminatorConfig(input_width=width, lattice_columns=lattice, deviation_gain=config.deviation_gain),
        init_rng,
    )
    opt_d = create_optimizer(OptimizerConfig(kind="adam", lr=config.lr_d, betas=GAN_BETAS))
    opt_g = create_optimizer(OptimizerConfig(kind="adam", lr=config.lr_g, betas=GAN_BETAS))

    result = GanResult(generator=generator, discriminator=discriminator, trace=LossTrace(),
                       threshold=config.threshold)
    features = real_data.features
    n = len(real_data)
    batches_per_epoch = math.ceil(n / config.batch_size)
    window_d: List[float] = []
    window_g: List[float] = []
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            real = features[order[start:start + config.batch_size]]
            size = real.shape[0]

            # 判别器：G 只做前向
            fake = generator(noise_rng.normal((size, config.noise_dim)))
            scores_real, caches_real = discriminator.forward(real)
            loss_real, grad_real = batch_bce(scores_real, 1)
            discriminator.backward(caches_real, grad_real)
            scores_fake, caches_fake = discriminator.forward(fake)
            loss_fake, grad_fake = batch_bce(scores_fake, 0)
            discriminator.backward(caches_fake, grad_fake)
            d_loss = loss_real + loss_fake
            if config.fgsm_in_training:
                picks = shuffle_rng.integers(0, len(adversarial), size)
                scores_adv, caches_adv = discriminator.forward(adversarial[picks])
                loss_adv, grad_adv = batch_bce(scores_adv, 0)
                discriminator.backward(caches_adv, config.adv_weight * grad_adv)
                d_loss += config.adv_weight * loss_adv
            opt_d.step(discriminator.layers)
            result.d_updates += 1
            result.update_log.append("D")

            # 生成器：梯度穿过判别器，但判别器参数不更新
            generated, caches_g = generator.forward(noise_rng.normal((size, config.noise_dim)))
            scores, caches_d = discriminator.forward(generated)
            g_loss, grad_scores = batch_bce(scores, 1)
            grad_generated = discriminator.backward(caches_d, grad_scores)
            discriminator.zero_grads()
            generator.backward(caches_g, grad_generated)
            opt_g.step(generator.layers)
            result.g_updates += 1
            result.update_log.append("G")

            step += 1
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                index = len(result.trace) + 1
                raise DivergenceError(index, f"GAN 训练在检查点 {index} 出现非有限损失")
            window_d.append(d_loss)
            window_g.append(g_loss)
            if step % config.checkpoint_interval == 0:
                checkpoint = LossCheckpoint(
                    index=len(result.trace) + 1,
                    generator_loss=float(np.mean(window_g)),
                    discriminator_loss=float(np.mean(window_d)),
                )
                result.trace.checkpoints.append(checkpoint)
                window_d.clear()
                window_g.clear()
                _check_generator_range(generator, checkpoint.index, noise_rng)
        logger.info(f"GAN 第 {epoch}/{config.epochs} 轮完成: d_loss={d_loss:.4f}, g_loss={g_loss:.4f}")

    generator.metadata.update({'epochs': config.epochs, 'final_loss': float(g_loss)})
    discriminator.metadata.update({'epochs': config.epochs, 'final_loss': float(d_loss)})
    if config.calibrate:
        result.threshold = calibrate_threshold(discriminator_scores(discriminator, validation.real),
                                               discriminator_scores(discriminator, validation.adversarial),
                                               config.target_real_recall)
        discriminator.metadata['threshold'] = result.threshold
        result.validation = evaluate_detector(discriminator, validation.real, validation.adversarial,
                                              result.threshold)
    logger.info(f"GAN 训练完成: {config.epochs * batches_per_epoch} 个批次, {len(result.trace)} 个检查点, "
                f"阈值 {result.threshold:.6f}")
    return result


def calibrate_threshold(real_scores: np.ndarray, adv_scores: np.ndarray, target_real_recall: float) -> float:
    """
    在验证集分数上选择阈值

    两类分数可分时取最小真实分数与最大对抗分数的中点，否则取使真实召回率
    不低于 target_real_recall 的最大阈值。结果限制在 [CALIBRATION_BOUND, 1 - CALIBRATION_BOUND]。
    """
    real = np.sort(np.asarray(real_scores, dtype=np.float64).reshape(-1))
    adversarial = np.asarray(adv_scores, dtype=np.float64).reshape(-1)
    if real.size == 0 or adversarial.size == 0:
        raise DomainError("calibrate_threshold: 真实分数与对抗分数均不能为空")
    if not 0 < target_real_recall <= 1:
        raise DomainError(f"target_real_recall 必须在 (0, 1] 内: {target_real_recall}")
    if real[0] > adversarial.max():
        threshold = (real[0] + adversarial.max()) / 2.0
    else:
        rejected = int(math.floor((1.0 - target_real_recall) * real.size + 1e-9))
        threshold = real[min(rejected, real.size - 1)]
    threshold = float(np.clip(threshold, CALIBRATION_BOUND, 1.0 - CALIBRATION_BOUND))
    logger.info(f"阈值校准: {threshold:.6f} (真实 {real.size} 条, 对抗 {adversarial.size} 条)")
    return threshold


def _check_generator_range(generator: Model, index: int, rng: Rng):
    samples = generator.sample(RANGE_SAMPLE_SIZE, rng)
    if samples.min() <= 0.0 or samples.max() >= 1.0:
        raise DivergenceError(index, f"检查点 {index}: 生成器输出越出 (0, 1)")


# ---------------------------------------------------------------------------
# 第一阶段检测
# ---------------------------------------------------------------------------

def discriminator_scores(discriminator, features: np.ndarray, batch_size: int = 512) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        return np.zeros(0)
    parts = [np.asarray(discriminator(features[start:start + batch_size]), dtype=np.float64).reshape(-1)
             for start in range(0, features.shape[0], batch_size)]
    return np.concatenate(parts)


def discriminate(discriminator: Model, x, threshold: float) -> Tuple[float, str]:
    """score >= threshold 判为 real，否则为 fake"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (discriminator.input_width,):
        raise DimensionError(f"discriminate: 期望长度 {discriminator.input_width}, 实际形状 {x.shape}")
    score = float(np.asarray(discriminator(x)).reshape(-1)[0])
    return score, REAL if score >= threshold else FAKE


@dataclass
class DetectorEvaluation:
    """正类为对抗样本：TP = 对抗被拦截，FN = 对抗被放行，TN = 真实被放行，FP = 真实被拦截"""
    real_recall: float
    adv_recall: float
    true_positive: int
    false_negative: int
    true_negative: int
    false_positive: int
    threshold: float

    def to_dict(self):
        return asdict(self)

    def format(self) -> str:
        return (
            f"{'':<14}{'pred real':>12}{'pred fake':>12}{'recall':>10}\n"
            f"{'real':<14}{self.true_negative:>12}{self.false_positive:>12}{self.real_recall:>10.2f}\n"
            f"{'adversarial':<14}{self.false_negative:>12}{self.true_positive:>12}{self.adv_recall:>10.2f}\n"
        )


def evaluate_detector(discriminator, real_test: Union[Dataset, np.ndarray], adv_set: np.ndarray,
                      threshold: float) -> DetectorEvaluation:
    real = real_test.features if isinstance(real_test, Dataset) else np.asarray(real_test, dtype=np.float64)
    adversarial = np.asarray(adv_set, dtype=np.float64)
    if real.shape[0] == 0 or adversarial.shape[0] == 0:
        raise DomainError("evaluate_detector: 真实集与对抗集均不能为空")
    real_pass = discriminator_scores(discriminator, real) >= threshold
    adv_pass = discriminator_scores(discriminator, adversarial) >= threshold
    evaluation = DetectorEvaluation(
        real_recall=float(real_pass.mean()),
        adv_recall=float((~adv_pass).mean()),
        true_positive=int((~adv_pass).sum()),
        false_negative=int(adv_pass.sum()),
        true_negative=int(real_pass.sum()),
        false_positive=int((~real_pass).sum()),
        threshold=float(threshold),
    )
    logger.info(f"第一阶段检测: real recall {evaluation.real_recall:.4f}, "
                f"adversarial recall {evaluation.adv_recall:.4f}")
    return evaluation
