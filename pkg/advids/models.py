"""
三个网络：15 类 CNN 分类器、二分类 CNN 判别器、MLP 生成器；预测、训练与检查点持久化
"""

import json
import logging
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple, Any

import numpy as np

from advids.config import ClassifierTrainConfig
from advids.data import CLASS_LABELS, ENCODED_WIDTH, NUM_CLASSES, ClassLabel, Dataset
from advids.exceptions import CheckpointError, DimensionError, DivergenceError
from advids.numerics import (
    Conv1d, DeviationGain, Flatten, LayerSpec, LayerState, Linear, LogSoftmax, OptimizerConfig, ReLU, Rng,
    Sigmoid, backward, batch_cross_entropy, build_layer, create_optimizer, forward, zero_grads,
)

logger = logging.getLogger(__name__)

CLASSIFIER = "classifier"
DISCRIMINATOR = "discriminator"
GENERATOR = "generator"

CHECKPOINT_MAGIC = b"AIDM1"
CHECKPOINT_VERSION = 1


def _conv_trunk(input_width: int, channels: Tuple[int, ...], kernel_size: int, padding: int,
                hidden_units: int) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    in_channels = 1
    for out_channels in channels:
        specs += [Conv1d(in_channels, out_channels, kernel_size, padding), ReLU()]
        in_channels = out_channels
    length = input_width
    for _ in channels:
        length = length + 2 * padding - kernel_size + 1
    specs += [Flatten(), Linear(length * in_channels, hidden_units), ReLU()]
    return specs


@dataclass
class ClassifierConfig:
    """三层 Conv1d + 全连接(95*16 -> 30) + 输出(30 -> 15) + log-softmax；不含池化层"""
    input_width: int = ENCODED_WIDTH
    channels: Tuple[int, ...] = (64, 32, 16)
    kernel_size: int = 3
    padding: int = 1
    hidden_units: int = 30
    num_classes: int = NUM_CLASSES

    kind = CLASSIFIER

    def layer_specs(self) -> List[LayerSpec]:
        trunk = _conv_trunk(self.input_width, tuple(self.channels), self.kernel_size, self.padding,
                            self.hidden_units)
        return trunk + [Linear(self.hidden_units, self.num_classes), LogSoftmax()]


@dataclass
class DiscriminatorConfig:
    """与分类器相同的卷积主干，输出为单个 sigmoid 单元

    deviation_gain > 1 时在主干前加一层 DeviationGain，lattice_columns 为取值只能是 0/1 的列
    """
    input_width: int = ENCODED_WIDTH
    channels: Tuple[int, ...] = (64, 32, 16)
    kernel_size: int = 3
    padding: int = 1
    hidden_units: int = 30
    lattice_columns: Tuple[int, ...] = ()
    deviation_gain: float = 1.0

    kind = DISCRIMINATOR

    def layer_specs(self) -> List[LayerSpec]:
        trunk = _conv_trunk(self.input_width, tuple(self.channels), self.kernel_size, self.padding,
                            self.hidden_units)
        gate: List[LayerSpec] = []
        if self.deviation_gain != 1.0:
            gate = [DeviationGain(self.input_width, tuple(self.lattice_columns), self.deviation_gain)]
        return gate + trunk + [Linear(self.hidden_units, 1), Sigmoid()]


@dataclass
class GeneratorConfig:
    """噪声 z -> Linear+ReLU -> Linear+ReLU -> Linear+sigmoid，输出落在 (0,1)^95"""
    noise_dim: int = 64
    hidden: Tuple[int, ...] = (128, 128)
    output_width: int = ENCODED_WIDTH

    kind = GENERATOR

    @property
    def input_width(self) -> int:
        return self.noise_dim

    def layer_specs(self) -> List[LayerSpec]:
        specs: List[LayerSpec] = []
        units = self.noise_dim
        for hidden in self.hidden:
            specs += [Linear(units, hidden), ReLU()]
            units = hidden
        return specs + [Linear(units, self.output_width), Sigmoid()]


CONFIG_TYPES = {
    CLASSIFIER: ClassifierConfig,
    DISCRIMINATOR: DiscriminatorConfig,
    GENERATOR: GeneratorConfig,
}


def _config_from_dict(kind: str, data: Dict[str, Any]):
    if kind not in CONFIG_TYPES:
        raise CheckpointError(f"未知模型类型: {kind}")
    data = dict(data)
    for key in ('channels', 'hidden', 'lattice_columns'):
        if key in data:
            data[key] = tuple(data[key])
    try:
        return CONFIG_TYPES[kind](**data)
    except TypeError as e:
        raise CheckpointError(f"{kind} 配置字段无效: {e}") from e


class Model:
    """按顺序排列的层；卷积模型在内部把 (…, 95) 输入变形为单通道 (…, 1, 95)"""

    def __init__(self, config, layers: List[LayerState], metadata: Optional[Dict[str, Any]] = None):
        self.config = config
        self.kind = config.kind
        self.layers = layers
        self.metadata: Dict[str, Any] = metadata or {}

    @property
    def input_width(self) -> int:
        return self.config.input_width

    @property
    def is_convolutional(self) -> bool:
        return self.kind in (CLASSIFIER, DISCRIMINATOR)

    def _prepare(self, x) -> Tuple[np.ndarray, Tuple[int, ...]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_width:
            raise DimensionError(f"{self.kind}: 期望输入宽度 {self.input_width}, 实际形状 {x.shape}")
        if self.is_convolutional:
            return (x[np.newaxis] if x.ndim == 1 else x[:, np.newaxis, :]), x.shape
        return x, x.shape

    def forward(self, x) -> Tuple[np.ndarray, List]:
        """返回 (输出, 各层 cache)"""
        activation, input_shape = self._prepare(x)
        caches = []
        for layer in self.layers:
            activation, cache = forward(layer, activation)
            caches.append(cache)
        return activation, [input_shape] + caches

    def backward(self, caches: List, grad_output: np.ndarray) -> np.ndarray:
        """沿整条链反向传播，返回对原始输入的梯度；参数梯度累加"""
        input_shape, layer_caches = caches[0], caches[1:]
        grad = grad_output
        for layer, cache in zip(reversed(self.layers), reversed(layer_caches)):
            grad = backward(layer, cache, grad)
        return grad.reshape(input_shape)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def zero_grads(self):
        zero_grads(self.layers)

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)

    def predict_batch(self, features: np.ndarray, batch_size: int = 512) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (预测类别索引, log_probs)"""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionError(f"{self.kind}: predict_batch 需要二维输入, 实际形状 {features.shape}")
        outputs = [self(features[start:start + batch_size]) for start in range(0, features.shape[0], batch_size)]
        log_probs = np.concatenate(outputs) if outputs else np.zeros((0, NUM_CLASSES))
        return log_probs.argmax(axis=1), log_probs

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        """生成器采样 G(z)"""
        if self.kind != GENERATOR:
            raise DimensionError(f"{self.kind} 不是生成器")
        return self(rng.normal((n, self.config.noise_dim)))


def _build(config, rng: Rng) -> Model:
    layers = [build_layer(spec, rng) for spec in config.layer_specs()]
    model = Model(config, layers)
    logger.debug(f"已构建 {model.kind}: {model.parameter_count()} 个参数")
    return model


def build_classifier(config: Optional[ClassifierConfig] = None, rng: Optional[Rng] = None) -> Model:
    return _build(config or ClassifierConfig(), rng or Rng(0))


def build_discriminator(config: Optional[DiscriminatorConfig] = None, rng: Optional[Rng] = None) -> Model:
    return _build(config or DiscriminatorConfig(), rng or Rng(0))


def build_generator(config: Optional[GeneratorConfig] = None, rng: Optional[Rng] = None) -> Model:
    return _build(config or GeneratorConfig(), rng or Rng(0))


def predict(model: Model, x) -> Tuple[ClassLabel, np.ndarray]:
    """单样本预测；argmax 并列时取最小类别索引"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_width,):
        raise DimensionError(f"predict: 期望长度 {model.input_width}, 实际形状 {x.shape}")
    log_probs = model(x)
    return CLASS_LABELS[int(np.argmax(log_probs))], log_probs


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    eval_accuracy: Optional[float] = None


@dataclass
class TrainingHistory:
    epochs: List[EpochRecord] = field(default_factory=list)

    def to_dict(self):
        return {'epochs': [asdict(record) for record in self.epochs]}


def accuracy(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    predictions, _ = model.predict_batch(dataset.features)
    return float(np.mean(predictions == dataset.labels))


def train_classifier(model: Model, train: Dataset, config: ClassifierTrainConfig, rng: Rng,
                     eval_set: Optional[Dataset] = None) -> TrainingHistory:
    """小批量训练：交叉熵 + Adam/SGD，每轮重新洗牌"""
    config.validate()
    optimizer = create_optimizer(OptimizerConfig(kind=config.optimizer, lr=config.lr))
    history = TrainingHistory()
    n = len(train)
    model.zero_grads()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            log_probs, caches = model.forward(train.features[batch])
            loss, grad = batch_cross_entropy(log_probs, train.labels[batch])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, f"分类器训练在第 {epoch} 轮出现非有限损失")
            model.backward(caches, grad)
            optimizer.step(model.layers)
            total_loss += loss * batch.size
            correct += int(np.sum(log_probs.argmax(axis=1) == train.labels[batch]))
        record = EpochRecord(epoch=epoch, loss=total_loss / n, train_accuracy=correct / n)
        if eval_set is not None:
            record.eval_accuracy = accuracy(model, eval_set)
        history.epochs.append(record)
        logger.info(f"第 {epoch}/{config.epochs} 轮: loss={record.loss:.5f}, "
                    f"train_acc={record.train_accuracy:.4f}, eval_acc={record.eval_accuracy}")
    model.metadata.update({
        'epochs': config.epochs,
        'final_loss': history.epochs[-1].loss,
    })
    return history


# ---------------------------------------------------------------------------
# 检查点: "AIDM1" | u16 版本 | u32 头长度 | JSON 头 | 小端 f64 参数块（按层顺序、参数名排序）
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: str):
    header = {
        'kind': model.kind,
        'config': asdict(model.config),
        'layers': [
            {'spec': layer.spec.describe(),
             'params': {name: list(layer.params[name].shape) for name in sorted(layer.params)}}
            for layer in model.layers
        ],
        'metadata': model.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<HI', CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for layer in model.layers:
            for name in sorted(layer.params):
                f.write(layer.params[name].astype('<f8').tobytes())
    logger.info(f"已保存 {model.kind} 检查点: {path}")


def load_checkpoint(path: str, expected_kind: Optional[str] = None) -> Model:
    """读取检查点；文件截断、魔数/版本错误、形状或类型不符均抛出 CheckpointError"""
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"无法读取检查点 {path}: {e}") from e

    prefix = len(CHECKPOINT_MAGIC) + 6
    if len(blob) < prefix or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"检查点魔数错误: {path}")
    version, header_length = struct.unpack('<HI', blob[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"不支持的检查点版本 {version}: {path}")
    try:
        header = json.loads(blob[prefix:prefix + header_length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"检查点头部损坏: {path}") from e

    kind = header.get('kind')
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"检查点类型为 {kind}, 期望 {expected_kind}: {path}")
    config = _config_from_dict(kind, header.get('config', {}))
    specs = config.layer_specs()
    described = header.get('layers', [])
    if len(described) != len(specs) or any(d['spec'] != s.describe() for d, s in zip(described, specs)):
        raise CheckpointError(f"检查点层结构与配置不一致: {path}")

    offset = prefix + header_length
    layers = []
    for spec in specs:
        params = {}
        shapes = spec.param_shapes()
        for name in sorted(shapes):
            count = int(np.prod(shapes[name]))
            end = offset + count * 8
            if end > len(blob):
                raise CheckpointError(f"检查点文件被截断: {path}")
            params[name] = np.frombuffer(blob, dtype='<f8', count=count, offset=offset).reshape(shapes[name]).copy()
            offset = end
        layers.append(LayerState(spec=spec, params=params))
    if offset != len(blob):
        raise CheckpointError(f"检查点末尾存在多余数据: {path}")
    return Model(config, layers, metadata=header.get('metadata', {}))
