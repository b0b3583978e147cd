"""
确定性张量与层库：前向传播、解析反向传播（含对输入的梯度）、损失函数与优化器

张量直接使用 float64 的 numpy 数组，秩为 1~3；批量维度在最前。
卷积采用互相关约定（不翻转卷积核）。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advids.exceptions import ConfigError, DimensionError, DomainError, UsageError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

# bce_loss 的概率裁剪下限 ε_c
BCE_EPS = 1e-7
# Sigmoid 输出严格保持在 (0, 1) 内
SIGMOID_BOUND = 1e-12


def as_tensor(values, name: str = "tensor") -> Tensor:
    """转换为 float64 张量并校验秩与有限性"""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim < 1 or array.ndim > 3:
        raise DimensionError(f"{name}: 秩必须在 1~3 之间, 实际形状 {array.shape}")
    if 0 in array.shape:
        raise DimensionError(f"{name}: 形状各维必须为正, 实际形状 {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{name}: 包含 NaN 或 Inf")
    return array


def sign(values: Tensor) -> Tensor:
    """符号函数，sign(0) = 0"""
    return np.sign(values)


@dataclass
class Rng:
    """带种子的随机数源；相同种子产生逐位相同的序列"""

    seed: int
    algorithm: str = "PCG64"
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.algorithm != "PCG64":
            raise ConfigError(f"不支持的随机数算法: {self.algorithm}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"种子必须是 64 位无符号整数: {self.seed}")
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: int) -> 'Rng':
        """派生独立子流，用于权重初始化、噪声、洗牌等不同用途"""
        child_seed = int(np.random.SeedSequence(self.seed, spawn_key=(key,)).generate_state(1, np.uint64)[0])
        return Rng(child_seed, self.algorithm)

    def uniform(self, low: float, high: float, shape) -> Tensor:
        """[low, high) 上的均匀分布"""
        return self._generator.uniform(low, high, size=shape)

    def normal(self, shape) -> Tensor:
        """标准正态分布 N(0, 1)"""
        return self._generator.standard_normal(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        """0..n-1 的随机排列，用于洗牌"""
        return self._generator.permutation(n)

    def integers(self, low: int, high: int, shape=None):
        """[low, high) 上的均匀整数；shape 为 None 时返回单个整数"""
        return self._generator.integers(low, high, size=shape)


# ---------------------------------------------------------------------------
# 层规格
# ---------------------------------------------------------------------------

class LayerSpec:
    """层规格基类"""

    kind = "layer"

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """参数名 -> 形状；无参数层返回空字典"""
        return {}

    def fan_in(self) -> int:
        """初始化时用于均匀分布上下界 sqrt(1/fan_in)"""
        return 1

    def forward(self, params: Dict[str, Tensor], x: Tensor):
        """返回 (输出, 反向传播所需的中间量)"""
        raise NotImplementedError

    def backward(self, params: Dict[str, Tensor], grads: Dict[str, Tensor], saved, grad_output: Tensor) -> Tensor:
        """返回对输入的梯度，并累加参数梯度"""
        raise NotImplementedError

    def describe(self) -> Dict:
        """写入检查点头部的层描述，可经 JSON 往返"""
        return {'kind': self.kind}


def _require_positive(kind: str, **values):
    for name, value in values.items():
        if value < 1:
            raise ConfigError(f"{kind}.{name} 必须 >= 1: {value}")


def _as_batch(x: Tensor, rank: int, label: str, shape_hint: str) -> Tuple[Tensor, bool]:
    """把单样本输入提升为批量输入"""
    if x.ndim == rank - 1:
        return x[np.newaxis], False
    if x.ndim == rank:
        return x, True
    raise DimensionError(f"{label}: 期望输入形状 {shape_hint}, 实际 {x.shape}")


@dataclass(frozen=True)
class Conv1d(LayerSpec):
    in_channels: int
    out_channels: int
    kernel_size: int
    padding: int = 0

    kind = "conv1d"

    def __post_init__(self):
        _require_positive("Conv1d", in_channels=self.in_channels, out_channels=self.out_channels,
                          kernel_size=self.kernel_size)
        if self.padding < 0:
            raise ConfigError(f"Conv1d.padding 必须 >= 0: {self.padding}")

    def param_shapes(self):
        return {
            'weight': (self.out_channels, self.in_channels, self.kernel_size),
            'bias': (self.out_channels,),
        }

    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size

    def output_length(self, length: int) -> int:
        """步长为 1 时的输出长度"""
        return length + 2 * self.padding - self.kernel_size + 1

    def forward(self, params, x):
        batch, batched = _as_batch(x, 3, repr(self), f"({self.in_channels}, L)")
        if batch.shape[1] != self.in_channels:
            raise DimensionError(f"{self!r}: 期望 {self.in_channels} 个输入通道, 实际形状 {x.shape}")
        out_length = self.output_length(batch.shape[2])
        if out_length < 1:
            raise DimensionError(f"{self!r}: 输入长度 {batch.shape[2]} 过短, 实际形状 {x.shape}")
        padded = np.pad(batch, ((0, 0), (0, 0), (self.padding, self.padding)))
        windows = sliding_window_view(padded, self.kernel_size, axis=2)  # (B, C, Lout, k)
        out = np.tensordot(windows, params['weight'], axes=([1, 3], [1, 2]))  # (B, Lout, O)
        out = out.transpose(0, 2, 1) + params['bias'][np.newaxis, :, np.newaxis]
        out = np.ascontiguousarray(out)
        return (out if batched else out[0]), (windows, batch.shape, batched)

    def backward(self, params, grads, saved, grad_output):
        windows, input_shape, batched = saved
        grad = grad_output if batched else grad_output[np.newaxis]
        weight = params['weight']
        grads['weight'] += np.tensordot(grad, windows, axes=([0, 2], [0, 2]))
        grads['bias'] += grad.sum(axis=(0, 2))
        length = input_shape[2]
        out_length = grad.shape[2]
        grad_padded = np.zeros((input_shape[0], input_shape[1], length + 2 * self.padding))
        for offset in range(self.kernel_size):
            grad_padded[:, :, offset:offset + out_length] += np.einsum('oc,bol->bcl', weight[:, :, offset], grad)
        grad_input = grad_padded[:, :, self.padding:self.padding + length]
        grad_input = np.ascontiguousarray(grad_input)
        return grad_input if batched else grad_input[0]

    def describe(self):
        return {'kind': self.kind, 'in_channels': self.in_channels, 'out_channels': self.out_channels,
                'kernel_size': self.kernel_size, 'padding': self.padding}


@dataclass(frozen=True)
class ReLU(LayerSpec):
    kind = "relu"

    def forward(self, params, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, params, grads, saved, grad_output):
        return grad_output * saved


@dataclass(frozen=True)
class MaxPool1d(LayerSpec):
    window: int
    stride: int

    kind = "maxpool1d"

    def __post_init__(self):
        _require_positive("MaxPool1d", window=self.window, stride=self.stride)

    def forward(self, params, x):
        batch, batched = _as_batch(x, 3, repr(self), "(C, L)")
        if batch.shape[2] < self.window:
            raise DimensionError(f"{self!r}: 输入长度小于池化窗口, 实际形状 {x.shape}")
        windows = sliding_window_view(batch, self.window, axis=2)[:, :, ::self.stride, :]
        argmax = windows.argmax(axis=3)
        out = np.take_along_axis(windows, argmax[..., np.newaxis], axis=3)[..., 0]
        out = np.ascontiguousarray(out)
        return (out if batched else out[0]), (argmax, batch.shape, batched)

    def backward(self, params, grads, saved, grad_output):
        argmax, input_shape, batched = saved
        grad = grad_output if batched else grad_output[np.newaxis]
        grad_input = np.zeros(input_shape)
        b, c, l = np.indices(argmax.shape)
        positions = l * self.stride + argmax
        np.add.at(grad_input, (b, c, positions), grad)
        return grad_input if batched else grad_input[0]

    def describe(self):
        return {'kind': self.kind, 'window': self.window, 'stride': self.stride}


@dataclass(frozen=True)
class Flatten(LayerSpec):
    """(C, L) -> (C*L,)，批量时保留第一维"""

    kind = "flatten"

    def forward(self, params, x):
        batch, batched = _as_batch(x, 3, repr(self), "(C, L)")
        out = batch.reshape(batch.shape[0], -1)
        return (out if batched else out[0]), (batch.shape, batched)

    def backward(self, params, grads, saved, grad_output):
        input_shape, batched = saved
        grad = grad_output if batched else grad_output[np.newaxis]
        grad_input = grad.reshape(input_shape)
        return grad_input if batched else grad_input[0]


@dataclass(frozen=True)
class Linear(LayerSpec):
    in_units: int
    out_units: int

    kind = "linear"

    def __post_init__(self):
        _require_positive("Linear", in_units=self.in_units, out_units=self.out_units)

    def param_shapes(self):
        return {'weight': (self.out_units, self.in_units), 'bias': (self.out_units,)}

    def fan_in(self) -> int:
        return self.in_units

    def forward(self, params, x):
        batch, batched = _as_batch(x, 2, repr(self), f"({self.in_units},)")
        if batch.shape[1] != self.in_units:
            raise DimensionError(f"{self!r}: 期望输入形状 ({self.in_units},), 实际 {x.shape}")
        out = batch @ params['weight'].T + params['bias']
        return (out if batched else out[0]), (batch, batched)

    def backward(self, params, grads, saved, grad_output):
        batch, batched = saved
        grad = grad_output if batched else grad_output[np.newaxis]
        grads['weight'] += grad.T @ batch
        grads['bias'] += grad.sum(axis=0)
        grad_input = grad @ params['weight']
        return grad_input if batched else grad_input[0]

    def describe(self):
        return {'kind': self.kind, 'in_units': self.in_units, 'out_units': self.out_units}


@dataclass(frozen=True)
class LogSoftmax(LayerSpec):
    """沿最后一维计算 log-softmax"""

    kind = "logsoftmax"

    def forward(self, params, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return out, out

    def backward(self, params, grads, saved, grad_output):
        softmax = np.exp(saved)
        return grad_output - softmax * grad_output.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Sigmoid(LayerSpec):
    kind = "sigmoid"

    def forward(self, params, x):
        out = np.exp(-np.logaddexp(0.0, -x))
        out = np.clip(out, SIGMOID_BOUND, 1.0 - SIGMOID_BOUND)
        return out, out

    def backward(self, params, grads, saved, grad_output):
        return grad_output * saved * (1.0 - saved)


@dataclass(frozen=True)
class DeviationGain(LayerSpec):
    """
    把输入偏离合法取值域的部分放大并压缩到 (-1, 1)：out = p(x) + tanh(gain * (x - p(x)))

    p 把 lattice 列（二值与 one-hot 列）取整到 {0, 1}，其余列裁剪到 [0, 1]。
    取值域内的输入原样通过。作用于最后一维。
    """

    width: int
    lattice: Tuple[int, ...] = ()
    gain: float = 1.0

    kind = "deviation_gain"

    def __post_init__(self):
        _require_positive("DeviationGain", width=self.width)
        if not self.gain >= 1.0:
            raise ConfigError(f"DeviationGain.gain 必须 >= 1: {self.gain}")
        if any(not 0 <= index < self.width for index in self.lattice):
            raise ConfigError(f"DeviationGain.lattice 列索引超出 [0, {self.width}): {self.lattice}")

    def lattice_mask(self) -> np.ndarray:
        """取整列的布尔掩码"""
        mask = np.zeros(self.width, dtype=bool)
        if self.lattice:
            mask[np.asarray(self.lattice, dtype=np.int64)] = True
        return mask

    def forward(self, params, x):
        if x.shape[-1] != self.width:
            raise DimensionError(f"{self!r}: 期望最后一维为 {self.width}, 实际形状 {x.shape}")
        lattice = self.lattice_mask()
        projected = np.where(lattice, (x >= 0.5).astype(np.float64), np.clip(x, 0.0, 1.0))
        squashed = np.tanh(self.gain * (x - projected))
        # 取整列在 0.5 处跳变，其余位置斜率为 gain * (1 - tanh^2)；连续列在 [0, 1] 内斜率为 1
        slope = np.where(lattice | (x < 0.0) | (x > 1.0), self.gain * (1.0 - squashed * squashed), 1.0)
        return projected + squashed, slope

    def backward(self, params, grads, saved, grad_output):
        return grad_output * saved

    def describe(self):
        return {'kind': self.kind, 'width': self.width, 'lattice': list(self.lattice), 'gain': float(self.gain)}


# ---------------------------------------------------------------------------
# 层状态与前向/反向
# ---------------------------------------------------------------------------

@dataclass
class LayerState:
    """层规格 + 参数 + 同形状的梯度"""

    spec: LayerSpec
    params: Dict[str, Tensor] = field(default_factory=dict)
    grads: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.param_shapes()
        if set(self.params) != set(shapes):
            raise DimensionError(f"{self.spec!r}: 参数名 {sorted(self.params)} 与期望 {sorted(shapes)} 不一致")
        for name, shape in shapes.items():
            self.params[name] = np.asarray(self.params[name], dtype=np.float64)
            if self.params[name].shape != shape:
                raise DimensionError(f"{self.spec!r}: 参数 {name} 形状 {self.params[name].shape} != {shape}")
        if not self.grads:
            self.grads = {name: np.zeros(shape) for name, shape in shapes.items()}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self):
        for grad in self.grads.values():
            grad.fill(0.0)


@dataclass
class LayerCache:
    """forward 产生的不透明缓存"""

    spec: LayerSpec
    output_shape: Tuple[int, ...]
    saved: object = None


def build_layer(spec: LayerSpec, rng: Optional[Rng] = None) -> LayerState:
    """初始化层：权重与偏置均取 uniform(-a, a)，a = sqrt(1/fan_in)"""
    params = {}
    shapes = spec.param_shapes()
    if shapes:
        if rng is None:
            raise UsageError(f"{spec!r}: 带参数的层需要随机数源")
        bound = np.sqrt(1.0 / spec.fan_in())
        for name in sorted(shapes):
            params[name] = rng.uniform(-bound, bound, shapes[name])
    return LayerState(spec=spec, params=params)


def forward(layer: LayerState, input: Tensor) -> Tuple[Tensor, LayerCache]:
    """前向传播，返回 (输出, cache)"""
    x = np.asarray(input, dtype=np.float64)
    output, saved = layer.spec.forward(layer.params, x)
    return output, LayerCache(spec=layer.spec, output_shape=output.shape, saved=saved)


def backward(layer: LayerState, cache: LayerCache, grad_output: Tensor) -> Tensor:
    """反向传播：返回对输入的梯度，参数梯度累加（不覆盖）"""
    if not isinstance(cache, LayerCache) or cache.spec is not layer.spec:
        raise UsageError(f"cache 与层 {layer.spec!r} 不匹配")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != cache.output_shape:
        raise DimensionError(f"{layer.spec!r}: grad_output 形状 {grad_output.shape} != 输出形状 {cache.output_shape}")
    return layer.spec.backward(layer.params, layer.grads, cache.saved, grad_output)


def zero_grads(layers: List[LayerState]):
    """清零各层累加的参数梯度"""
    for layer in layers:
        layer.zero_grads()


# ---------------------------------------------------------------------------
# 损失函数
# ---------------------------------------------------------------------------

def cross_entropy_loss(log_probs: Tensor, label: int) -> Tuple[float, Tensor]:
    """
    交叉熵 loss = -log_probs[label]

    返回的梯度是对 log_probs 的梯度（真实类别处为 -1，其余为 0）；
    经 LogSoftmax.backward 传回 logits 后即为 softmax - onehot。
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 1:
        raise DimensionError(f"cross_entropy_loss: 期望一维 log_probs, 实际形状 {log_probs.shape}")
    if not 0 <= int(label) < log_probs.shape[0]:
        raise DomainError(f"类别索引 {label} 超出范围 [0, {log_probs.shape[0]})")
    grad = np.zeros_like(log_probs)
    grad[int(label)] = -1.0
    return float(-log_probs[int(label)]), grad


def batch_cross_entropy(log_probs: Tensor, labels, reduction: str = "mean") -> Tuple[float, Tensor]:
    """批量交叉熵；reduction='sum' 时每个样本的梯度互不缩放"""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise DimensionError(f"batch_cross_entropy: log_probs {log_probs.shape} 与 labels {labels.shape} 不匹配")
    if labels.size and (labels.min() < 0 or labels.max() >= log_probs.shape[1]):
        raise DomainError(f"类别索引超出范围 [0, {log_probs.shape[1]})")
    rows = np.arange(labels.shape[0])
    losses = -log_probs[rows, labels]
    grad = np.zeros_like(log_probs)
    grad[rows, labels] = -1.0
    if reduction == "sum":
        return float(losses.sum()), grad
    if reduction == "mean":
        return float(losses.mean()), grad / labels.shape[0]
    raise UsageError(f"未知 reduction: {reduction}")


def bce_loss(prob: float, target: int) -> Tuple[float, float]:
    """二元交叉熵，概率先裁剪到 [BCE_EPS, 1 - BCE_EPS]"""
    if target not in (0, 1):
        raise DomainError(f"target 必须是 0 或 1: {target}")
    p = float(np.clip(prob, BCE_EPS, 1.0 - BCE_EPS))
    loss = -(target * np.log(p) + (1 - target) * np.log(1.0 - p))
    grad = (p - target) / (p * (1.0 - p))
    return float(loss), float(grad)


def batch_bce(probs: Tensor, targets, reduction: str = "mean") -> Tuple[float, Tensor]:
    """批量二元交叉熵，梯度形状与 probs 相同"""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.float64).reshape(-1), (probs.shape[0],))
    flat = np.clip(probs.reshape(probs.shape[0], -1)[:, 0], BCE_EPS, 1.0 - BCE_EPS)
    losses = -(targets * np.log(flat) + (1.0 - targets) * np.log(1.0 - flat))
    grad = ((flat - targets) / (flat * (1.0 - flat))).reshape(probs.shape)
    if reduction == "sum":
        return float(losses.sum()), grad
    if reduction == "mean":
        return float(losses.mean()), grad / probs.shape[0]
    raise UsageError(f"未知 reduction: {reduction}")


# ---------------------------------------------------------------------------
# 优化器
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"  # adam 或 sgd
    lr: float = 0.001
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"学习率必须 > 0: {self.lr}")
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"未知优化器: {self.kind}")
        if not all(0 <= beta < 1 for beta in self.betas):
            raise ConfigError(f"betas 必须在 [0, 1) 内: {self.betas}")


class Optimizer:
    """优化器基类；step 之后梯度清零"""

    def __init__(self, config: OptimizerConfig):
        config.validate()
        self.config = config

    def step(self, layers: List[LayerState]):
        """按累加的梯度原地更新参数"""
        for layer in layers:
            for name in layer.params:
                self._update(layer, name)
        zero_grads(layers)

    def _update(self, layer: LayerState, name: str):
        raise NotImplementedError


class SGD(Optimizer):
    """w <- w - lr * g"""

    def _update(self, layer, name):
        layer.params[name] -= self.config.lr * layer.grads[name]


class Adam(Optimizer):
    """带偏差修正的 Adam"""

    def __init__(self, config: OptimizerConfig):
        super().__init__(config)
        self._moments: Dict[Tuple[int, str], List] = {}

    def _update(self, layer, name):
        beta1, beta2 = self.config.betas
        key = (id(layer), name)
        if key not in self._moments:
            self._moments[key] = [np.zeros_like(layer.params[name]), np.zeros_like(layer.params[name]), 0]
        state = self._moments[key]
        grad = layer.grads[name]
        state[2] += 1
        state[0] = beta1 * state[0] + (1.0 - beta1) * grad
        state[1] = beta2 * state[1] + (1.0 - beta2) * grad * grad
        m_hat = state[0] / (1.0 - beta1 ** state[2])
        v_hat = state[1] / (1.0 - beta2 ** state[2])
        layer.params[name] -= self.config.lr * m_hat / (np.sqrt(v_hat) + self.config.eps)


def create_optimizer(config: OptimizerConfig) -> Optimizer:
    """创建优化器实例"""
    config.validate()
    if config.kind == "sgd":
        return SGD(config)
    return Adam(config)


def optimizer_step(layers: List[LayerState], hyper: OptimizerConfig) -> List[LayerState]:
    """单步更新（Adam 为第 1 步）"""
    create_optimizer(hyper).step(layers)
    return layers


# ---------------------------------------------------------------------------
# 梯度检查
# ---------------------------------------------------------------------------

def _relative_error(analytic: Tensor, numeric: Tensor) -> float:
    denominator = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-8)
    return float(np.linalg.norm(analytic - numeric)) / denominator


def _central_difference(objective, array: Tensor, h: float) -> Tensor:
    """对 array 原地扰动求中心差分"""
    numeric = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        plus = objective()
        array[index] = original - h
        minus = objective()
        array[index] = original
        numeric[index] = (plus - minus) / (2.0 * h)
    return numeric


def gradient_check(layer: LayerState, input: Tensor, tol: float = 1e-4, h: float = 1e-5, seed: int = 0) -> float:
    """
    用中心差分校验解析梯度（输入与全部参数），返回最大相对误差

    标量目标为 sum(forward(x) * r)，r 为固定随机投影。
    ReLU/MaxPool 需由调用方保证输入远离不可导点。层原有的梯度在返回前恢复。
    """
    x = as_tensor(input, "gradient_check.input").copy()
    output, cache = forward(layer, x)
    projection = Rng(seed).normal(output.shape)

    saved_grads = {name: grad.copy() for name, grad in layer.grads.items()}
    layer.zero_grads()
    analytic_input = backward(layer, cache, projection)
    analytic_params = {name: grad.copy() for name, grad in layer.grads.items()}

    def objective() -> float:
        return float(np.sum(forward(layer, x)[0] * projection))

    errors = [_relative_error(analytic_input, _central_difference(objective, x, h))]
    for name in sorted(layer.params):
        numeric = _central_difference(objective, layer.params[name], h)
        errors.append(_relative_error(analytic_params[name], numeric))

    for name, grad in saved_grads.items():
        layer.grads[name][...] = grad

    worst = max(errors)
    if worst > tol:
        logger.warning(f"梯度检查未通过: {layer.spec!r}, 最大相对误差 {worst:.3e} > {tol:.1e}")
    return worst
