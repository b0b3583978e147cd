import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, Any, Iterable, List, Optional

import yaml
from dotenv import load_dotenv

from advids.data import DEFAULT_CATEGORICAL_COLUMNS, DEFAULT_DROP_COLUMNS, ENCODED_WIDTH
from advids.exceptions import ConfigError

load_dotenv()

DEFAULT_SEED = 42
ENV_PREFIX = "ADVIDS_"


@dataclass
class DataConfig:
    """数据预处理配置"""
    dataset_path: str = ""
    label_column: str = "Attack_type"
    grouping_path: Optional[str] = None  # JSON/YAML: 列名 -> application|network
    categorical_columns: List[str] = field(default_factory=lambda: list(DEFAULT_CATEGORICAL_COLUMNS))
    drop_columns: List[str] = field(default_factory=lambda: list(DEFAULT_DROP_COLUMNS))
    expected_width: int = ENCODED_WIDTH
    test_fraction: float = 0.2
    exact_counts: bool = False  # 按内置 Edge-IIoTset 分布表的测试集计数划分
    subsample_fraction: Optional[float] = None  # 桌面规模运行，例如 0.05
    min_per_class: int = 50
    categorical_threshold: float = 0.5  # 非数值单元格超过该比例的列按类别列处理

    def validate(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction 必须在 (0, 1) 内: {self.test_fraction}")
        if self.subsample_fraction is not None and not 0 < self.subsample_fraction <= 1:
            raise ConfigError(f"subsample_fraction 必须在 (0, 1] 内: {self.subsample_fraction}")
        if self.expected_width < 1:
            raise ConfigError(f"expected_width 必须 >= 1: {self.expected_width}")
        if not 0 <= self.categorical_threshold <= 1:
            raise ConfigError(f"categorical_threshold 必须在 [0, 1] 内: {self.categorical_threshold}")


@dataclass
class ClassifierTrainConfig:
    """CNN分类器训练配置"""
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.001
    optimizer: str = "adam"  # adam 或 sgd

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs 必须 >= 1: {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 >= 1: {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"学习率必须 > 0: {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"未知优化器: {self.optimizer}")


@dataclass
class AttackConfig:
    """FGSM攻击配置"""
    epsilon: float = 0.01
    filter_successful: bool = True
    filter_valid: bool = False
    clip: bool = False  # 默认不裁剪，由有效性分析衡量真实性
    batch_size: int = 256

    def validate(self):
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon 必须在 [0, 1] 内: {self.epsilon}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 >= 1: {self.batch_size}")


@dataclass
class GanConfig:
    """GAN训练配置"""
    noise_dim: int = 64
    epochs: int = 15
    batch_size: int = 64
    lr_g: float = 0.0002
    lr_d: float = 0.0002
    checkpoint_interval: int = 50  # 批次
    threshold: float = 0.5
    seed: Optional[int] = None  # 为空时使用全局种子
    fgsm_in_training: bool = False
    adv_weight: float = 1.0  # 判别器损失中 FGSM 流的权重
    deviation_gain: float = 200.0  # 判别器输入端的取值域偏离放大倍数，1 表示不加该层
    calibrate: bool = False  # 在留出的 FGSM 验证集上校准阈值
    target_real_recall: float = 0.99
    validation_fraction: float = 0.1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs 必须 >= 1: {self.epochs}")
        if self.checkpoint_interval < 1:
            raise ConfigError(f"checkpoint_interval 必须 >= 1: {self.checkpoint_interval}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold 必须在 (0, 1) 内: {self.threshold}")
        if self.noise_dim < 1 or self.batch_size < 1:
            raise ConfigError("noise_dim 和 batch_size 必须 >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError(f"学习率必须 > 0: lr_g={self.lr_g}, lr_d={self.lr_d}")
        if self.adv_weight <= 0:
            raise ConfigError(f"adv_weight 必须 > 0: {self.adv_weight}")
        if self.deviation_gain < 1:
            raise ConfigError(f"deviation_gain 必须 >= 1: {self.deviation_gain}")
        if not 0 < self.target_real_recall <= 1:
            raise ConfigError(f"target_real_recall 必须在 (0, 1] 内: {self.target_real_recall}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction 必须在 (0, 1) 内: {self.validation_fraction}")


@dataclass
class LogConfig:
    """日志配置"""
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Config:
    """配置管理器"""

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config_file = config_file
        self.overrides = overrides or {}
        self._config: Dict[str, Any] = {}
        self.load_config()

    def load_config(self):
        """加载配置，优先级：环境变量 > 配置文件 > 默认值"""
        file_config: Dict[str, Any] = {}
        if self.config_file:
            if not os.path.exists(self.config_file):
                raise ConfigError(f"配置文件不存在: {self.config_file}")
            with open(self.config_file, 'r', encoding='utf-8') as f:
                # JSON 是 YAML 的子集，两种格式都由 safe_load 解析
                try:
                    file_config = yaml.safe_load(f) or {}
                except yaml.YAMLError as e:
                    raise ConfigError(f"配置文件解析失败: {self.config_file}: {e}") from e
        file_config = _deep_merge(file_config, self.overrides)
        # 命令行 --seed 优先于环境变量
        seed = self.overrides.get('seed', os.getenv(f'{ENV_PREFIX}SEED', file_config.get('seed', DEFAULT_SEED)))

        self._config = {
            'seed': int(seed),
            'artifacts_dir': os.getenv(f'{ENV_PREFIX}ARTIFACTS_DIR', file_config.get('artifacts_dir', 'artifacts')),
            'data': self._load_data_config(file_config.get('data', {})),
            'classifier': self._load_classifier_config(file_config.get('classifier', {})),
            'attack': self._load_attack_config(file_config.get('attack', {})),
            'gan': self._load_gan_config(file_config.get('gan', {})),
            'log': self._load_log_config(file_config.get('log', {})),
        }
        self.validate()

    def _load_data_config(self, file_config: Dict) -> DataConfig:
        """加载数据配置"""
        defaults = DataConfig()
        return DataConfig(
            dataset_path=os.getenv(f'{ENV_PREFIX}DATASET_PATH', file_config.get('dataset_path', defaults.dataset_path)),
            label_column=os.getenv(f'{ENV_PREFIX}LABEL_COLUMN', file_config.get('label_column', defaults.label_column)),
            grouping_path=os.getenv(f'{ENV_PREFIX}GROUPING_PATH', file_config.get('grouping_path')),
            categorical_columns=list(file_config.get('categorical_columns', defaults.categorical_columns)),
            drop_columns=list(file_config.get('drop_columns', defaults.drop_columns)),
            expected_width=int(file_config.get('expected_width', defaults.expected_width)),
            test_fraction=float(os.getenv(f'{ENV_PREFIX}TEST_FRACTION',
                                          file_config.get('test_fraction', defaults.test_fraction))),
            exact_counts=str(file_config.get('exact_counts', defaults.exact_counts)).lower() == 'true',
            subsample_fraction=_optional_float(os.getenv(f'{ENV_PREFIX}SUBSAMPLE_FRACTION',
                                                         file_config.get('subsample_fraction'))),
            min_per_class=int(file_config.get('min_per_class', defaults.min_per_class)),
            categorical_threshold=float(file_config.get('categorical_threshold', defaults.categorical_threshold)),
        )

    def _load_classifier_config(self, file_config: Dict) -> ClassifierTrainConfig:
        """加载分类器训练配置"""
        return ClassifierTrainConfig(
            epochs=int(os.getenv(f'{ENV_PREFIX}CLF_EPOCHS', file_config.get('epochs', 15))),
            batch_size=int(file_config.get('batch_size', 64)),
            lr=float(file_config.get('lr', 0.001)),
            optimizer=str(file_config.get('optimizer', 'adam')),
        )

    def _load_attack_config(self, file_config: Dict) -> AttackConfig:
        """加载攻击配置"""
        return AttackConfig(
            epsilon=float(os.getenv(f'{ENV_PREFIX}EPSILON', file_config.get('epsilon', 0.01))),
            filter_successful=str(file_config.get('filter_successful', True)).lower() == 'true',
            filter_valid=str(file_config.get('filter_valid', False)).lower() == 'true',
            clip=str(file_config.get('clip', False)).lower() == 'true',
            batch_size=int(file_config.get('batch_size', 256)),
        )

    def _load_gan_config(self, file_config: Dict) -> GanConfig:
        """加载GAN配置"""
        seed = file_config.get('seed')
        return GanConfig(
            noise_dim=int(file_config.get('noise_dim', 64)),
            epochs=int(os.getenv(f'{ENV_PREFIX}GAN_EPOCHS', file_config.get('epochs', 15))),
            batch_size=int(file_config.get('batch_size', 64)),
            lr_g=float(file_config.get('lr_g', 0.0002)),
            lr_d=float(file_config.get('lr_d', 0.0002)),
            checkpoint_interval=int(file_config.get('checkpoint_interval', 50)),
            threshold=float(file_config.get('threshold', 0.5)),
            seed=int(seed) if seed is not None else None,
            fgsm_in_training=os.getenv(f'{ENV_PREFIX}FGSM_IN_TRAINING',
                                       str(file_config.get('fgsm_in_training', False))).lower() == 'true',
            adv_weight=float(file_config.get('adv_weight', 1.0)),
            deviation_gain=float(file_config.get('deviation_gain', 200.0)),
            calibrate=str(file_config.get('calibrate', False)).lower() == 'true',
            target_real_recall=float(file_config.get('target_real_recall', 0.99)),
            validation_fraction=float(file_config.get('validation_fraction', 0.1)),
        )

    def _load_log_config(self, file_config: Dict) -> LogConfig:
        """加载日志配置"""
        defaults = LogConfig()
        return LogConfig(
            level=os.getenv(f'{ENV_PREFIX}LOG_LEVEL', file_config.get('level', defaults.level)),
            format=os.getenv(f'{ENV_PREFIX}LOG_FORMAT', file_config.get('format', defaults.format)),
        )

    def validate(self):
        """校验所有配置段"""
        self.data.validate()
        self.classifier.validate()
        self.attack.validate()
        self.gan.validate()
        if self.seed < 0:
            raise ConfigError(f"seed 必须是非负整数: {self.seed}")

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典格式"""
        return {
            'seed': self.seed,
            'artifacts_dir': self.artifacts_dir,
            'data': asdict(self.data),
            'classifier': asdict(self.classifier),
            'attack': asdict(self.attack),
            'gan': asdict(self.gan),
            'log': asdict(self.log),
        }

    def config_hash(self, sections: Optional[Iterable[str]] = None, extra: Optional[Dict[str, Any]] = None) -> str:
        """
        配置摘要，不含产物目录与日志设置

        sections 限定参与摘要的配置段（如 'seed', 'attack'）；extra 一并写入摘要，
        用于把上游阶段的摘要串联进来。
        """
        full = self.to_dict()
        full.pop('artifacts_dir')
        full.pop('log')
        document = full if sections is None else {name: full[name] for name in sections}
        if extra:
            document = {'sections': document, 'extra': extra}
        canonical = json.dumps(document, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def seed(self) -> int:
        return self._config['seed']

    @property
    def gan_seed(self) -> int:
        return self.gan.seed if self.gan.seed is not None else self.seed

    @property
    def artifacts_dir(self) -> str:
        return self._config['artifacts_dir']

    @property
    def data(self) -> DataConfig:
        return self._config['data']

    @property
    def classifier(self) -> ClassifierTrainConfig:
        return self._config['classifier']

    @property
    def attack(self) -> AttackConfig:
        return self._config['attack']

    @property
    def gan(self) -> GanConfig:
        return self._config['gan']

    @property
    def log(self) -> LogConfig:
        return self._config['log']


def _optional_float(value) -> Optional[float]:
    if value is None or value == "":
        return None
    return float(value)


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def setup_logging(log_config: Optional[LogConfig] = None):
    """设置日志"""
    log_config = log_config or LogConfig()
    logging.basicConfig(
        level=getattr(logging, log_config.level.upper(), logging.INFO),
        format=log_config.format,
        force=True,
    )
