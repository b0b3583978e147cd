"""
异常层次结构，每个异常携带命令行退出码
"""


class AdvidsError(Exception):
    """所有错误的基类"""

    exit_code = 1


class InputError(AdvidsError):
    """输入错误（退出码 1）"""

    exit_code = 1


class IngestionError(InputError):
    """CSV读取或清洗失败"""


class SchemaError(InputError):
    """特征模式拟合/编码失败"""


class ConfigError(InputError):
    """配置无效"""


class DimensionError(InputError):
    """张量形状不匹配"""


class DomainError(InputError):
    """取值超出定义域（例如类别索引越界）"""


class UsageError(InputError):
    """API调用顺序错误，例如cache与层不匹配"""


class SplitError(InputError):
    """分层划分失败"""


class MetricsError(InputError):
    """指标无法计算"""


class StatsError(InputError):
    """扰动统计无法计算"""


class CheckpointError(InputError):
    """检查点文件损坏或与配置不匹配"""


class ArtifactConflictError(AdvidsError):
    """产物已存在或目录被锁定（退出码 2）"""

    exit_code = 2


class MissingPrerequisiteError(AdvidsError):
    """缺少上游阶段的产物（退出码 3）"""

    exit_code = 3

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class DivergenceError(AdvidsError):
    """训练出现非有限损失（退出码 4）"""

    exit_code = 4

    def __init__(self, checkpoint_index: int, message: str):
        super().__init__(message)
        self.checkpoint_index = checkpoint_index
