"""
Edge-IIoTset 风格CSV的读取、清洗、特征模式拟合、编码与分层划分
"""

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from advids.exceptions import DimensionError, DomainError, IngestionError, SchemaError, SplitError
from advids.numerics import Rng

logger = logging.getLogger(__name__)

CLASS_NAMES: Tuple[str, ...] = (
    "Normal", "Backdoor", "Vulnerability_scanner", "DDoS_ICMP", "Password",
    "Port_Scanning", "DDoS_UDP", "Uploading", "DDoS_HTTP", "SQL_injection",
    "Ransomware", "DDoS_TCP", "XSS", "MITM", "Fingerprinting",
)
NUM_CLASSES = len(CLASS_NAMES)

ENCODED_WIDTH = 95
APPLICATION_WIDTH = 77
NETWORK_WIDTH = 18

APPLICATION = "application"
NETWORK = "network"
GROUPS = (APPLICATION, NETWORK)

CONTINUOUS = "continuous"
BINARY = "binary"
ONE_HOT = "one_hot"

# 数据分布表：类别 -> (训练集数量, 测试集数量)
EDGE_IIOT_DISTRIBUTION: Dict[str, Tuple[int, int]] = {
    "Normal": (1046926, 323129),
    "Backdoor": (19890, 4972),
    "Vulnerability_scanner": (40088, 10022),
    "DDoS_ICMP": (93149, 23287),
    "Password": (40122, 10031),
    "Port_Scanning": (18051, 4513),
    "DDoS_UDP": (88027, 22007),
    "Uploading": (30107, 7527),
    "DDoS_HTTP": (39929, 9982),
    "SQL_injection": (40962, 10241),
    "Ransomware": (8740, 2185),
    "DDoS_TCP": (40050, 10012),
    "XSS": (12732, 3183),
    "MITM": (320, 80),
    "Fingerprinting": (801, 200),
}

# 标识符与自由文本字段，不参与建模
DEFAULT_DROP_COLUMNS: Tuple[str, ...] = (
    "frame.time", "ip.src_host", "ip.dst_host", "arp.src.proto_ipv4", "arp.dst.proto_ipv4",
    "http.file_data", "http.request.full_uri", "icmp.transmit_timestamp", "http.request.uri.query",
    "tcp.options", "tcp.payload", "tcp.srcport", "tcp.dstport", "udp.port", "mqtt.msg", "Attack_label",
)

DEFAULT_CATEGORICAL_COLUMNS: Tuple[str, ...] = (
    "http.request.method", "http.referer", "http.request.version", "dns.qry.name.len",
    "mqtt.conack.flags", "mqtt.protoname", "mqtt.topic",
)

NETWORK_COLUMNS: Tuple[str, ...] = (
    "arp.opcode", "arp.hw.size", "icmp.checksum", "icmp.seq_le", "icmp.unused",
    "tcp.ack", "tcp.ack_raw", "tcp.checksum", "tcp.connection.fin", "tcp.connection.rst",
    "tcp.connection.syn", "tcp.connection.synack", "tcp.flags", "tcp.flags.ack", "tcp.len",
    "tcp.seq", "udp.stream", "udp.time_delta",
)

APPLICATION_COLUMNS: Tuple[str, ...] = (
    "http.content_length", "http.request.method", "http.referer", "http.request.version",
    "http.response", "http.tls_port", "dns.qry.name", "dns.qry.name.len", "dns.qry.qu",
    "dns.qry.type", "dns.retransmission", "dns.retransmit_request", "dns.retransmit_request_in",
    "mqtt.conack.flags", "mqtt.conflag.cleansess", "mqtt.conflags", "mqtt.hdrflags", "mqtt.len",
    "mqtt.msg_decoded_as", "mqtt.msgtype", "mqtt.proto_len", "mqtt.protoname", "mqtt.topic",
    "mqtt.topic_len", "mqtt.ver", "mbtcp.len", "mbtcp.trans_id", "mbtcp.unit_id",
)

DEFAULT_GROUPING: Dict[str, str] = {
    **{name: APPLICATION for name in APPLICATION_COLUMNS},
    **{name: NETWORK for name in NETWORK_COLUMNS},
}

SCHEMA_VERSION = 1
CACHE_MAGIC = b"AIDS1"


@dataclass(frozen=True)
class ClassLabel:
    """流量类别"""
    index: int
    name: str


CLASS_LABELS: Tuple[ClassLabel, ...] = tuple(ClassLabel(i, name) for i, name in enumerate(CLASS_NAMES))
_LABEL_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


def label_from_name(name: str) -> ClassLabel:
    """按类别名查找，名称区分大小写，未知名称抛出 DomainError"""
    if name not in _LABEL_INDEX:
        raise DomainError(f"未知类别: {name}")
    return CLASS_LABELS[_LABEL_INDEX[name]]


def label_from_index(index: int) -> ClassLabel:
    """按 0..14 的类别索引查找"""
    if not 0 <= int(index) < NUM_CLASSES:
        raise DomainError(f"类别索引 {index} 超出范围 [0, {NUM_CLASSES})")
    return CLASS_LABELS[int(index)]


# ---------------------------------------------------------------------------
# 原始表与清洗
# ---------------------------------------------------------------------------

@dataclass
class CleanReport:
    """清洗统计"""
    duplicates: int = 0
    corrupted: int = 0
    missing_label: int = 0
    unknown_label: int = 0
    categorical_columns: List[str] = field(default_factory=list)

    @property
    def total_removed(self) -> int:
        return self.duplicates + self.corrupted + self.missing_label + self.unknown_label

    def to_dict(self):
        return {**asdict(self), 'total_removed': self.total_removed}


@dataclass
class RawTable:
    """原始单元格（字符串）+ 标签字符串"""
    columns: List[str]
    frame: pd.DataFrame
    labels: pd.Series
    label_column: str = "Attack_type"
    cleaning: Optional[CleanReport] = None

    def __len__(self):
        return len(self.frame)

    def take(self, indices) -> 'RawTable':
        """按行号取子表，行号重新从 0 开始"""
        indices = np.asarray(indices, dtype=np.int64)
        return RawTable(
            columns=list(self.columns),
            frame=self.frame.iloc[indices].reset_index(drop=True),
            labels=self.labels.iloc[indices].reset_index(drop=True),
            label_column=self.label_column,
            cleaning=self.cleaning,
        )

    def label_indices(self) -> np.ndarray:
        """标签字符串转为类别索引"""
        return np.array([label_from_name(name).index for name in self.labels.astype(str).str.strip()],
                        dtype=np.int64)


def load_csv(path: str, label_column: str = "Attack_type", drop_columns: Iterable[str] = ()) -> RawTable:
    """读取带表头的 UTF-8 CSV，所有单元格保留为字符串"""
    if not os.path.isfile(path):
        raise IngestionError(f"无法读取文件: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding='utf-8')
    except pd.errors.ParserError as e:
        raise IngestionError(f"CSV 行列数不一致: {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise IngestionError(f"CSV 文件为空: {path}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise IngestionError(f"无法读取文件: {path}: {e}") from e

    if label_column not in frame.columns:
        raise IngestionError(f"缺少标签列 '{label_column}': {path}")

    # 字段数不足的行在 pandas 中被补为 NaN
    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        line = int(np.flatnonzero(ragged)[0]) + 2
        raise IngestionError(f"CSV 第 {line} 行列数不足: {path}")

    dropped = [name for name in drop_columns if name in frame.columns and name != label_column]
    feature_columns = [name for name in frame.columns if name != label_column and name not in dropped]
    labels = frame[label_column].reset_index(drop=True)
    logger.info(f"已读取 {path}: {len(frame)} 行, {len(feature_columns)} 个特征列, 丢弃 {len(dropped)} 列")
    return RawTable(
        columns=feature_columns,
        frame=frame[feature_columns].reset_index(drop=True),
        labels=labels,
        label_column=label_column,
    )


def _parse_numeric(series: pd.Series) -> pd.Series:
    values = pd.to_numeric(series.str.strip(), errors='coerce')
    return values.where(np.isfinite(values))


def clean(table: RawTable, categorical_columns: Iterable[str] = (), categorical_threshold: float = 0.5) -> RawTable:
    """
    去除完全重复行（保留第一条）、缺失/未知标签行、数值列无法解析的行

    未被强制指定为类别列的列中，若无法解析的单元格比例不超过 categorical_threshold，
    视为数值列，这些单元格所在行按损坏处理；否则视为类别列。
    """
    report = CleanReport()
    frame = table.frame
    labels = table.labels.astype(str).str.strip()

    combined = frame.assign(**{'__label__': labels})
    duplicated = combined.duplicated(keep='first').to_numpy()
    report.duplicates = int(duplicated.sum())
    keep = ~duplicated

    missing = (labels == "").to_numpy()
    report.missing_label = int((missing & keep).sum())
    keep &= ~missing

    unknown = ~labels.isin(CLASS_NAMES).to_numpy() & ~missing
    report.unknown_label = int((unknown & keep).sum())
    keep &= ~unknown

    forced = set(categorical_columns)
    corrupted = np.zeros(len(frame), dtype=bool)
    for name in table.columns:
        if name in forced:
            report.categorical_columns.append(name)
            continue
        failed = _parse_numeric(frame[name]).isna().to_numpy()
        candidates = failed[keep]
        fail_rate = float(candidates.mean()) if candidates.size else 0.0
        if fail_rate > categorical_threshold:
            report.categorical_columns.append(name)
            logger.info(f"列 {name} 含 {fail_rate:.1%} 非数值单元格, 按类别列处理")
        else:
            corrupted |= failed
    report.corrupted = int((corrupted & keep).sum())
    keep &= ~corrupted

    if not keep.any():
        raise IngestionError("清洗后没有剩余样本")
    logger.info(
        f"清洗完成: 保留 {int(keep.sum())} 行, 重复 {report.duplicates}, 损坏 {report.corrupted}, "
        f"缺失标签 {report.missing_label}, 未知标签 {report.unknown_label}"
    )
    return RawTable(
        columns=list(table.columns),
        frame=frame[keep].reset_index(drop=True),
        labels=labels[keep].reset_index(drop=True),
        label_column=table.label_column,
        cleaning=report,
    )


# ---------------------------------------------------------------------------
# 特征模式
# ---------------------------------------------------------------------------

@dataclass
class ColumnSpec:
    """编码后单列的元数据"""
    name: str
    source: str
    group: str
    kind: str
    observed_min: float = 0.0
    observed_max: float = 1.0
    group_id: Optional[str] = None
    category: Optional[str] = None

    def __post_init__(self):
        if self.group not in GROUPS:
            raise SchemaError(f"列 {self.name}: 未知分组 {self.group}")
        if self.kind not in (CONTINUOUS, BINARY, ONE_HOT):
            raise SchemaError(f"列 {self.name}: 未知类型 {self.kind}")
        if self.observed_min > self.observed_max:
            raise SchemaError(f"列 {self.name}: observed_min > observed_max")
        if self.kind == ONE_HOT and self.group_id is None:
            raise SchemaError(f"列 {self.name}: one_hot 列缺少 group_id")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> 'ColumnSpec':
        return cls(**data)


@dataclass
class FeatureSchema:
    """编码后的有序列定义"""
    columns: List[ColumnSpec]
    label_column: str = "Attack_type"
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        members: Dict[str, int] = {}
        for column in self.columns:
            if column.kind == ONE_HOT:
                members[column.group_id] = members.get(column.group_id, 0) + 1
        small = [gid for gid, count in members.items() if count < 2]
        if small:
            raise SchemaError(f"one_hot 组成员少于 2 列: {small}")

    @property
    def width(self) -> int:
        return len(self.columns)

    @property
    def application_count(self) -> int:
        return sum(1 for c in self.columns if c.group == APPLICATION)

    @property
    def network_count(self) -> int:
        return sum(1 for c in self.columns if c.group == NETWORK)

    def group_indices(self, group: str) -> np.ndarray:
        """属于 application 或 network 分组的列索引，按编码顺序"""
        return np.array([i for i, c in enumerate(self.columns) if c.group == group], dtype=np.int64)

    def binary_indices(self, group: Optional[str] = None) -> np.ndarray:
        """binary 列索引；group 为空时不区分分组"""
        return np.array([i for i, c in enumerate(self.columns)
                         if c.kind == BINARY and (group is None or c.group == group)], dtype=np.int64)

    def one_hot_groups(self, group: Optional[str] = None) -> Dict[str, np.ndarray]:
        """源类别列 -> 其展开后的 one-hot 列索引"""
        groups: Dict[str, List[int]] = {}
        for i, c in enumerate(self.columns):
            if c.kind == ONE_HOT and (group is None or c.group == group):
                groups.setdefault(c.group_id, []).append(i)
        return {gid: np.array(indices, dtype=np.int64) for gid, indices in groups.items()}

    def lattice_indices(self) -> np.ndarray:
        """取值只能是 0 或 1 的列：全部 binary 与 one_hot 列"""
        return np.array([i for i, c in enumerate(self.columns) if c.kind in (BINARY, ONE_HOT)], dtype=np.int64)

    def to_dict(self):
        return {
            'version': self.version,
            'label_column': self.label_column,
            'width': self.width,
            'application_count': self.application_count,
            'network_count': self.network_count,
            'columns': [c.to_dict() for c in self.columns],
        }

    @classmethod
    def from_dict(cls, data) -> 'FeatureSchema':
        if data.get('version') != SCHEMA_VERSION:
            raise SchemaError(f"不支持的模式版本: {data.get('version')}")
        return cls(
            columns=[ColumnSpec.from_dict(c) for c in data['columns']],
            label_column=data.get('label_column', 'Attack_type'),
        )


def load_grouping(path: Optional[str]) -> Dict[str, str]:
    """读取 列名 -> application|network 映射；path 为空时返回默认映射"""
    if not path:
        return dict(DEFAULT_GROUPING)
    if not os.path.isfile(path):
        raise SchemaError(f"分组文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        grouping = yaml.safe_load(f) or {}
    bad = {name: group for name, group in grouping.items() if group not in GROUPS}
    if bad:
        raise SchemaError(f"分组文件含未知分组: {bad}")
    return {str(name): str(group) for name, group in grouping.items()}


def fit_schema(train_rows: RawTable, grouping: Dict[str, str], categorical_columns: Iterable[str] = (),
               expected_width: Optional[int] = ENCODED_WIDTH) -> FeatureSchema:
    """
    仅在训练数据上拟合模式

    取值 ⊆ {0,1} 为 binary；强制类别列或含非数值字符串的列展开为 one_hot
    （仅一个取值时退化为一个 binary 指示列）；其余为 continuous。
    """
    forced = set(categorical_columns)
    columns: List[ColumnSpec] = []
    widths: Dict[str, int] = {}
    for name in train_rows.columns:
        group = grouping.get(name)
        if group is None:
            logger.warning(f"列 {name} 不在分组映射中, 归入 {APPLICATION}")
            group = APPLICATION
        series = train_rows.frame[name]
        numeric = _parse_numeric(series)
        if name in forced or numeric.isna().any():
            categories = sorted(series.str.strip().unique())
            if len(categories) >= 2:
                for category in categories:
                    columns.append(ColumnSpec(name=f"{name}_{category}", source=name, group=group, kind=ONE_HOT,
                                              group_id=name, category=category))
            else:
                columns.append(ColumnSpec(name=f"{name}_{categories[0]}", source=name, group=group, kind=BINARY,
                                          category=categories[0]))
            widths[name] = max(len(categories), 1)
            continue
        values = numeric.to_numpy(dtype=np.float64)
        low, high = float(values.min()), float(values.max())
        kind = BINARY if np.isin(values, (0.0, 1.0)).all() else CONTINUOUS
        columns.append(ColumnSpec(name=name, source=name, group=group, kind=kind, observed_min=low, observed_max=high))
        widths[name] = 1

    schema = FeatureSchema(columns=columns, label_column=train_rows.label_column)
    if expected_width is not None and schema.width != expected_width:
        detail = ", ".join(f"{name}={width}" for name, width in widths.items())
        raise SchemaError(f"编码宽度 {schema.width} != {expected_width}; 各列宽度: {detail}")
    logger.info(f"模式拟合完成: {schema.width} 列 (application {schema.application_count}, "
                f"network {schema.network_count})")
    return schema


def save_schema(schema: FeatureSchema, path: str):
    """写出 schema.json（缩进 2、键排序），供后续阶段按同一列顺序编码"""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(schema.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_schema(path: str) -> FeatureSchema:
    """读取 save_schema 写出的文件；文件缺失、JSON 损坏或版本不符均抛出 SchemaError"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"无法读取模式文件 {path}: {e}") from e
    return FeatureSchema.from_dict(data)


# ---------------------------------------------------------------------------
# 数据集与编码
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """N×W 缩放后特征（均在 [0,1]）+ 类别索引；构造后不可变"""
    features: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema
    unseen_categories: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.uint8)
        if features.ndim != 2 or features.shape[1] != self.schema.width:
            raise DimensionError(f"特征矩阵形状 {features.shape} 与模式宽度 {self.schema.width} 不符")
        if labels.shape != (features.shape[0],):
            raise DimensionError(f"标签数 {labels.shape} 与行数 {features.shape[0]} 不符")
        if not np.all(np.isfinite(features)) or features.min(initial=0.0) < 0 or features.max(initial=0.0) > 1:
            raise DomainError("特征值必须有限且位于 [0, 1]")
        if labels.size and labels.max() >= NUM_CLASSES:
            raise DomainError(f"类别索引超出范围 [0, {NUM_CLASSES})")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    def __len__(self):
        return self.features.shape[0]

    def class_counts(self) -> np.ndarray:
        """长度为 15 的逐类样本数"""
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def subset(self, indices) -> 'Dataset':
        """按行索引取子集，共享同一模式"""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.schema)


def encode(table: RawTable, schema: FeatureSchema) -> Dataset:
    """one-hot 展开 + min-max 缩放，超出拟合范围的值裁剪到 [0,1]"""
    missing = sorted({c.source for c in schema.columns} - set(table.columns))
    if missing:
        raise SchemaError(f"表中缺少模式所需的列: {missing}")
    n = len(table)
    matrix = np.zeros((n, schema.width), dtype=np.float64)
    stripped: Dict[str, pd.Series] = {}
    parsed: Dict[str, np.ndarray] = {}

    for j, column in enumerate(schema.columns):
        if column.category is not None:
            if column.source not in stripped:
                stripped[column.source] = table.frame[column.source].str.strip()
            matrix[:, j] = (stripped[column.source] == column.category).to_numpy(dtype=np.float64)
            continue
        if column.source not in parsed:
            values = _parse_numeric(table.frame[column.source]).to_numpy(dtype=np.float64)
            if np.isnan(values).any():
                raise SchemaError(f"列 {column.source} 含无法解析的数值, 请先执行 clean")
            parsed[column.source] = values
        values = parsed[column.source]
        if column.kind == BINARY:
            matrix[:, j] = np.clip(values, 0.0, 1.0)
        elif column.observed_max > column.observed_min:
            scaled = (values - column.observed_min) / (column.observed_max - column.observed_min)
            matrix[:, j] = np.clip(scaled, 0.0, 1.0)

    unseen: Dict[str, int] = {}
    for gid, indices in schema.one_hot_groups().items():
        count = int((matrix[:, indices].sum(axis=1) == 0).sum())
        if count:
            unseen[gid] = count
            logger.warning(f"类别列 {gid} 有 {count} 个未见取值, 编码为全零")

    try:
        labels = np.array([_LABEL_INDEX[name] for name in table.labels.astype(str).str.strip()], dtype=np.uint8)
    except KeyError as e:
        raise DomainError(f"未知类别: {e.args[0]}") from e
    return Dataset(matrix, labels, schema, unseen_categories=unseen)


def decode(matrix: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """连续列逆缩放回原始单位；binary/one_hot 列原样返回"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-1] != schema.width:
        raise DimensionError(f"矩阵宽度 {matrix.shape[-1]} != 模式宽度 {schema.width}")
    raw = matrix.copy()
    for j, column in enumerate(schema.columns):
        if column.kind == CONTINUOUS:
            raw[..., j] = matrix[..., j] * (column.observed_max - column.observed_min) + column.observed_min
    return raw


# ---------------------------------------------------------------------------
# 分层划分
# ---------------------------------------------------------------------------

def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def split_indices_stratified(labels: np.ndarray, test_fraction: float, seed: int,
                             exact_counts: Optional[Dict[str, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (训练索引, 测试索引)，均按原顺序排列"""

    if not 0 < test_fraction < 1:
        raise SplitError(f"test_fraction 必须在 (0, 1) 内: {test_fraction}")
    rng = Rng(seed)
    train_parts, test_parts = [], []
    for label in CLASS_LABELS:
        indices = np.flatnonzero(labels == label.index)
        count = indices.size
        if count == 0:
            continue
        if count < 2:
            raise SplitError(f"类别 {label.name} 只有 {count} 个样本, 无法划分")
        shuffled = indices[rng.permutation(count)]
        if exact_counts is not None:
            test_count = int(exact_counts.get(label.name, 0))
            if not 0 <= test_count <= count:
                raise SplitError(f"类别 {label.name} 需要 {test_count} 个测试样本, 仅有 {count}")
        else:
            test_count = min(max(_round_half_up(count * test_fraction), 1), count - 1)
        test_parts.append(shuffled[:test_count])
        train_parts.append(shuffled[test_count:])
    train = np.sort(np.concatenate(train_parts)) if train_parts else np.zeros(0, dtype=np.int64)
    test = np.sort(np.concatenate(test_parts)) if test_parts else np.zeros(0, dtype=np.int64)
    return train, test


def split_stratified(ds: Dataset, test_fraction: float, seed: int,
                     exact_counts: Optional[Dict[str, int]] = None) -> Tuple[Dataset, Dataset]:
    """按类别分层划分；exact_counts 给出时逐类使用指定的测试集数量"""
    train, test = split_indices_stratified(ds.labels, test_fraction, seed, exact_counts)
    logger.info(f"分层划分: 训练 {train.size} 行, 测试 {test.size} 行")
    return ds.subset(train), ds.subset(test)


def edge_iiot_test_counts() -> Dict[str, int]:
    """分布表中各类别的测试集数量，用于 exact_counts 划分"""
    return {name: counts[1] for name, counts in EDGE_IIOT_DISTRIBUTION.items()}


def subsample_stratified(ds: Dataset, fraction: float, min_per_class: int, seed: int) -> Dataset:
    """按类别抽样，每类至少保留 min(类别样本数, min_per_class) 个"""

    rng = Rng(seed)
    keep = []
    for label in CLASS_LABELS:
        indices = np.flatnonzero(ds.labels == label.index)
        if indices.size == 0:
            continue
        target = min(indices.size, max(_round_half_up(indices.size * fraction), min_per_class))
        keep.append(indices[rng.permutation(indices.size)[:target]])
    chosen = np.sort(np.concatenate(keep))
    logger.info(f"分层抽样: {len(ds)} -> {chosen.size} 行")
    return ds.subset(chosen)


@dataclass
class DistributionRow:
    """分布表的一行：类别名与训练/测试样本数"""
    name: str
    train: int
    test: int

    @property
    def total(self) -> int:
        return self.train + self.test


def distribution_table(train: Dataset, test: Dataset) -> List[DistributionRow]:
    """按类别索引顺序统计训练集与测试集的样本数；样本数为 0 的类别也保留一行"""
    train_counts, test_counts = train.class_counts(), test.class_counts()
    return [DistributionRow(label.name, int(train_counts[label.index]), int(test_counts[label.index]))
            for label in CLASS_LABELS]


def format_distribution(rows: List[DistributionRow]) -> str:
    """渲染为 Attack Classes / Train Count / Test Count / Total 四列的定宽文本表"""
    lines = [f"{'Attack Classes':<24}{'Train Count':>14}{'Test Count':>14}{'Total':>14}"]
    for row in rows:
        lines.append(f"{row.name:<24}{row.train:>14}{row.test:>14}{row.total:>14}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# 数据集缓存: "AIDS1" | u64 行数 | u32 列数 | f64 特征 | u8 标签，均为小端
# ---------------------------------------------------------------------------

def save_dataset_cache(ds: Dataset, path: str):
    """写出编码后的数据集；不含模式，读取时须提供同一份 FeatureSchema"""
    rows, width = ds.features.shape
    with open(path, 'wb') as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack('<QI', rows, width))
        f.write(ds.features.astype('<f8').tobytes())
        f.write(ds.labels.astype('u1').tobytes())


def load_dataset_cache(path: str, schema: FeatureSchema) -> Dataset:
    """读取数据集缓存；魔数或长度不符抛出 IngestionError，宽度与模式不符抛出 SchemaError"""
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise IngestionError(f"无法读取数据缓存 {path}: {e}") from e
    header = len(CACHE_MAGIC) + 12
    if len(blob) < header or blob[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise IngestionError(f"数据缓存格式错误: {path}")
    rows, width = struct.unpack('<QI', blob[len(CACHE_MAGIC):header])
    if width != schema.width:
        raise SchemaError(f"数据缓存宽度 {width} != 模式宽度 {schema.width}: {path}")
    expected = header + rows * width * 8 + rows
    if len(blob) != expected:
        raise IngestionError(f"数据缓存长度 {len(blob)} != {expected}: {path}")
    features = np.frombuffer(blob, dtype='<f8', count=rows * width, offset=header).reshape(rows, width)
    labels = np.frombuffer(blob, dtype='u1', count=rows, offset=header + rows * width * 8)
    return Dataset(features.astype(np.float64), labels.copy(), schema)
