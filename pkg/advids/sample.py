"""
合成的 Edge-IIoTset 兼容样例数据集

列名、列顺序与类别列的取值个数与真实导出一致，编码后恰好 95 列
（application 77 = 21 数值 + 56 one-hot，network 18）。
特征按类别族生成：族间容易区分，同族类别之间只差很小的偏移。
"""

import logging
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from advids.data import CLASS_NAMES, DEFAULT_CATEGORICAL_COLUMNS
from advids.numerics import Rng

logger = logging.getLogger(__name__)

SAMPLE_ROWS_PER_CLASS = 100
SAMPLE_SEED = 7

FAMILY_COUNT = 5
RANK_COUNT = 3
ACTIVE_PROBABILITY = 0.4
# 同族相邻类别在活跃列上的偏移与行内噪声，均为该列量级的比例
RANK_STEP = 0.011
RANK_NOISE = 0.003

FEATURE_ORDER: Tuple[str, ...] = (
    "frame.time", "ip.src_host", "ip.dst_host", "arp.dst.proto_ipv4", "arp.opcode", "arp.hw.size",
    "arp.src.proto_ipv4", "icmp.checksum", "icmp.seq_le", "icmp.transmit_timestamp", "icmp.unused",
    "http.file_data", "http.content_length", "http.request.uri.query", "http.request.method", "http.referer",
    "http.request.full_uri", "http.request.version", "http.response", "http.tls_port", "tcp.ack", "tcp.ack_raw",
    "tcp.checksum", "tcp.connection.fin", "tcp.connection.rst", "tcp.connection.syn", "tcp.connection.synack",
    "tcp.dstport", "tcp.flags", "tcp.flags.ack", "tcp.len", "tcp.options", "tcp.payload", "tcp.seq",
    "tcp.srcport", "udp.port", "udp.stream", "udp.time_delta", "dns.qry.name", "dns.qry.name.len", "dns.qry.qu",
    "dns.qry.type", "dns.retransmission", "dns.retransmit_request", "dns.retransmit_request_in",
    "mqtt.conack.flags", "mqtt.conflag.cleansess", "mqtt.conflags", "mqtt.hdrflags", "mqtt.len",
    "mqtt.msg_decoded_as", "mqtt.msg", "mqtt.msgtype", "mqtt.proto_len", "mqtt.protoname", "mqtt.topic",
    "mqtt.topic_len", "mqtt.ver", "mbtcp.len", "mbtcp.trans_id", "mbtcp.unit_id",
)

CATEGORIES: Dict[str, Tuple[str, ...]] = {
    "http.request.method": ("0", "GET", "POST", "PUT", "DELETE", "HEAD", "OPTIONS", "TRACE"),
    "http.referer": ("0", "127.0.0.1", "192.168.0.128", "auth.php", "TESTING_PURPOSES_ONLY"),
    "http.request.version": (
        "0", "HTTP/1.0", "HTTP/1.1", "HTTP/2.0", "-a HTTP/1.1", "-al HTTP/1.1", "--help HTTP/1.1",
        "/etc/passwd HTTP/1.1", "script HTTP/1.1", "name HTTP/1.1", "By Dr HTTP/1.1", "Src=javascript HTTP/1.1",
    ),
    "dns.qry.name.len": (
        "0", "1", "0.debian.pool.ntp.org", "1.debian.pool.ntp.org", "2.debian.pool.ntp.org",
        "3.debian.pool.ntp.org", "raspberrypi.local", "_googlecast._tcp.local", "null-null.local", "xn--ngbrx",
    ),
    "mqtt.conack.flags": ("0", "0x00000000", "1", "1461073", "1461074", "1461383"),
    "mqtt.protoname": ("0", "MQTT", "MQIsdp"),
    "mqtt.topic": (
        "0", "Temperature_and_Humidity", "Heart_Rate", "Water_Level", "Soil_Moisture", "Distance",
        "Flame_Sensor", "IR_Receiver", "Modbus", "pH_Sensor", "Sound_Sensor", "Ultrasonic",
    ),
}

BINARY_COLUMNS: Tuple[str, ...] = (
    "tcp.connection.fin", "tcp.connection.rst", "tcp.connection.syn", "tcp.connection.synack",
    "tcp.flags.ack", "dns.qry.qu", "dns.retransmission", "mqtt.conflag.cleansess",
)

# 数值列的量级
SCALES: Dict[str, float] = {
    "icmp.checksum": 65535, "icmp.seq_le": 65535, "tcp.ack": 1e6, "tcp.ack_raw": 4e9, "tcp.checksum": 65535,
    "tcp.seq": 1e6, "udp.stream": 5e4, "tcp.len": 1460, "http.content_length": 2000, "mqtt.len": 300,
    "mbtcp.trans_id": 65535, "tcp.flags": 24, "dns.qry.type": 28, "udp.time_delta": 1.0,
}

IDENTIFIER_COLUMNS: Tuple[str, ...] = (
    "frame.time", "ip.src_host", "ip.dst_host", "arp.src.proto_ipv4", "arp.dst.proto_ipv4",
    "http.file_data", "http.request.full_uri", "icmp.transmit_timestamp", "http.request.uri.query",
    "tcp.options", "tcp.payload", "tcp.srcport", "tcp.dstport", "udp.port", "mqtt.msg",
)


def _identifier(name: str, row: int, class_index: int, rng: Rng) -> str:
    if name == "frame.time":
        return f"2021 11 09 23:{row // 60 % 60:02d}:{row % 60:02d}.{row:06d}"
    if name == "ip.src_host":
        return f"192.168.0.{class_index + 1}"
    if name == "ip.dst_host":
        return "192.168.0.128"
    if name in ("tcp.srcport", "tcp.dstport", "udp.port"):
        return str(int(rng.integers(1024, 65535)))
    return "0"


def _family_structure(rng: Rng, numeric: List[str]) -> Dict[str, np.ndarray]:
    """每个类别族的活跃列掩码、活跃取值、秩偏移方向、二值位与类别取值"""
    width = len(numeric)
    active = rng.uniform(0.0, 1.0, (FAMILY_COUNT, width)) < ACTIVE_PROBABILITY
    levels = rng.uniform(0.6, 0.9, (FAMILY_COUNT, width))
    directions = np.where(rng.uniform(0.0, 1.0, (FAMILY_COUNT, width)) < 0.5, -1.0, 1.0)
    bits = rng.integers(0, 2, (FAMILY_COUNT, width))
    for j in range(width):
        # 每列至少一个族取 0、一个族取非 0
        if active[:, j].all() or not active[:, j].any():
            active[j % FAMILY_COUNT, j] = not active[j % FAMILY_COUNT, j]
        if bits[:, j].min() == bits[:, j].max():
            bits[j % FAMILY_COUNT, j] = 1 - bits[j % FAMILY_COUNT, j]
    categories = np.array([[int(rng.integers(0, len(CATEGORIES[name]))) for name in DEFAULT_CATEGORICAL_COLUMNS]
                           for _ in range(FAMILY_COUNT)])
    return {'active': active, 'levels': levels, 'directions': directions, 'bits': bits, 'categories': categories}


def generate_sample(rows_per_class: int = SAMPLE_ROWS_PER_CLASS, seed: int = SAMPLE_SEED) -> pd.DataFrame:
    """
    按类别生成 rows_per_class 行；同一种子得到逐字节相同的表

    15 个类别分为 5 个族，每族 3 个类别。族之间在活跃列、二值位与类别取值上差别明显；
    同族类别只在活跃连续列上相差 RANK_STEP 量级的偏移，因此小 ε 的 FGSM 足以改变预测。
    每个类别每 10 行中有 1 行轮换类别取值，保证训练集覆盖全部类别取值。
    """
    rng = Rng(seed)
    structure_rng, noise_rng, id_rng = rng.child(0), rng.child(1), rng.child(2)
    numeric = [name for name in FEATURE_ORDER
               if name not in IDENTIFIER_COLUMNS and name not in DEFAULT_CATEGORICAL_COLUMNS]
    structure = _family_structure(structure_rng, numeric)

    records: List[Dict[str, str]] = []
    row = 0
    for class_index, class_name in enumerate(CLASS_NAMES):
        family, rank = divmod(class_index, RANK_COUNT)
        for i in range(rows_per_class):
            record: Dict[str, str] = {}
            noise = noise_rng.normal(len(numeric)) * RANK_NOISE
            for j, name in enumerate(numeric):
                if name in BINARY_COLUMNS:
                    record[name] = str(int(structure['bits'][family, j]))
                    continue
                value = 0.0
                if structure['active'][family, j]:
                    offset = (rank - 1) * RANK_STEP * structure['directions'][family, j]
                    value = max(structure['levels'][family, j] + offset + noise[j], 0.0) * SCALES.get(name, 100.0)
                record[name] = f"{value:.4f}"
            for k, name in enumerate(DEFAULT_CATEGORICAL_COLUMNS):
                values = CATEGORIES[name]
                if i % 10 == 0:
                    record[name] = values[(i // 10 + class_index) % len(values)]
                else:
                    record[name] = values[structure['categories'][family, k]]
            for name in IDENTIFIER_COLUMNS:
                record[name] = _identifier(name, row, class_index, id_rng)
            record["Attack_label"] = "0" if class_name == "Normal" else "1"
            record["Attack_type"] = class_name
            records.append(record)
            row += 1

    frame = pd.DataFrame.from_records(records, columns=list(FEATURE_ORDER) + ["Attack_label", "Attack_type"])
    logger.info(f"已生成样例数据: {len(frame)} 行, {len(CLASS_NAMES)} 个类别, {FAMILY_COUNT} 个族")
    return frame


def write_sample(path: str, rows_per_class: int = SAMPLE_ROWS_PER_CLASS, seed: int = SAMPLE_SEED) -> int:
    frame = generate_sample(rows_per_class, seed)
    frame.to_csv(path, index=False)
    return len(frame)
