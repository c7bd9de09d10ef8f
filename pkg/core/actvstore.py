"""
激活值存储

定义逐层激活值的数据模型与落盘容器，并负责异构模型之间的时间分辨率对齐。

目录布局:
    manifest.yaml            (format_version, model_name, frame_hop, utterance_ids, layers[])
    layer_000.f32            (小端 float32，按帧行优先连续存放)
    layer_001.f32
    ...
"""

import csv
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import yaml
from pydantic import ValidationError

from utils.exceptions import ActivationStoreException, AlignmentException, handle_exceptions
from utils.log_manager import get_logger
from utils.models import LayerRecord, Manifest

FORMAT_VERSION = 1
SUPPORTED_FORMAT_VERSIONS = (1,)
MANIFEST_NAME = "manifest.yaml"
DATA_DTYPE = np.dtype("<f4")


@dataclass
class LayerActivation:
    """单层在整个语料上的激活值

    sequences 中每个矩阵为 T_i × D；段级层每条序列只有一行。
    """
    layer_id: int
    sequences: List[np.ndarray]
    is_segment_level: bool = False

    def __post_init__(self):
        self.sequences = [np.asarray(seq) for seq in self.sequences]
        dims = set()
        for index, seq in enumerate(self.sequences):
            if seq.ndim != 2:
                raise ActivationStoreException(
                    f"第 {index} 条序列不是二维矩阵", layer_id=self.layer_id
                )
            if seq.shape[0] < 1:
                raise ActivationStoreException(
                    f"第 {index} 条序列为空", layer_id=self.layer_id
                )
            if self.is_segment_level and seq.shape[0] != 1:
                raise ActivationStoreException(
                    f"段级层的第 {index} 条序列应只有 1 行，实际 {seq.shape[0]} 行",
                    layer_id=self.layer_id
                )
            if not np.all(np.isfinite(seq)):
                raise ActivationStoreException(
                    f"第 {index} 条序列包含非有限值", layer_id=self.layer_id
                )
            dims.add(seq.shape[1])
        if len(dims) > 1:
            raise ActivationStoreException(
                f"同一层的序列维度不一致: {sorted(dims)}", layer_id=self.layer_id
            )

    @property
    def dim(self) -> int:
        """特征维度 D"""
        return int(self.sequences[0].shape[1]) if self.sequences else 0

    @property
    def frame_counts(self) -> List[int]:
        """每条序列的帧数"""
        return [int(seq.shape[0]) for seq in self.sequences]


@dataclass
class ActivationSet:
    """一个模型在语料上的逐层激活值"""
    model_name: str
    frame_hop: Fraction
    layers: List[LayerActivation]
    utterance_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.frame_hop = Fraction(self.frame_hop)
        if self.frame_hop <= 0:
            raise ActivationStoreException(f"frame_hop 必须为正数，当前为 {self.frame_hop}")
        if not self.layers:
            raise ActivationStoreException("激活值集合至少需要 1 层 (L >= 1)")

        layer_ids = [layer.layer_id for layer in self.layers]
        if layer_ids != list(range(len(self.layers))):
            raise ActivationStoreException(
                f"层编号必须为连续的 0..L-1，当前为 {layer_ids}"
            )

        counts = {len(layer.sequences) for layer in self.layers}
        if len(counts) > 1:
            raise ActivationStoreException(f"各层序列数不一致: {sorted(counts)}")

        num_sequences = len(self.layers[0].sequences)
        if not self.utterance_ids:
            self.utterance_ids = [f"utt{i:05d}" for i in range(num_sequences)]
        if len(self.utterance_ids) != num_sequences:
            raise ActivationStoreException(
                f"utterance_ids 数量 ({len(self.utterance_ids)}) 与序列数 ({num_sequences}) 不一致"
            )

    @property
    def num_layers(self) -> int:
        """层数 L"""
        return len(self.layers)

    @property
    def num_sequences(self) -> int:
        """序列数"""
        return len(self.utterance_ids)


@handle_exceptions(reraise=True)
def save_activation_set(activation_set: ActivationSet, directory: Union[str, Path]) -> None:
    """写出清单与每层数据文件，可被 load_activation_set 无损读回"""
    start_time = time.time()
    logger = get_logger()
    out_dir = Path(directory)

    if not activation_set.layers:
        raise ActivationStoreException("激活值集合至少需要 1 层 (L >= 1)", path=str(out_dir))

    payloads = []
    for layer in activation_set.layers:
        with np.errstate(over="ignore"):
            payload = np.concatenate(layer.sequences, axis=0).astype(DATA_DTYPE, copy=False)
        # 超出 float32 表示范围的值在转换后变为 inf
        if not np.all(np.isfinite(payload)):
            raise ActivationStoreException(
                "激活值超出 float32 范围，转换后出现非有限值",
                path=str(out_dir),
                layer_id=layer.layer_id
            )
        payloads.append(payload)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for layer, payload in zip(activation_set.layers, payloads):
            data_file = f"layer_{layer.layer_id:03d}.f32"
            np.ascontiguousarray(payload).tofile(out_dir / data_file)
            records.append(LayerRecord(
                layer_id=layer.layer_id,
                dim=layer.dim,
                is_segment_level=layer.is_segment_level,
                data_file=data_file,
                frame_counts=layer.frame_counts
            ))

        manifest = Manifest(
            format_version=FORMAT_VERSION,
            model_name=activation_set.model_name,
            frame_hop=str(activation_set.frame_hop),
            utterance_ids=list(activation_set.utterance_ids),
            layers=records
        )
        with open(out_dir / MANIFEST_NAME, 'w', encoding='utf-8') as f:
            yaml.safe_dump(manifest.model_dump(), f, allow_unicode=True, sort_keys=False)
    except OSError as e:
        raise ActivationStoreException(f"写出激活值失败: {e}", path=str(out_dir))

    logger.log_performance(
        "ACTIVATIONS_SAVED",
        duration=time.time() - start_time,
        path=str(out_dir),
        model_name=activation_set.model_name,
        num_layers=activation_set.num_layers
    )


@handle_exceptions(reraise=True)
def load_activation_set(manifest_path: Union[str, Path]) -> ActivationSet:
    """读取并校验激活值集合

    Args:
        manifest_path: 清单文件路径，或包含 manifest.yaml 的目录

    Raises:
        ActivationStoreException: 文件缺失、维度/帧数不匹配、非有限值、不支持的版本
    """
    start_time = time.time()
    logger = get_logger()
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ActivationStoreException(f"清单文件不存在: {path}", path=str(path))

    logger.log_operation("ACTIVATIONS_LOAD_START", path=str(path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
        manifest = Manifest(**(raw or {}))
    except (yaml.YAMLError, ValidationError, TypeError) as e:
        raise ActivationStoreException(f"清单格式错误: {e}", path=str(path))

    if manifest.format_version not in SUPPORTED_FORMAT_VERSIONS:
        raise ActivationStoreException(
            f"不支持的清单版本: {manifest.format_version}",
            path=str(path),
            details={"supported": list(SUPPORTED_FORMAT_VERSIONS)}
        )

    try:
        frame_hop = Fraction(manifest.frame_hop)
    except (ValueError, ZeroDivisionError):
        raise ActivationStoreException(f"无法解析 frame_hop: {manifest.frame_hop}", path=str(path))

    layers = [
        _load_layer(path.parent, record, len(manifest.utterance_ids))
        for record in manifest.layers
    ]

    activation_set = ActivationSet(
        model_name=manifest.model_name,
        frame_hop=frame_hop,
        layers=layers,
        utterance_ids=list(manifest.utterance_ids)
    )
    logger.log_performance(
        "ACTIVATIONS_LOADED",
        duration=time.time() - start_time,
        path=str(path),
        num_layers=activation_set.num_layers,
        num_sequences=activation_set.num_sequences
    )
    return activation_set


def _load_layer(base_dir: Path, record: LayerRecord, num_utterances: int) -> LayerActivation:
    """读取单层数据文件并按帧数切分"""
    data_path = base_dir / record.data_file
    if not data_path.exists():
        raise ActivationStoreException(
            f"数据文件不存在: {data_path}", path=str(data_path), layer_id=record.layer_id
        )
    if len(record.frame_counts) != num_utterances:
        raise ActivationStoreException(
            f"帧数记录条数 ({len(record.frame_counts)}) 与语句数 ({num_utterances}) 不一致",
            path=str(data_path), layer_id=record.layer_id
        )

    data = np.fromfile(data_path, dtype=DATA_DTYPE)
    expected = sum(record.frame_counts) * record.dim
    if data.size != expected:
        raise ActivationStoreException(
            f"维度/帧数不匹配: 文件含 {data.size} 个元素，清单要求 {expected} 个",
            path=str(data_path), layer_id=record.layer_id
        )
    if not np.all(np.isfinite(data)):
        raise ActivationStoreException(
            "数据文件包含非有限值", path=str(data_path), layer_id=record.layer_id
        )

    frames = data.reshape(-1, record.dim)
    boundaries = np.cumsum(record.frame_counts)[:-1]
    sequences = np.split(frames, boundaries, axis=0) if record.frame_counts else []
    return LayerActivation(
        layer_id=record.layer_id,
        sequences=sequences,
        is_segment_level=record.is_segment_level
    )


def upsample_repeat(seq: np.ndarray, factor: int) -> np.ndarray:
    """逐帧重复 factor 次: 输出第 i 行等于输入第 floor(i/factor) 行"""
    if factor < 1:
        raise AlignmentException(f"重复倍数必须 >= 1，当前为 {factor}")
    return np.repeat(np.asarray(seq), int(factor), axis=0)


def broadcast_vector(vec: np.ndarray, length: int) -> np.ndarray:
    """将段级向量广播为 length 行"""
    if length < 1:
        raise AlignmentException(f"广播长度必须 >= 1，当前为 {length}")
    row = np.asarray(vec).reshape(1, -1)
    return np.repeat(row, int(length), axis=0)


def repeat_factor(hop_a: Fraction, hop_b: Fraction, tolerance: float = 0.1) -> Tuple[int, int]:
    """计算两个序列各自的重复倍数 (factor_a, factor_b)，低帧率一方重复"""
    ratio = Fraction(hop_a) / Fraction(hop_b)
    low_is_a = ratio < 1
    exact = 1 / ratio if low_is_a else ratio
    factor = max(1, round(exact))
    if abs(float(exact) - factor) > tolerance * factor:
        raise AlignmentException(
            f"帧率比 {float(exact):.4f} 不是近似整数，无法按重复对齐",
            details={"hop_a": str(hop_a), "hop_b": str(hop_b)}
        )
    return (factor, 1) if low_is_a else (1, factor)


def align_pair(a: np.ndarray, b: np.ndarray, hop_a, hop_b,
               segment_a: bool = False, segment_b: bool = False,
               tolerance: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """对齐两条序列，使行数相同

    段级输入先广播到对方长度；否则低帧率一方按 round(帧率比) 重复，
    两者再截断到较短的行数。
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise AlignmentException("对齐的序列不能为空")

    if segment_a and segment_b:
        return a[:1], b[:1]
    if segment_a:
        return broadcast_vector(a[0], b.shape[0]), b
    if segment_b:
        return a, broadcast_vector(b[0], a.shape[0])

    factor_a, factor_b = repeat_factor(hop_a, hop_b, tolerance)
    a = upsample_repeat(a, factor_a) if factor_a > 1 else a
    b = upsample_repeat(b, factor_b) if factor_b > 1 else b
    rows = min(a.shape[0], b.shape[0])
    return a[:rows], b[:rows]


def align_layers(layer_a: LayerActivation, layer_b: LayerActivation,
                 hop_a, hop_b, tolerance: float = 0.1) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """逐条语句对齐两层激活值"""
    if len(layer_a.sequences) != len(layer_b.sequences):
        raise AlignmentException(
            f"两层序列数不一致: {len(layer_a.sequences)} vs {len(layer_b.sequences)}"
        )
    aligned_a, aligned_b = [], []
    for seq_a, seq_b in zip(layer_a.sequences, layer_b.sequences):
        x, y = align_pair(
            seq_a, seq_b, hop_a, hop_b,
            segment_a=layer_a.is_segment_level,
            segment_b=layer_b.is_segment_level,
            tolerance=tolerance
        )
        aligned_a.append(x)
        aligned_b.append(y)
    return aligned_a, aligned_b


def save_labels(path: Union[str, Path], utterance_ids: List[str], labels) -> None:
    """写出标签文件，每行 "utterance_id,class" """
    label_list = [int(label) for label in labels]
    if len(label_list) != len(utterance_ids):
        raise ActivationStoreException(
            f"标签数 ({len(label_list)}) 与语句数 ({len(utterance_ids)}) 不一致", path=str(path)
        )
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerows(zip(utterance_ids, label_list))
    except OSError as e:
        raise ActivationStoreException(f"写出标签失败: {e}", path=str(path))


@handle_exceptions(reraise=True)
def load_labels(path: Union[str, Path], utterance_ids: List[str]) -> np.ndarray:
    """读取标签文件并按 utterance_ids 的顺序排列"""
    label_path = Path(path)
    if not label_path.exists():
        raise ActivationStoreException(f"标签文件不存在: {label_path}", path=str(label_path))
    mapping = {}
    with open(label_path, 'r', encoding='utf-8', newline='') as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise ActivationStoreException(
                    f"标签文件第 {line_no} 行格式错误，应为 utterance_id,class", path=str(label_path)
                )
            try:
                mapping[row[0]] = int(row[1])
            except ValueError:
                raise ActivationStoreException(
                    f"标签文件第 {line_no} 行的类别不是整数: {row[1]}", path=str(label_path)
                )

    missing = [uid for uid in utterance_ids if uid not in mapping]
    if missing or len(mapping) != len(utterance_ids):
        raise ActivationStoreException(
            "标签与语句不对应",
            path=str(label_path),
            details={"missing": len(missing), "labels": len(mapping), "utterances": len(utterance_ids)}
        )
    return np.array([mapping[uid] for uid in utterance_ids], dtype=np.int64)
