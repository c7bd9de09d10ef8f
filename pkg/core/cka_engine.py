"""
CKA 计算引擎

线性核 CKA：全批次与无偏小批次估计，以及模型内/模型间的逐层相似度网格。
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.actvstore import ActivationSet, LayerActivation, align_layers
from utils.config_manager import CkaConfig
from utils.exceptions import CkaException, DegenerateInputException
from utils.log_manager import get_logger
from utils.memory_manager import MemoryManager

# 自相关 HSIC 低于该相对阈值视为退化（常量或近似常量特征）
DEGENERATE_RTOL = 1e-10


@dataclass
class GramMatrix:
    """线性核 Gram 矩阵 K = X·Xᵀ"""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise CkaException(f"Gram 矩阵必须为方阵，当前形状 {self.values.shape}")
        if self.values.shape[0] < 1:
            raise CkaException("Gram 矩阵至少需要 1 个样本")

    @property
    def n(self) -> int:
        """样本数"""
        return int(self.values.shape[0])


@dataclass
class SimilarityMatrix:
    """逐层 CKA 相似度网格"""
    rows: List[str]
    cols: List[str]
    values: np.ndarray
    meta: Dict = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        """网格形状 (L_A, L_B)"""
        return (len(self.rows), len(self.cols))


@dataclass
class MinibatchStats:
    """小批次 CKA 的结果与批次统计"""
    value: float
    num_batches: int
    dropped_batches: int = 0
    dropped_frames: int = 0


def gram_linear(x: np.ndarray) -> GramMatrix:
    """计算线性核 Gram 矩阵"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise CkaException(f"特征矩阵必须为 n×p 且 n >= 1，当前形状 {x.shape}")
    if not np.all(np.isfinite(x)):
        raise CkaException("特征矩阵包含非有限值")
    values = x @ x.T
    # 消除 BLAS 带来的不对称舍入
    values = 0.5 * (values + values.T)
    return GramMatrix(values)


def _as_values(k: Union[GramMatrix, np.ndarray]) -> np.ndarray:
    return k.values if isinstance(k, GramMatrix) else np.asarray(k, dtype=np.float64)


def _zero_diagonal(k: np.ndarray) -> np.ndarray:
    k = k.copy()
    np.fill_diagonal(k, 0.0)
    return k


def hsic_unbiased(k: Union[GramMatrix, np.ndarray], l: Union[GramMatrix, np.ndarray]) -> float:
    """无偏 HSIC 估计

    K̃, L̃ 为置零对角线后的 Gram 矩阵:
        [tr(K̃L̃) + (1ᵀK̃1)(1ᵀL̃1)/((n-1)(n-2)) - 2/(n-2)·rowsum(K̃)·rowsum(L̃)] / (n(n-3))
    """
    k_values = _as_values(k)
    l_values = _as_values(l)
    if k_values.shape != l_values.shape:
        raise CkaException(f"Gram 矩阵形状不一致: {k_values.shape} vs {l_values.shape}")
    n = k_values.shape[0]
    if n < 4:
        raise CkaException(f"无偏 HSIC 要求 n >= 4，当前 n = {n}")

    k_tilde = _zero_diagonal(k_values)
    l_tilde = _zero_diagonal(l_values)
    # tr(K̃L̃) = Σ K̃∘L̃，逐元素乘积对参数顺序对称
    trace_term = float(np.sum(k_tilde * l_tilde))
    sum_term = float(np.sum(k_tilde)) * float(np.sum(l_tilde)) / ((n - 1) * (n - 2))
    row_term = 2.0 / (n - 2) * float(np.dot(k_tilde.sum(axis=1), l_tilde.sum(axis=1)))
    return (trace_term + sum_term - row_term) / (n * (n - 3))


def _self_scale(k: np.ndarray) -> float:
    """退化判定的尺度: Σ K̃² / (n(n-3))"""
    n = k.shape[0]
    k_tilde = _zero_diagonal(k)
    return float(np.sum(k_tilde * k_tilde)) / (n * (n - 3))


def _normalize(hxy: float, hxx: float, hyy: float, scale_x: float, scale_y: float) -> float:
    if hxx <= DEGENERATE_RTOL * scale_x or hyy <= DEGENERATE_RTOL * scale_y:
        raise DegenerateInputException(
            "CKA 分母退化（常量或近似常量特征）",
            details={"hsic_xx": hxx, "hsic_yy": hyy}
        )
    return hxy / np.sqrt(hxx * hyy)


def cka_full(x: np.ndarray, y: np.ndarray,
             memory_manager: Optional[MemoryManager] = None) -> float:
    """全批次无偏线性 CKA"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise CkaException(f"样本数不一致: {x.shape} vs {y.shape}")
    if x.shape[0] < 4:
        raise CkaException(f"CKA 要求 n >= 4，当前 n = {x.shape[0]}")
    if memory_manager is not None:
        memory_manager.check_gram_budget(x.shape[0])

    k = gram_linear(x).values
    l = gram_linear(y).values
    return float(_normalize(
        hsic_unbiased(k, l), hsic_unbiased(k, k), hsic_unbiased(l, l),
        _self_scale(k), _self_scale(l)
    ))


class _HsicAccumulator:
    """按批次累加 S_xy、S_xx、S_yy"""

    def __init__(self):
        """初始化累加器"""
        self.s_xy = 0.0
        self.s_xx = 0.0
        self.s_yy = 0.0
        self.scale_x = 0.0
        self.scale_y = 0.0
        self.num_batches = 0

    def add(self, x: np.ndarray, y: np.ndarray) -> None:
        """累加一个批次"""
        k = gram_linear(x).values
        l = gram_linear(y).values
        self.s_xy += hsic_unbiased(k, l)
        self.s_xx += hsic_unbiased(k, k)
        self.s_yy += hsic_unbiased(l, l)
        self.scale_x += _self_scale(k)
        self.scale_y += _self_scale(l)
        self.num_batches += 1

    def value(self) -> float:
        """S_xy / sqrt(S_xx·S_yy)"""
        if self.num_batches == 0:
            raise CkaException("没有可用的批次")
        return float(_normalize(self.s_xy, self.s_xx, self.s_yy, self.scale_x, self.scale_y))


def _batch_order(num_utterances: int, cfg: CkaConfig) -> np.ndarray:
    if cfg.shuffle_seed is None:
        return np.arange(num_utterances)
    return np.random.default_rng(cfg.shuffle_seed).permutation(num_utterances)


def cka_minibatch_stats(a: Sequence[np.ndarray], b: Sequence[np.ndarray],
                        cfg: CkaConfig) -> MinibatchStats:
    """小批次无偏 CKA，同时返回批次统计

    每个批次汇集 batch_size_utterances 条语句的全部帧作为样本；
    末尾帧数不足的批次被丢弃并计数，其余批次帧数不足则报错。
    """
    if len(a) != len(b):
        raise CkaException(f"两侧语句数不一致: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise CkaException("语料为空")
    for index, (seq_a, seq_b) in enumerate(zip(a, b)):
        if seq_a.shape[0] != seq_b.shape[0]:
            raise CkaException(
                f"第 {index} 条语句未对齐: {seq_a.shape[0]} vs {seq_b.shape[0]} 帧"
            )

    order = _batch_order(len(a), cfg)
    starts = list(range(0, len(order), cfg.batch_size_utterances))
    accumulator = _HsicAccumulator()
    dropped_batches = 0
    dropped_frames = 0

    for position, start in enumerate(starts):
        indices = order[start:start + cfg.batch_size_utterances]
        x = np.concatenate([a[i] for i in indices], axis=0)
        y = np.concatenate([b[i] for i in indices], axis=0)
        n_b = x.shape[0]
        if n_b < cfg.min_examples_per_batch:
            is_trailing = position == len(starts) - 1
            if is_trailing and accumulator.num_batches > 0:
                dropped_batches += 1
                dropped_frames += n_b
                continue
            raise CkaException(
                f"批次帧数不足: n_b = {n_b} < {cfg.min_examples_per_batch}",
                details={"batch_index": position}
            )
        accumulator.add(x, y)

    return MinibatchStats(
        value=accumulator.value(),
        num_batches=accumulator.num_batches,
        dropped_batches=dropped_batches,
        dropped_frames=dropped_frames
    )


def cka_minibatch(a: Sequence[np.ndarray], b: Sequence[np.ndarray], cfg: CkaConfig) -> float:
    """小批次无偏 CKA: S_xy / sqrt(S_xx·S_yy)"""
    return cka_minibatch_stats(a, b, cfg).value


def _grid_layers(activation_set: ActivationSet, cfg: CkaConfig) -> List[LayerActivation]:
    layers = [
        layer for layer in activation_set.layers
        if cfg.include_segment_level or not layer.is_segment_level
    ]
    if not layers:
        raise CkaException(f"模型 {activation_set.model_name} 没有可比较的层")
    return layers


def _layer_label(layer: LayerActivation) -> str:
    return f"E{layer.layer_id}" if layer.is_segment_level else f"L{layer.layer_id}"


def _compute_cells(cells: List[Tuple[int, int]], compute, max_workers: int) -> List[MinibatchStats]:
    if max_workers <= 1 or len(cells) <= 1:
        return [compute(i, j) for i, j in cells]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(compute, i, j) for i, j in cells]
        return [future.result() for future in futures]


def _build_grid(set_a: ActivationSet, set_b: ActivationSet, cfg: CkaConfig,
                symmetric: bool, max_workers: int,
                memory_manager: Optional[MemoryManager]) -> SimilarityMatrix:
    start_time = time.time()
    logger = get_logger()
    if list(set_a.utterance_ids) != list(set_b.utterance_ids):
        raise CkaException(
            "两个激活值集合的语料不一致（utterance_ids 或顺序不同）",
            details={"model_a": set_a.model_name, "model_b": set_b.model_name}
        )

    rows = _grid_layers(set_a, cfg)
    cols = _grid_layers(set_b, cfg)
    logger.log_operation(
        "CKA_GRID_START",
        model_a=set_a.model_name,
        model_b=set_b.model_name,
        rows=len(rows),
        cols=len(cols),
        symmetric=symmetric,
        batch_size=cfg.batch_size_utterances,
        max_workers=max_workers
    )

    def compute(i: int, j: int) -> MinibatchStats:
        seqs_a, seqs_b = align_layers(
            rows[i], cols[j], set_a.frame_hop, set_b.frame_hop, cfg.hop_ratio_tolerance
        )
        return cka_minibatch_stats(seqs_a, seqs_b, cfg)

    if symmetric:
        cells = [(i, j) for i in range(len(rows)) for j in range(i, len(cols))]
    else:
        cells = [(i, j) for i in range(len(rows)) for j in range(len(cols))]

    manager = memory_manager or MemoryManager()
    with manager.memory_efficient_processing("similarity_grid"):
        results = _compute_cells(cells, compute, max_workers)

    values = np.zeros((len(rows), len(cols)), dtype=np.float64)
    dropped_batches = 0
    dropped_frames = 0
    num_batches = 0
    for (i, j), stats in zip(cells, results):
        values[i, j] = stats.value
        if symmetric:
            values[j, i] = stats.value
        dropped_batches = max(dropped_batches, stats.dropped_batches)
        dropped_frames = max(dropped_frames, stats.dropped_frames)
        num_batches = max(num_batches, stats.num_batches)

    meta = {
        "model_a": set_a.model_name,
        "model_b": set_b.model_name,
        "num_utterances": len(set_a.utterance_ids),
        "batch_size_utterances": cfg.batch_size_utterances,
        "shuffle_seed": cfg.shuffle_seed,
        "min_examples_per_batch": cfg.min_examples_per_batch,
        "include_segment_level": cfg.include_segment_level,
        "length_balanced_batches": False,
        "num_batches": num_batches,
        "dropped_batches": dropped_batches,
        "dropped_frames": dropped_frames,
        "passes": 1,
    }
    logger.log_performance(
        "CKA_GRID_DONE",
        duration=time.time() - start_time,
        cells=len(cells),
        dropped_batches=dropped_batches
    )
    return SimilarityMatrix(
        rows=[_layer_label(layer) for layer in rows],
        cols=[_layer_label(layer) for layer in cols],
        values=values,
        meta=meta
    )


def similarity_matrix(set_a: ActivationSet, set_b: ActivationSet, cfg: CkaConfig,
                      max_workers: int = 1,
                      memory_manager: Optional[MemoryManager] = None) -> SimilarityMatrix:
    """两个模型之间的完整 L_A × L_B 相似度网格"""
    return _build_grid(set_a, set_b, cfg, False, max_workers, memory_manager)


def self_similarity(activation_set: ActivationSet, cfg: CkaConfig,
                    max_workers: int = 1,
                    memory_manager: Optional[MemoryManager] = None) -> SimilarityMatrix:
    """模型内相似度网格，只计算上三角并镜像"""
    return _build_grid(activation_set, activation_set, cfg, True, max_workers, memory_manager)


def band_averages(values: np.ndarray) -> List[float]:
    """按层距离 d = |i - j| 求平均相似度，返回 d = 0..L-1"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise CkaException("band_averages 需要方阵")
    return [float(np.mean(np.diagonal(values, offset=d))) for d in range(values.shape[0])]


def block_contrast(values: np.ndarray, split: int) -> Tuple[float, float]:
    """以 split 为界划分两块，返回 (块内非对角平均, 跨块平均)"""
    values = np.asarray(values, dtype=np.float64)
    size = values.shape[0]
    if values.ndim != 2 or values.shape[1] != size:
        raise CkaException("block_contrast 需要方阵")
    if not 1 <= split < size:
        raise CkaException(f"split 必须在 [1, {size}) 之间，当前为 {split}")

    block = np.arange(size) < split
    same_block = block[:, None] == block[None, :]
    off_diagonal = ~np.eye(size, dtype=bool)
    within_mask = same_block & off_diagonal
    if not within_mask.any():
        raise CkaException("两块都只有 1 层，无法计算块内平均")
    return float(values[within_mask].mean()), float(values[~same_block].mean())
