"""
加权和探测

逐层可训练投影 A_l 加 softmax 层权重 w_l 的加权和组合器，
在语句级分类任务上联合训练组合器与线性分类头，并给出逐层贡献度 w_l·‖A_l‖_F。
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.actvstore import ActivationSet, broadcast_vector
from core.toy_encoder import random_orthonormal
from utils.config_manager import ProbeConfig
from utils.exceptions import ProbeException, TrainingDivergenceException
from utils.log_manager import get_logger

EPSILON_RANGE = (1e-7, 1e-3)
RELATIVE_ERROR_FLOOR = 1e-6


def softmax(logits: np.ndarray) -> np.ndarray:
    """数值稳定的 softmax（沿最后一维）"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


@dataclass
class WeightedSumCombiner:
    """加权和组合器

    projections 为 None 时各层直接相加（要求所有层维度等于 output_dim）。
    """
    logits: np.ndarray
    output_dim: int
    projections: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if self.logits.size < 1:
            raise ProbeException("组合器至少需要 1 层")
        if self.projections is not None:
            self.projections = [np.asarray(a, dtype=np.float64) for a in self.projections]
            if len(self.projections) != self.logits.size:
                raise ProbeException(
                    f"投影数量 ({len(self.projections)}) 与层数 ({self.logits.size}) 不一致"
                )
            for index, a in enumerate(self.projections):
                if a.ndim != 2 or a.shape[1] != self.output_dim:
                    raise ProbeException(
                        f"第 {index} 层投影形状 {a.shape} 与输出维度 {self.output_dim} 不兼容"
                    )

    @classmethod
    def create(cls, layer_dims: Sequence[int], output_dim: Optional[int] = None,
               use_projections: bool = True, rng: Optional[np.random.Generator] = None,
               init_scale: float = 1.0) -> "WeightedSumCombiner":
        """按层维度初始化: α = 0，投影为缩放的正交归一随机矩阵"""
        dims = [int(d) for d in layer_dims]
        if not dims:
            raise ProbeException("组合器至少需要 1 层")
        if not use_projections:
            if len(set(dims)) > 1:
                raise ProbeException(
                    f"各层维度不同 {sorted(set(dims))}，必须启用投影 (--projections on)"
                )
            return cls(logits=np.zeros(len(dims)), output_dim=dims[0])

        rng = rng or np.random.default_rng(0)
        out_dim = output_dim or max(dims)
        projections = [init_scale * random_orthonormal(rng, dim, out_dim) for dim in dims]
        return cls(logits=np.zeros(len(dims)), output_dim=out_dim, projections=projections)

    @property
    def num_layers(self) -> int:
        """层数 L"""
        return int(self.logits.size)

    @property
    def weights(self) -> np.ndarray:
        """w = softmax(α)"""
        return softmax(self.logits)

    def projection(self, index: int, dim: int) -> np.ndarray:
        """第 index 层的投影；未启用投影时为单位矩阵"""
        if self.projections is not None:
            return self.projections[index]
        if dim != self.output_dim:
            raise ProbeException(
                f"第 {index} 层维度 {dim} 与输出维度 {self.output_dim} 不同，必须启用投影"
            )
        return np.eye(dim)

    def copy(self) -> "WeightedSumCombiner":
        """深拷贝"""
        return WeightedSumCombiner(
            logits=self.logits.copy(),
            output_dim=self.output_dim,
            projections=None if self.projections is None else [a.copy() for a in self.projections]
        )


@dataclass
class ProbeHead:
    """线性分类头 O = h·H + b"""
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, input_dim: int, num_classes: int) -> "ProbeHead":
        """零初始化"""
        return cls(weight=np.zeros((input_dim, num_classes)), bias=np.zeros(num_classes))

    def copy(self) -> "ProbeHead":
        """深拷贝"""
        return ProbeHead(weight=self.weight.copy(), bias=self.bias.copy())


@dataclass
class ProbeTask:
    """语句级分类探测任务"""
    inputs: ActivationSet
    labels: np.ndarray
    num_classes: int
    kind: str = "utterance-classification"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.kind != "utterance-classification":
            raise ProbeException(f"不支持的探测任务类型: {self.kind}")
        if self.labels.size != self.inputs.num_sequences:
            raise ProbeException(
                f"标签数 ({self.labels.size}) 与语句数 ({self.inputs.num_sequences}) 不一致"
            )
        if self.num_classes < 2:
            raise ProbeException("探测任务至少需要 2 个类别")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ProbeException(f"标签必须在 [0, {self.num_classes}) 之间")


@dataclass
class ProbeResult:
    """探测训练结果"""
    combiner: WeightedSumCombiner
    head: ProbeHead
    accuracy: float
    majority_baseline: float
    contribution: np.ndarray
    loss_trace: List[float] = field(default_factory=list)
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    heldout_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed: int = 0

    @property
    def argmax_layer(self) -> int:
        """贡献度最大的层"""
        return int(np.argmax(self.contribution))

    @property
    def projection_norms(self) -> List[float]:
        """‖A_l‖_F；未启用投影时为 1"""
        if self.combiner.projections is None:
            return [1.0] * self.combiner.num_layers
        return [float(np.linalg.norm(a)) for a in self.combiner.projections]

    def logits_for(self, layers: Sequence[np.ndarray]) -> np.ndarray:
        """combine → mean_pool → 分类头，返回类别 logits"""
        rows = max(np.asarray(x).shape[0] for x in layers)
        expanded = [
            broadcast_vector(x[0], rows) if np.asarray(x).shape[0] == 1 and rows > 1 else x
            for x in layers
        ]
        pooled = mean_pool(combine(self.combiner, expanded))
        return pooled @ self.head.weight + self.head.bias

    def predict(self, layers: Sequence[np.ndarray]) -> int:
        """预测单条语句的类别，layers 为该语句的逐层 T×D_l 激活"""
        return int(np.argmax(self.logits_for(layers)))


def combine(combiner: WeightedSumCombiner, layers: Sequence[np.ndarray]) -> np.ndarray:
    """Σ_l w_l · (x_l A_l)，逐帧作用"""
    if len(layers) != combiner.num_layers:
        raise ProbeException(f"层数 ({len(layers)}) 与组合器层数 ({combiner.num_layers}) 不一致")
    matrices = [np.asarray(x, dtype=np.float64) for x in layers]
    row_counts = {x.shape[0] for x in matrices}
    if len(row_counts) > 1:
        raise ProbeException(f"各层帧数不一致: {sorted(row_counts)}")

    weights = combiner.weights
    output = np.zeros((matrices[0].shape[0], combiner.output_dim))
    for index, x in enumerate(matrices):
        output += weights[index] * (x @ combiner.projection(index, x.shape[1]))
    return output


def contribution_scores(combiner: WeightedSumCombiner) -> np.ndarray:
    """w_l · ‖A_l‖_F；未启用投影时即为 w_l"""
    weights = combiner.weights
    if combiner.projections is None:
        return weights
    norms = np.array([np.linalg.norm(a) for a in combiner.projections])
    return weights * norms


def mean_pool(seq: np.ndarray) -> np.ndarray:
    """按列求均值"""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ProbeException(f"mean_pool 需要非空的 T×D 矩阵，当前形状 {seq.shape}")
    return seq.mean(axis=0)


def pooled_features(activation_set: ActivationSet) -> List[np.ndarray]:
    """逐层对每条语句做均值池化，返回 L 个 N×D_l 矩阵

    组合是线性的，先池化再组合与先组合再池化结果相同。
    """
    return [
        np.stack([mean_pool(seq) for seq in layer.sequences])
        for layer in activation_set.layers
    ]


def _loss_and_grads(features: Sequence[np.ndarray], labels: np.ndarray,
                    combiner: WeightedSumCombiner, head: ProbeHead,
                    need_grads: bool = True) -> Tuple[float, Optional[Dict]]:
    """交叉熵损失及对 α、A_l、H、b 的解析梯度"""
    weights = combiner.weights
    projected = [m @ combiner.projection(l, m.shape[1]) for l, m in enumerate(features)]
    hidden = sum(w * p for w, p in zip(weights, projected))
    logits = hidden @ head.weight + head.bias

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = labels.size
    loss = float(-log_probs[np.arange(n), labels].mean())
    if not need_grads:
        return loss, None

    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    d_hidden = d_logits @ head.weight.T
    d_weights = np.array([np.sum(d_hidden * p) for p in projected])
    grads = {
        "logits": weights * (d_weights - np.dot(weights, d_weights)),
        "weight": hidden.T @ d_logits,
        "bias": d_logits.sum(axis=0),
        "projections": None,
    }
    if combiner.projections is not None:
        grads["projections"] = [w * (m.T @ d_hidden) for w, m in zip(weights, features)]
    return loss, grads


def _apply_step(combiner: WeightedSumCombiner, head: ProbeHead, grads: Dict, lr: float) -> None:
    combiner.logits -= lr * grads["logits"]
    if combiner.projections is not None:
        for a, grad in zip(combiner.projections, grads["projections"]):
            a -= lr * grad
    head.weight -= lr * grads["weight"]
    head.bias -= lr * grads["bias"]


def _split(num_utterances: int, holdout_fraction: float,
           rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if num_utterances < 2:
        raise ProbeException("探测任务至少需要 2 条语句才能划分训练/留出集")
    order = rng.permutation(num_utterances)
    num_heldout = min(max(1, int(round(num_utterances * holdout_fraction))), num_utterances - 1)
    return np.sort(order[num_heldout:]), np.sort(order[:num_heldout])


def train_probe(task: ProbeTask, cfg: ProbeConfig, seed: int = 0) -> ProbeResult:
    """联合训练 α、A_l 与线性分类头（全批次梯度下降）"""
    start_time = time.time()
    logger = get_logger()
    rng = np.random.default_rng(seed)
    train_idx, heldout_idx = _split(task.inputs.num_sequences, cfg.holdout_fraction, rng)

    dims = [layer.dim for layer in task.inputs.layers]
    combiner = WeightedSumCombiner.create(
        dims, cfg.output_dim, cfg.use_projections, rng, cfg.init_scale
    )
    head = ProbeHead.zeros(combiner.output_dim, task.num_classes)
    features = [m[train_idx] for m in pooled_features(task.inputs)]
    labels = task.labels[train_idx]

    logger.log_operation(
        "PROBE_TRAIN_START",
        model_name=task.inputs.model_name,
        num_layers=combiner.num_layers,
        num_train=int(train_idx.size),
        num_heldout=int(heldout_idx.size),
        use_projections=cfg.use_projections,
        seed=seed
    )

    loss_trace: List[float] = []
    for step in range(cfg.steps):
        loss, grads = _loss_and_grads(features, labels, combiner, head)
        if not np.isfinite(loss):
            raise TrainingDivergenceException(
                f"探测训练在第 {step} 步出现非有限损失", trainer="probe", step=step
            )
        loss_trace.append(loss)
        _apply_step(combiner, head, grads, cfg.learning_rate)

    result = ProbeResult(
        combiner=combiner,
        head=head,
        accuracy=0.0,
        majority_baseline=0.0,
        contribution=contribution_scores(combiner),
        loss_trace=loss_trace,
        train_indices=train_idx,
        heldout_indices=heldout_idx,
        seed=seed
    )

    correct = 0
    for index in heldout_idx:
        layers = [layer.sequences[index] for layer in task.inputs.layers]
        correct += int(result.predict(layers) == task.labels[index])
    result.accuracy = correct / heldout_idx.size

    majority_class = int(np.argmax(np.bincount(labels, minlength=task.num_classes)))
    result.majority_baseline = float(np.mean(task.labels[heldout_idx] == majority_class))

    logger.log_performance(
        "PROBE_TRAIN_DONE",
        duration=time.time() - start_time,
        accuracy=result.accuracy,
        majority_baseline=result.majority_baseline,
        argmax_layer=result.argmax_layer,
        final_loss=loss_trace[-1] if loss_trace else None
    )
    return result


@dataclass
class GradientCheckReport:
    """梯度检查结果"""
    max_relative_error: float
    max_absolute_error: float
    num_parameters: int


def gradient_check_report(task: ProbeTask, combiner: WeightedSumCombiner, head: ProbeHead,
                          epsilon: float = 1e-5) -> GradientCheckReport:
    """用中心差分逐参数检查解析梯度

    相对误差 = |a - n| / max(|a|, |n|, 1e-6)，梯度恰为零的参数不会放大比值。
    """
    low, high = EPSILON_RANGE
    if not low <= epsilon <= high:
        raise ProbeException(f"epsilon 必须在 [{low}, {high}] 之间，当前为 {epsilon}")

    features = pooled_features(task.inputs)
    labels = task.labels
    _, grads = _loss_and_grads(features, labels, combiner, head)

    def loss_at(c: WeightedSumCombiner, h: ProbeHead) -> float:
        return _loss_and_grads(features, labels, c, h, need_grads=False)[0]

    # (取参数数组的函数, 对应的解析梯度)
    groups = [(lambda c, h: c.logits, grads["logits"]),
              (lambda c, h: h.weight, grads["weight"]),
              (lambda c, h: h.bias, grads["bias"])]
    if combiner.projections is not None:
        for l, grad in enumerate(grads["projections"]):
            groups.append((lambda c, h, l=l: c.projections[l], grad))

    max_rel = 0.0
    max_abs = 0.0
    count = 0
    for getter, analytic in groups:
        for flat_index in range(analytic.size):
            plus_c, plus_h = combiner.copy(), head.copy()
            getter(plus_c, plus_h).reshape(-1)[flat_index] += epsilon
            minus_c, minus_h = combiner.copy(), head.copy()
            getter(minus_c, minus_h).reshape(-1)[flat_index] -= epsilon
            numeric = (loss_at(plus_c, plus_h) - loss_at(minus_c, minus_h)) / (2 * epsilon)
            a = float(analytic.reshape(-1)[flat_index])
            diff = abs(a - numeric)
            max_abs = max(max_abs, diff)
            max_rel = max(max_rel, diff / max(abs(a), abs(numeric), RELATIVE_ERROR_FLOOR))
            count += 1

    return GradientCheckReport(max_relative_error=max_rel, max_absolute_error=max_abs,
                               num_parameters=count)


def gradient_check(task: ProbeTask, combiner: WeightedSumCombiner, head: ProbeHead,
                   epsilon: float = 1e-5) -> float:
    """返回解析梯度与中心差分的最大相对误差"""
    return gradient_check_report(task, combiner, head, epsilon).max_relative_error
