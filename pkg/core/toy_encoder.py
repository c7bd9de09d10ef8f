"""
玩具编码器与合成语料

逐帧作用、无时间上下文的多层编码器 x_l = f(x_{l-1} W_l)，
以及带说话人结构的合成序列语料和植入标签信号的探测数据集。
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.actvstore import ActivationSet, LayerActivation
from utils.config_manager import CorpusConfig, ProbeDatasetConfig, ToyEncoderConfig, VALID_ACTIVATIONS
from utils.exceptions import ToyModelException

# 非线性及其用输出表示的导数
ACTIVATIONS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0.0).astype(np.float64)),
}


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows×cols 随机矩阵，较短一边方向正交归一"""
    if rows >= cols:
        q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    return q.T


@dataclass
class ToyEncoder:
    """逐帧多层编码器，第 l 层权重为 D_in × D_out，无偏置"""
    weights: List[np.ndarray]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.activation not in VALID_ACTIVATIONS:
            raise ToyModelException(f"不支持的非线性: {self.activation}")
        if not self.weights:
            raise ToyModelException("编码器至少需要 1 层")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for index, w in enumerate(self.weights):
            if w.ndim != 2:
                raise ToyModelException(f"第 {index} 层权重不是矩阵")
            if not np.all(np.isfinite(w)):
                raise ToyModelException(f"第 {index} 层权重包含非有限值")
            if index > 0 and self.weights[index - 1].shape[1] != w.shape[0]:
                raise ToyModelException(
                    f"第 {index} 层输入维度 {w.shape[0]} 与上一层输出 "
                    f"{self.weights[index - 1].shape[1]} 不衔接"
                )

    @property
    def depth(self) -> int:
        """层数 L"""
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        """输入维度 D₀"""
        return int(self.weights[0].shape[0])

    @property
    def output_dim(self) -> int:
        """最后一层输出维度"""
        return int(self.weights[-1].shape[1])

    def forward(self, x: np.ndarray) -> List[np.ndarray]:
        """逐帧前向，返回每一层的输出（x 的最后一维为特征维）"""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ToyModelException(
                f"输入维度 {x.shape[-1]} 与编码器输入维度 {self.input_dim} 不一致"
            )
        func = ACTIVATIONS[self.activation][0]
        outputs = []
        for w in self.weights:
            x = func(x @ w)
            outputs.append(x)
        return outputs

    def backward(self, x: np.ndarray, outputs: List[np.ndarray],
                 d_last: np.ndarray) -> List[np.ndarray]:
        """已知最后一层输出的梯度，反传得到每层权重的梯度"""
        derivative = ACTIVATIONS[self.activation][1]
        grads: List[np.ndarray] = [np.empty(0)] * self.depth
        d_out = d_last
        for index in range(self.depth - 1, -1, -1):
            layer_in = x if index == 0 else outputs[index - 1]
            d_pre = d_out * derivative(outputs[index])
            flat_in = layer_in.reshape(-1, layer_in.shape[-1])
            flat_pre = d_pre.reshape(-1, d_pre.shape[-1])
            grads[index] = flat_in.T @ flat_pre
            d_out = d_pre @ self.weights[index].T
        return grads

    def copy(self) -> "ToyEncoder":
        """深拷贝"""
        return ToyEncoder([w.copy() for w in self.weights], self.activation, self.seed)


def _smooth_weight(width: int, keep: int, gain: float) -> np.ndarray:
    mask = np.zeros(width)
    mask[:keep] = 1.0
    return gain * np.diag(mask)


def make_toy_encoder(cfg: ToyEncoderConfig, seed: int = 0) -> ToyEncoder:
    """按种子确定性初始化编码器

    orthogonal: 随机正交归一；gaussian: N(0, gain²/D_in)；
    smooth: 对角截断，第 l 层保留前 width - shrink·(l+1) 维，相邻层越近越相似。
    设置瓶颈时第 bottleneck_depth 层权重替换为秩 r 的 Q1·Q2。
    """
    rng = np.random.default_rng(seed)
    weights = []
    for index in range(cfg.depth):
        d_in = cfg.input_dim if index == 0 else cfg.width
        if cfg.bottleneck_depth is not None and index == cfg.bottleneck_depth:
            rank = cfg.bottleneck_rank
            w = cfg.gain * random_orthonormal(rng, d_in, rank) @ random_orthonormal(rng, rank, cfg.width)
        elif cfg.init == "orthogonal":
            w = cfg.gain * random_orthonormal(rng, d_in, cfg.width)
        elif cfg.init == "gaussian":
            w = cfg.gain * rng.standard_normal((d_in, cfg.width)) / np.sqrt(d_in)
        else:
            w = _smooth_weight(cfg.width, cfg.width - cfg.smooth_shrink * (index + 1), cfg.gain)
        weights.append(w)
    return ToyEncoder(weights=weights, activation=cfg.activation, seed=seed)


def encode(encoder: ToyEncoder, inputs: Sequence[np.ndarray], include_embedding: bool = False,
           model_name: str = "toy", frame_hop=Fraction(1),
           utterance_ids: Optional[List[str]] = None) -> ActivationSet:
    """逐帧编码语料，每层生成一个 LayerActivation

    include_embedding 为 True 时额外追加一层段级说话人嵌入（最后一层的均值池化）。
    """
    if not inputs:
        raise ToyModelException("语料为空")
    per_layer: List[List[np.ndarray]] = [[] for _ in range(encoder.depth)]
    for seq in inputs:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2:
            raise ToyModelException(f"输入序列必须为 T×D 矩阵，当前形状 {seq.shape}")
        for index, output in enumerate(encoder.forward(seq)):
            per_layer[index].append(output)

    layers = [
        LayerActivation(layer_id=index, sequences=sequences)
        for index, sequences in enumerate(per_layer)
    ]
    if include_embedding:
        layers.append(LayerActivation(
            layer_id=encoder.depth,
            sequences=[seq.mean(axis=0, keepdims=True) for seq in per_layer[-1]],
            is_segment_level=True
        ))
    return ActivationSet(
        model_name=model_name,
        frame_hop=Fraction(frame_hop),
        layers=layers,
        utterance_ids=list(utterance_ids) if utterance_ids else []
    )


def gen_sequence_corpus(cfg: CorpusConfig, seed: int = 0) -> Tuple[List[np.ndarray], np.ndarray]:
    """合成说话人语料: 每条序列 = 说话人均值 + 帧噪声，长度在 [min_frames, max_frames] 内随机

    Returns:
        (序列列表, 每条序列的说话人编号)
    """
    rng = np.random.default_rng(seed)
    means = cfg.speaker_scale * rng.standard_normal((cfg.num_speakers, cfg.input_dim))
    speakers = np.arange(cfg.num_sequences) % cfg.num_speakers
    sequences = []
    for speaker in speakers:
        frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        noise = cfg.noise_std * rng.standard_normal((frames, cfg.input_dim))
        sequences.append(means[speaker] + noise)
    return sequences, speakers


def gen_probe_dataset(cfg: ProbeDatasetConfig, seed: int = 0) -> Tuple[ActivationSet, np.ndarray]:
    """植入信号的探测数据集

    只有 planted_layer 层带类别相关的均值偏移（范数为 separation），
    其余层为与标签无关的同维噪声。
    """
    if not 0 <= cfg.planted_layer < cfg.num_layers:
        raise ToyModelException(f"planted_layer 必须在 [0, {cfg.num_layers}) 之间")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(cfg.num_utterances) % cfg.num_classes)
    directions = rng.standard_normal((cfg.num_classes, cfg.dim))
    class_means = cfg.separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    layers = []
    for layer_id in range(cfg.num_layers):
        sequences = []
        for label in labels:
            noise = cfg.noise_std * rng.standard_normal((cfg.num_frames, cfg.dim))
            sequences.append(noise + class_means[label] if layer_id == cfg.planted_layer else noise)
        layers.append(LayerActivation(layer_id=layer_id, sequences=sequences))

    activation_set = ActivationSet(model_name="planted", frame_hop=Fraction(1), layers=layers)
    return activation_set, labels.astype(np.int64)
