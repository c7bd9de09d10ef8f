"""
AAM-Softmax 有监督玩具训练

编码器 → 整句均值池化得到说话人嵌入 → 与类别权重的余弦 logits，
目标类角度加间隔 m 后乘以尺度 s，做 softmax 交叉熵。
"""

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from core.toy_encoder import ToyEncoder, gen_sequence_corpus, make_toy_encoder
from utils.config_manager import AamConfig, SupervisedConfig
from utils.exceptions import ToyModelException, TrainingDivergenceException
from utils.log_manager import get_logger

NORM_EPS = 1e-12


def _normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_EPS)
    return x / norms, norms


def _aam_loss_and_grads(embeddings: np.ndarray, labels: np.ndarray, class_weights: np.ndarray,
                        cfg: AamConfig, need_grads: bool = True
                        ) -> Tuple[float, Optional[np.ndarray], Optional[np.ndarray]]:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if cfg.margin < 0 or cfg.margin >= math.pi / 2:
        raise ToyModelException(f"margin 必须在 [0, π/2) 之间，当前为 {cfg.margin}")
    if embeddings.ndim != 2 or class_weights.ndim != 2 or embeddings.shape[1] != class_weights.shape[1]:
        raise ToyModelException(
            f"嵌入 {embeddings.shape} 与类别权重 {class_weights.shape} 维度不匹配"
        )
    num_classes = class_weights.shape[0]
    if labels.size != embeddings.shape[0]:
        raise ToyModelException("标签数与嵌入数不一致")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ToyModelException(f"标签必须在 [0, {num_classes}) 之间")

    e_unit, e_norm = _normalize_rows(embeddings)
    w_unit, w_norm = _normalize_rows(class_weights)
    cosine = np.clip(e_unit @ w_unit.T, -1.0, 1.0)

    batch = np.arange(labels.size)
    target_cos = cosine[batch, labels]
    sine = np.sqrt(np.clip(1.0 - target_cos ** 2, 0.0, 1.0))
    cos_m, sin_m = math.cos(cfg.margin), math.sin(cfg.margin)
    # θ + m 超出 π 时 cos(θ+m) 不再单调，改用线性惩罚
    threshold = math.cos(math.pi - cfg.margin)
    penalty = math.sin(math.pi - cfg.margin) * cfg.margin
    in_range = target_cos > threshold
    phi = np.where(in_range, target_cos * cos_m - sine * sin_m, target_cos - penalty)

    logits = cfg.scale * cosine
    logits[batch, labels] = cfg.scale * phi
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[batch, labels].mean())
    if not need_grads:
        return loss, None, None

    d_logits = np.exp(log_probs)
    d_logits[batch, labels] -= 1.0
    d_logits /= labels.size

    d_cosine = cfg.scale * d_logits
    safe_sine = np.maximum(sine, NORM_EPS)
    d_phi = np.where(in_range, cos_m + target_cos / safe_sine * sin_m, 1.0)
    d_cosine[batch, labels] = cfg.scale * d_logits[batch, labels] * d_phi

    d_e_unit = d_cosine @ w_unit
    d_w_unit = d_cosine.T @ e_unit
    d_embeddings = (d_e_unit - e_unit * np.sum(e_unit * d_e_unit, axis=1, keepdims=True)) / e_norm
    d_class_weights = (d_w_unit - w_unit * np.sum(w_unit * d_w_unit, axis=1, keepdims=True)) / w_norm
    return loss, d_embeddings, d_class_weights


def aam_softmax_loss(embeddings: np.ndarray, labels: np.ndarray,
                     class_weights: np.ndarray, cfg: AamConfig) -> float:
    """AAM-Softmax 损失（嵌入与类别权重在内部归一化）"""
    return _aam_loss_and_grads(embeddings, labels, class_weights, cfg, need_grads=False)[0]


def cosine_predict(embeddings: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """按余弦最大的类别预测"""
    e_unit, _ = _normalize_rows(np.asarray(embeddings, dtype=np.float64))
    w_unit, _ = _normalize_rows(np.asarray(class_weights, dtype=np.float64))
    return np.argmax(e_unit @ w_unit.T, axis=1)


@dataclass
class SupervisedReport:
    """有监督训练的附带结果"""
    class_weights: np.ndarray
    loss_trace: List[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def _embed(encoder: ToyEncoder, corpus: List[np.ndarray]) -> Tuple[np.ndarray, list]:
    caches = [encoder.forward(seq) for seq in corpus]
    embeddings = np.stack([outputs[-1].mean(axis=0) for outputs in caches])
    return embeddings, caches


def train_supervised_toy(cfg: SupervisedConfig, seed: int = 0) -> Tuple[ToyEncoder, SupervisedReport]:
    """在带说话人标签的合成语料上用 AAM-Softmax 全批次梯度下降训练编码器"""
    start_time = time.time()
    logger = get_logger()
    seeds = np.random.default_rng(seed).integers(0, 2 ** 32, size=3)
    corpus, labels = gen_sequence_corpus(cfg.corpus, int(seeds[0]))
    encoder = make_toy_encoder(cfg.encoder, int(seeds[1]))
    weight_rng = np.random.default_rng(seeds[2])
    class_weights, _ = _normalize_rows(
        weight_rng.standard_normal((cfg.corpus.num_speakers, encoder.output_dim))
    )

    logger.log_operation(
        "SUPERVISED_TRAIN_START",
        steps=cfg.steps,
        num_speakers=cfg.corpus.num_speakers,
        margin=cfg.aam.margin,
        scale=cfg.aam.scale,
        seed=seed
    )

    loss_trace: List[float] = []
    for step in range(cfg.steps):
        embeddings, caches = _embed(encoder, corpus)
        loss, d_embeddings, d_class_weights = _aam_loss_and_grads(
            embeddings, labels, class_weights, cfg.aam
        )
        if not np.isfinite(loss):
            raise TrainingDivergenceException(
                f"有监督训练在第 {step} 步出现非有限损失", trainer="supervised", step=step
            )
        loss_trace.append(loss)

        encoder_grads = [np.zeros_like(w) for w in encoder.weights]
        for seq, outputs, d_emb in zip(corpus, caches, d_embeddings):
            frames = outputs[-1].shape[0]
            d_last = np.broadcast_to(d_emb / frames, outputs[-1].shape)
            for total, grad in zip(encoder_grads, encoder.backward(seq, outputs, d_last)):
                total += grad
        for w, grad in zip(encoder.weights, encoder_grads):
            w -= cfg.learning_rate * grad
        # 类别权重保持单位范数
        class_weights, _ = _normalize_rows(class_weights - cfg.learning_rate * d_class_weights)

    embeddings, _ = _embed(encoder, corpus)
    accuracy = float(np.mean(cosine_predict(embeddings, class_weights) == labels))
    logger.log_performance(
        "SUPERVISED_TRAIN_DONE",
        duration=time.time() - start_time,
        final_loss=loss_trace[-1] if loss_trace else None,
        train_accuracy=accuracy
    )
    return encoder, SupervisedReport(class_weights, loss_trace, accuracy)
